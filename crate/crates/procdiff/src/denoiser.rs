//! The transformer denoiser: predicts the clean embedding of one masked
//! sequence slot from its noisy version, the context embeddings at the other
//! slots, and the diffusion step.
//!
//! Pre-LN blocks with bi-directional self-attention. Learned position
//! embeddings cover slots `0..9`; learned time embeddings cover `t = 1..=T`
//! and are added at every slot so context processing is also conditioned on
//! the step. Only the noisy token passes through the input projection.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::rng::SeedRng;
use crate::tape::{NodeId, Tape};
use crate::types::{Embedding, MAX_SEQ_LEN};

const LN_EPS: f64 = 1e-5;

/// Shape hyper-parameters of the denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub t_max: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig { dim: 64, layers: 4, heads: 4, ff_mult: 4, t_max: 4 }
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub ln1_gain: Arc<Mat>,
    pub ln1_bias: Arc<Mat>,
    pub wq: Arc<Mat>,
    pub bq: Arc<Mat>,
    pub wk: Arc<Mat>,
    pub bk: Arc<Mat>,
    pub wv: Arc<Mat>,
    pub bv: Arc<Mat>,
    pub wo: Arc<Mat>,
    pub bo: Arc<Mat>,
    pub ln2_gain: Arc<Mat>,
    pub ln2_bias: Arc<Mat>,
    pub ff_w1: Arc<Mat>,
    pub ff_b1: Arc<Mat>,
    pub ff_w2: Arc<Mat>,
    pub ff_b2: Arc<Mat>,
}

/// All denoiser parameters. The mask token is only consulted by the
/// mask-prediction pre-training variant; it rides along so checkpoints have
/// one layout regardless of mode.
#[derive(Debug, Clone)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    pub input_w: Arc<Mat>,
    pub input_b: Arc<Mat>,
    pub pos_embed: Arc<Mat>,
    pub time_embed: Arc<Mat>,
    pub mask_token: Arc<Mat>,
    pub layers: Vec<LayerParams>,
    pub ln_f_gain: Arc<Mat>,
    pub ln_f_bias: Arc<Mat>,
    pub out_w: Arc<Mat>,
    pub out_b: Arc<Mat>,
}

impl DenoiserParams {
    pub fn init(config: DenoiserConfig, rng: &mut SeedRng) -> Self {
        assert!(config.dim % config.heads == 0, "dim must divide into heads");
        let d = config.dim;
        let ff = config.ff_mult * d;
        let sd = 1.0 / (d as f64).sqrt();
        let sff = 1.0 / (ff as f64).sqrt();
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                ln1_gain: ones(d),
                ln1_bias: Arc::new(Mat::zeros(1, d)),
                wq: Arc::new(Mat::randn(d, d, sd, rng)),
                bq: Arc::new(Mat::zeros(1, d)),
                wk: Arc::new(Mat::randn(d, d, sd, rng)),
                bk: Arc::new(Mat::zeros(1, d)),
                wv: Arc::new(Mat::randn(d, d, sd, rng)),
                bv: Arc::new(Mat::zeros(1, d)),
                wo: Arc::new(Mat::randn(d, d, sd, rng)),
                bo: Arc::new(Mat::zeros(1, d)),
                ln2_gain: ones(d),
                ln2_bias: Arc::new(Mat::zeros(1, d)),
                ff_w1: Arc::new(Mat::randn(ff, d, sd, rng)),
                ff_b1: Arc::new(Mat::zeros(1, ff)),
                ff_w2: Arc::new(Mat::randn(d, ff, sff, rng)),
                ff_b2: Arc::new(Mat::zeros(1, d)),
            })
            .collect();
        DenoiserParams {
            config,
            input_w: Arc::new(Mat::randn(d, d, sd, rng)),
            input_b: Arc::new(Mat::zeros(1, d)),
            pos_embed: Arc::new(Mat::randn(MAX_SEQ_LEN, d, 0.02, rng)),
            time_embed: Arc::new(Mat::randn(config.t_max, d, 0.02, rng)),
            mask_token: Arc::new(Mat::randn(1, d, 0.02, rng)),
            layers,
            ln_f_gain: ones(d),
            ln_f_bias: Arc::new(Mat::zeros(1, d)),
            out_w: Arc::new(Mat::randn(d, d, sd, rng)),
            out_b: Arc::new(Mat::zeros(1, d)),
        }
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn t_max(&self) -> usize {
        self.config.t_max
    }

    pub fn named(&self) -> Vec<(String, Arc<Mat>)> {
        let mut out = vec![
            ("denoiser.input_w".into(), self.input_w.clone()),
            ("denoiser.input_b".into(), self.input_b.clone()),
            ("denoiser.pos_embed".into(), self.pos_embed.clone()),
            ("denoiser.time_embed".into(), self.time_embed.clone()),
            ("denoiser.mask_token".into(), self.mask_token.clone()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("denoiser.layer{i}");
            out.push((format!("{p}.ln1_gain"), l.ln1_gain.clone()));
            out.push((format!("{p}.ln1_bias"), l.ln1_bias.clone()));
            out.push((format!("{p}.wq"), l.wq.clone()));
            out.push((format!("{p}.bq"), l.bq.clone()));
            out.push((format!("{p}.wk"), l.wk.clone()));
            out.push((format!("{p}.bk"), l.bk.clone()));
            out.push((format!("{p}.wv"), l.wv.clone()));
            out.push((format!("{p}.bv"), l.bv.clone()));
            out.push((format!("{p}.wo"), l.wo.clone()));
            out.push((format!("{p}.bo"), l.bo.clone()));
            out.push((format!("{p}.ln2_gain"), l.ln2_gain.clone()));
            out.push((format!("{p}.ln2_bias"), l.ln2_bias.clone()));
            out.push((format!("{p}.ff_w1"), l.ff_w1.clone()));
            out.push((format!("{p}.ff_b1"), l.ff_b1.clone()));
            out.push((format!("{p}.ff_w2"), l.ff_w2.clone()));
            out.push((format!("{p}.ff_b2"), l.ff_b2.clone()));
        }
        out.push(("denoiser.ln_f_gain".into(), self.ln_f_gain.clone()));
        out.push(("denoiser.ln_f_bias".into(), self.ln_f_bias.clone()));
        out.push(("denoiser.out_w".into(), self.out_w.clone()));
        out.push(("denoiser.out_b".into(), self.out_b.clone()));
        out
    }

    /// Mutable access in the same order as [`DenoiserParams::named`].
    pub fn params_mut(&mut self) -> Vec<&mut Arc<Mat>> {
        let mut out = vec![
            &mut self.input_w,
            &mut self.input_b,
            &mut self.pos_embed,
            &mut self.time_embed,
            &mut self.mask_token,
        ];
        for l in self.layers.iter_mut() {
            out.push(&mut l.ln1_gain);
            out.push(&mut l.ln1_bias);
            out.push(&mut l.wq);
            out.push(&mut l.bq);
            out.push(&mut l.wk);
            out.push(&mut l.bk);
            out.push(&mut l.wv);
            out.push(&mut l.bv);
            out.push(&mut l.wo);
            out.push(&mut l.bo);
            out.push(&mut l.ln2_gain);
            out.push(&mut l.ln2_bias);
            out.push(&mut l.ff_w1);
            out.push(&mut l.ff_b1);
            out.push(&mut l.ff_w2);
            out.push(&mut l.ff_b2);
        }
        out.push(&mut self.ln_f_gain);
        out.push(&mut self.ln_f_bias);
        out.push(&mut self.out_w);
        out.push(&mut self.out_b);
        out
    }
}

fn ones(d: usize) -> Arc<Mat> {
    Arc::new(Mat::from_vec(1, d, vec![1.0; d]))
}

struct LayerBinding {
    ln1_gain: NodeId,
    ln1_bias: NodeId,
    wq: NodeId,
    bq: NodeId,
    wk: NodeId,
    bk: NodeId,
    wv: NodeId,
    bv: NodeId,
    wo: NodeId,
    bo: NodeId,
    ln2_gain: NodeId,
    ln2_bias: NodeId,
    ff_w1: NodeId,
    ff_b1: NodeId,
    ff_w2: NodeId,
    ff_b2: NodeId,
}

/// Denoiser parameters bound onto a tape for one differentiable pass.
pub struct DenoiserBinding {
    config: DenoiserConfig,
    pub input_w: NodeId,
    pub input_b: NodeId,
    pub pos_embed: NodeId,
    pub time_embed: NodeId,
    pub mask_token: NodeId,
    layers: Vec<LayerBinding>,
    ln_f_gain: NodeId,
    ln_f_bias: NodeId,
    out_w: NodeId,
    out_b: NodeId,
}

/// What occupies the masked slot.
pub enum MaskedInput {
    /// Diffusion mode: a noisy embedding node, passed through the input
    /// projection, with the time embedding of `t` added at every slot.
    Noisy { x_t: NodeId, t: usize },
    /// Mask-prediction mode: the learned mask token, no time conditioning.
    MaskToken,
}

impl DenoiserBinding {
    pub fn bind(tape: &mut Tape, params: &DenoiserParams) -> Self {
        Self::bind_impl(tape, params, true)
    }

    pub fn bind_frozen(tape: &mut Tape, params: &DenoiserParams) -> Self {
        Self::bind_impl(tape, params, false)
    }

    fn bind_impl(tape: &mut Tape, params: &DenoiserParams, trainable: bool) -> Self {
        let mut bind = |m: &Arc<Mat>| {
            if trainable {
                tape.param(m.clone())
            } else {
                tape.constant((**m).clone())
            }
        };
        let input_w = bind(&params.input_w);
        let input_b = bind(&params.input_b);
        let pos_embed = bind(&params.pos_embed);
        let time_embed = bind(&params.time_embed);
        let mask_token = bind(&params.mask_token);
        let layers = params
            .layers
            .iter()
            .map(|l| LayerBinding {
                ln1_gain: bind(&l.ln1_gain),
                ln1_bias: bind(&l.ln1_bias),
                wq: bind(&l.wq),
                bq: bind(&l.bq),
                wk: bind(&l.wk),
                bk: bind(&l.bk),
                wv: bind(&l.wv),
                bv: bind(&l.bv),
                wo: bind(&l.wo),
                bo: bind(&l.bo),
                ln2_gain: bind(&l.ln2_gain),
                ln2_bias: bind(&l.ln2_bias),
                ff_w1: bind(&l.ff_w1),
                ff_b1: bind(&l.ff_b1),
                ff_w2: bind(&l.ff_w2),
                ff_b2: bind(&l.ff_b2),
            })
            .collect();
        let ln_f_gain = bind(&params.ln_f_gain);
        let ln_f_bias = bind(&params.ln_f_bias);
        let out_w = bind(&params.out_w);
        let out_b = bind(&params.out_b);
        DenoiserBinding {
            config: params.config,
            input_w,
            input_b,
            pos_embed,
            time_embed,
            mask_token,
            layers,
            ln_f_gain,
            ln_f_bias,
            out_w,
            out_b,
        }
    }

    /// Node ids in the same order as [`DenoiserParams::named`].
    pub fn node_ids(&self) -> Vec<NodeId> {
        let mut out =
            vec![self.input_w, self.input_b, self.pos_embed, self.time_embed, self.mask_token];
        for l in &self.layers {
            out.extend([
                l.ln1_gain, l.ln1_bias, l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo,
                l.ln2_gain, l.ln2_bias, l.ff_w1, l.ff_b1, l.ff_w2, l.ff_b2,
            ]);
        }
        out.extend([self.ln_f_gain, self.ln_f_bias, self.out_w, self.out_b]);
        out
    }

    /// Assemble the token matrix for one masked prediction. Context entries
    /// are `(slot, embedding node)`; rows are ordered by slot. Returns the
    /// token node and the row index of the masked slot.
    pub fn assemble_masked_tokens(
        &self,
        tape: &mut Tape,
        context: &[(usize, NodeId)],
        mask_slot: usize,
        masked: MaskedInput,
    ) -> (NodeId, usize) {
        let masked_token = match &masked {
            MaskedInput::Noisy { x_t, .. } => {
                let projected = tape.matmul_nt(*x_t, self.input_w);
                tape.add(projected, self.input_b)
            }
            MaskedInput::MaskToken => self.mask_token,
        };

        let mut slots: Vec<(usize, NodeId)> = context.to_vec();
        slots.push((mask_slot, masked_token));
        slots.sort_by_key(|(s, _)| *s);
        let mask_row = slots.iter().position(|(s, _)| *s == mask_slot).expect("mask slot present");

        let mut token_rows = Vec::with_capacity(slots.len());
        let mut pos_rows = Vec::with_capacity(slots.len());
        for &(slot, node) in &slots {
            token_rows.push(node);
            pos_rows.push(tape.row(self.pos_embed, slot));
        }
        let tokens = tape.concat_rows(&token_rows);
        let pos = tape.concat_rows(&pos_rows);
        let mut tokens = tape.add(tokens, pos);
        if let MaskedInput::Noisy { t, .. } = masked {
            let time_row = tape.row(self.time_embed, t - 1);
            tokens = tape.add_row(tokens, time_row);
        }
        (tokens, mask_row)
    }

    /// Run the transformer stack over a `(N, D)` token matrix, returning the
    /// final layer-normed hidden states.
    pub fn transformer(&self, tape: &mut Tape, tokens: NodeId) -> NodeId {
        let d = self.config.dim;
        let heads = self.config.heads;
        let head_dim = d / heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut x = tokens;
        for layer in &self.layers {
            let normed = tape.layer_norm_rows(x, layer.ln1_gain, layer.ln1_bias, LN_EPS);
            let q = tape.matmul_nt(normed, layer.wq);
            let q = tape.add_row(q, layer.bq);
            let k = tape.matmul_nt(normed, layer.wk);
            let k = tape.add_row(k, layer.bk);
            let v = tape.matmul_nt(normed, layer.wv);
            let v = tape.add_row(v, layer.bv);
            let mut mixed_heads = Vec::with_capacity(heads);
            for h in 0..heads {
                let (c0, c1) = (h * head_dim, (h + 1) * head_dim);
                let qh = tape.cols(q, c0, c1);
                let kh = tape.cols(k, c0, c1);
                let vh = tape.cols(v, c0, c1);
                let scores = tape.matmul_nt(qh, kh);
                let scores = tape.scale(scores, scale);
                let attn = tape.softmax_rows(scores);
                mixed_heads.push(tape.matmul(attn, vh));
            }
            let mixed = tape.concat_cols(&mixed_heads);
            let attn_out = tape.matmul_nt(mixed, layer.wo);
            let attn_out = tape.add_row(attn_out, layer.bo);
            x = tape.add(x, attn_out);

            let normed2 = tape.layer_norm_rows(x, layer.ln2_gain, layer.ln2_bias, LN_EPS);
            let hidden = tape.matmul_nt(normed2, layer.ff_w1);
            let hidden = tape.add_row(hidden, layer.ff_b1);
            let hidden = tape.gelu(hidden);
            let ff_out = tape.matmul_nt(hidden, layer.ff_w2);
            let ff_out = tape.add_row(ff_out, layer.ff_b2);
            x = tape.add(x, ff_out);
        }
        tape.layer_norm_rows(x, self.ln_f_gain, self.ln_f_bias, LN_EPS)
    }

    /// Project one hidden row back to embedding space.
    pub fn project_out(&self, tape: &mut Tape, hidden: NodeId, row: usize) -> NodeId {
        let h = tape.row(hidden, row);
        let out = tape.matmul_nt(h, self.out_w);
        tape.add(out, self.out_b)
    }

    /// Full masked prediction: assemble, run the stack, project the masked row.
    pub fn predict_masked(
        &self,
        tape: &mut Tape,
        context: &[(usize, NodeId)],
        mask_slot: usize,
        masked: MaskedInput,
    ) -> NodeId {
        let (tokens, mask_row) = self.assemble_masked_tokens(tape, context, mask_slot, masked);
        let hidden = self.transformer(tape, tokens);
        self.project_out(tape, hidden, mask_row)
    }
}

/// Validate slots and step, then predict the clean embedding at `mask_slot`.
pub fn denoise_predict(
    params: &DenoiserParams,
    x_t: &Embedding,
    context: &[(usize, Embedding)],
    mask_slot: usize,
    t: usize,
) -> Result<Embedding> {
    validate_slots(params, context.iter().map(|(s, _)| *s), mask_slot)?;
    if t < 1 || t > params.t_max() {
        return Err(Error::invalid_input(format!(
            "diffusion step {t} outside 1..={}",
            params.t_max()
        )));
    }
    if x_t.dim() != params.dim() {
        return Err(Error::invalid_input("x_t dim does not match denoiser dim"));
    }
    for (_, e) in context {
        if e.dim() != params.dim() {
            return Err(Error::invalid_input("context dim does not match denoiser dim"));
        }
    }

    let mut tape = Tape::new();
    let binding = DenoiserBinding::bind_frozen(&mut tape, params);
    let context_nodes: Vec<(usize, NodeId)> = context
        .iter()
        .map(|(slot, e)| (*slot, tape.constant(Mat::row_vec(e.values.clone()))))
        .collect();
    let x_t_node = tape.constant(Mat::row_vec(x_t.values.clone()));
    let out = binding.predict_masked(
        &mut tape,
        &context_nodes,
        mask_slot,
        MaskedInput::Noisy { x_t: x_t_node, t },
    );
    Embedding::new(tape.value(out).data.clone())
}

/// Masked prediction for the mask-token (ordering ablation) variant: the
/// masked slot holds the learned mask token and no diffusion step is
/// involved, so the prediction is deterministic.
pub fn mask_predict(
    params: &DenoiserParams,
    context: &[(usize, Embedding)],
    mask_slot: usize,
) -> Result<Embedding> {
    validate_slots(params, context.iter().map(|(s, _)| *s), mask_slot)?;
    for (_, e) in context {
        if e.dim() != params.dim() {
            return Err(Error::invalid_input("context dim does not match denoiser dim"));
        }
    }
    let mut tape = Tape::new();
    let binding = DenoiserBinding::bind_frozen(&mut tape, params);
    let context_nodes: Vec<(usize, NodeId)> = context
        .iter()
        .map(|(slot, e)| (*slot, tape.constant(Mat::row_vec(e.values.clone()))))
        .collect();
    let out = binding.predict_masked(&mut tape, &context_nodes, mask_slot, MaskedInput::MaskToken);
    Embedding::new(tape.value(out).data.clone())
}

pub(crate) fn validate_slots(
    params: &DenoiserParams,
    context_slots: impl Iterator<Item = usize>,
    mask_slot: usize,
) -> Result<()> {
    let mut seen = [false; MAX_SEQ_LEN];
    let mut count = 0usize;
    for slot in context_slots {
        if slot >= MAX_SEQ_LEN {
            return Err(Error::invalid_input(format!("slot {slot} outside 0..{MAX_SEQ_LEN}")));
        }
        if seen[slot] {
            return Err(Error::invalid_input(format!("slot {slot} used twice")));
        }
        seen[slot] = true;
        count += 1;
    }
    if mask_slot >= MAX_SEQ_LEN {
        return Err(Error::invalid_input(format!(
            "mask slot {mask_slot} outside 0..{MAX_SEQ_LEN}"
        )));
    }
    if seen[mask_slot] {
        return Err(Error::invalid_input(format!("mask slot {mask_slot} collides with context")));
    }
    if count == 0 {
        return Err(Error::invalid_input("context must not be empty"));
    }
    let _ = params;
    Ok(())
}
