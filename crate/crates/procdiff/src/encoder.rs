//! The learnable clip encoder, the frozen phrase embedder, and the
//! video-text matching head.
//!
//! The encoder is a two-layer perceptron from observation space into the
//! phrase-embedding space; per-clip observations are single vectors at this
//! scale, so there is nothing for temporal attention to attend over inside a
//! clip. Encoder outputs are deliberately not normalized — the cosine inside
//! the matching softmax does the normalizing.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::math::{cosine, softmax};
use crate::rng::SeedRng;
use crate::tape::{NodeId, Tape};
use crate::types::{ClipObservation, Embedding, SoftTarget};
use crate::corpus::PhraseTable;

/// Activation for the encoder hidden layer; fixed by config and recorded in
/// checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Gelu,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Gelu => "gelu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "gelu" => Ok(Activation::Gelu),
            other => Err(Error::invalid_config(format!("unknown activation {other:?}"))),
        }
    }
}

/// Two-layer perceptron `D_obs -> H -> D`.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub w1: Arc<Mat>,
    pub b1: Arc<Mat>,
    pub w2: Arc<Mat>,
    pub b2: Arc<Mat>,
    pub activation: Activation,
}

impl EncoderParams {
    pub fn init(
        obs_dim: usize,
        hidden_dim: usize,
        embed_dim: usize,
        activation: Activation,
        rng: &mut SeedRng,
    ) -> Self {
        let s1 = 1.0 / (obs_dim as f64).sqrt();
        let s2 = 1.0 / (hidden_dim as f64).sqrt();
        EncoderParams {
            w1: Arc::new(Mat::randn(hidden_dim, obs_dim, s1, rng)),
            b1: Arc::new(Mat::zeros(1, hidden_dim)),
            w2: Arc::new(Mat::randn(embed_dim, hidden_dim, s2, rng)),
            b2: Arc::new(Mat::zeros(1, embed_dim)),
            activation,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.w1.cols
    }

    pub fn embed_dim(&self) -> usize {
        self.w2.rows
    }

    /// Parameters in canonical order, for checkpoints and checksums.
    pub fn named(&self) -> Vec<(String, Arc<Mat>)> {
        vec![
            ("encoder.w1".into(), self.w1.clone()),
            ("encoder.b1".into(), self.b1.clone()),
            ("encoder.w2".into(), self.w2.clone()),
            ("encoder.b2".into(), self.b2.clone()),
        ]
    }

    /// Mutable access in the same order as [`EncoderParams::named`].
    pub fn params_mut(&mut self) -> Vec<&mut Arc<Mat>> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

/// Encoder parameters bound onto a tape for one differentiable pass.
pub struct EncoderBinding {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
    activation: Activation,
}

impl EncoderBinding {
    /// Bind as trainable leaves.
    pub fn bind(tape: &mut Tape, params: &EncoderParams) -> Self {
        EncoderBinding {
            w1: tape.param(params.w1.clone()),
            b1: tape.param(params.b1.clone()),
            w2: tape.param(params.w2.clone()),
            b2: tape.param(params.b2.clone()),
            activation: params.activation,
        }
    }

    /// Bind as frozen constants (fine-tuning protocols keep `f` fixed).
    pub fn bind_frozen(tape: &mut Tape, params: &EncoderParams) -> Self {
        EncoderBinding {
            w1: tape.constant((*params.w1).clone()),
            b1: tape.constant((*params.b1).clone()),
            w2: tape.constant((*params.w2).clone()),
            b2: tape.constant((*params.b2).clone()),
            activation: params.activation,
        }
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        vec![self.w1, self.b1, self.w2, self.b2]
    }

    /// Encode a `(N, D_obs)` batch of observations to `(N, D)` embeddings.
    pub fn encode(&self, tape: &mut Tape, observations: NodeId) -> NodeId {
        let z1 = tape.matmul_nt(observations, self.w1);
        let z1 = tape.add_row(z1, self.b1);
        let h = match self.activation {
            Activation::Tanh => tape.tanh(z1),
            Activation::Gelu => tape.gelu(z1),
        };
        let z2 = tape.matmul_nt(h, self.w2);
        tape.add_row(z2, self.b2)
    }
}

/// Encode one clip observation. Deterministic in its inputs; the output is
/// not normalized.
pub fn encode_clip(params: &EncoderParams, obs: &ClipObservation) -> Result<Embedding> {
    if obs.raw.len() != params.obs_dim() {
        return Err(Error::invalid_input(format!(
            "observation dim {} does not match encoder dim {}",
            obs.raw.len(),
            params.obs_dim()
        )));
    }
    let rows = encode_rows(params, &Mat::row_vec(obs.raw.clone()));
    Embedding::new(rows.row(0).to_vec())
}

/// Encode many observations at once; rows of the result match input rows.
pub fn encode_rows(params: &EncoderParams, observations: &Mat) -> Mat {
    let mut tape = Tape::new();
    let binding = EncoderBinding::bind_frozen(&mut tape, params);
    let obs = tape.constant(observations.clone());
    let out = binding.encode(&mut tape, obs);
    tape.value(out).clone()
}

/// Look up the stored unit-norm phrase embedding; never updated by training.
pub fn phrase_embed(table: &PhraseTable, id: usize) -> Result<Embedding> {
    Ok(Embedding { values: table.embedding(id)?.to_vec() })
}

/// The matching head: `p(y | x) = softmax(cos(x, y_k) / tau)` over the table.
pub fn match_distribution(x: &[f64], table: &PhraseTable, tau: f64) -> Result<SoftTarget> {
    if tau <= 0.0 {
        return Err(Error::invalid_config(format!("temperature {tau} must be > 0")));
    }
    if x.len() != table.embedding_dim() {
        return Err(Error::invalid_input(format!(
            "embedding dim {} does not match table dim {}",
            x.len(),
            table.embedding_dim()
        )));
    }
    let scores: Vec<f64> = (0..table.len())
        .map(|k| cosine(x, table.embeddings.row(k)).map(|c| c / tau))
        .collect::<Result<_>>()?;
    Ok(SoftTarget { weights: softmax(&scores) })
}

/// Linear classifier over embeddings: `C` class scores plus bias.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub weight: Arc<Mat>,
    pub bias: Arc<Mat>,
}

impl ClassifierHead {
    pub fn zeros(classes: usize, embed_dim: usize) -> Self {
        ClassifierHead {
            weight: Arc::new(Mat::zeros(classes, embed_dim)),
            bias: Arc::new(Mat::zeros(1, classes)),
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.rows
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Arc<Mat>)> {
        vec![
            (format!("{prefix}.weight"), self.weight.clone()),
            (format!("{prefix}.bias"), self.bias.clone()),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Arc<Mat>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Class scores for one embedding: an affine map of `x`.
pub fn probe_logits(head: &ClassifierHead, x: &Embedding) -> Result<Vec<f64>> {
    if x.dim() != head.weight.cols {
        return Err(Error::invalid_input(format!(
            "embedding dim {} does not match head dim {}",
            x.dim(),
            head.weight.cols
        )));
    }
    let mut scores = head.bias.data.clone();
    for (c, s) in scores.iter_mut().enumerate() {
        *s += crate::mat::dot(head.weight.row(c), &x.values);
    }
    Ok(scores)
}
