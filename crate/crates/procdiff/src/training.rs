//! Pre-training and the fine-tuning protocols.
//!
//! Pre-training runs minibatch gradient descent on the three-term objective.
//! All fine-tuning protocols keep the encoder frozen: the linear probe trains
//! a classifier over frozen embeddings, the forecaster trains the denoiser
//! (plus a linear head) through the deterministic reverse chain, and the
//! activity protocol trains the denoiser to aggregate a whole sequence
//! through a learned readout slot.
//!
//! Every randomized choice derives from `(seed, stream path)`, batch results
//! reduce in index order, and batches are consumed in a seeded shuffle order,
//! so identical configs produce bit-identical models — and a run resumed
//! from an epoch-boundary checkpoint continues exactly as the uninterrupted
//! run would have.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::{mode_name, ActivityHead, ModelBundle, ModelConfig, Provenance};
use crate::corpus::PhraseTable;
use crate::denoiser::{DenoiserBinding, DenoiserParams};
use crate::diffusion::{approximate_chain_on_tape, make_schedule};
use crate::encoder::{encode_rows, ClassifierHead, EncoderParams};
use crate::error::{Error, Result};
use crate::hash::params_checksum;
use crate::mat::Mat;
use crate::objective::{build_step_loss, LossBreakdown, ObjectiveMode, ObjectiveOptions};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::derive_rng;
use crate::tape::{NodeId, Tape};
use crate::types::{ClipSequence, CorpusRecord, Split};

/// Clips of history fed to the forecaster.
pub const FORECAST_CONTEXT: usize = 8;
/// The slot the forecaster predicts into.
pub const FORECAST_MASK_SLOT: usize = 8;

/// Knobs shared by pre-training and the fine-tuning protocols.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub seed: u64,
    /// Pre-training regime; fine-tuning protocols ignore it.
    pub mode: ObjectiveMode,
    /// Detach the reconstruction target (see the objective module).
    pub stop_gradient_target: bool,
    /// Epochs between validation-loss evaluations; 0 disables them.
    pub eval_cadence: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            weight_decay: 0.01,
            seed: 1,
            mode: ObjectiveMode::Diffusion,
            stop_gradient_target: true,
            eval_cadence: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.epochs == 0 {
            problems.push("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0) {
            problems.push("learning_rate must be > 0".into());
        }
        if self.weight_decay < 0.0 {
            problems.push("weight_decay must be >= 0".into());
        }
        problems
    }

    fn options(&self) -> ObjectiveOptions {
        ObjectiveOptions { mode: self.mode, stop_gradient_target: self.stop_gradient_target }
    }
}

/// One logged training step (one sequence's sampled loss).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub xe: f64,
    pub mse: f64,
    pub mc: f64,
    pub total: f64,
    pub t: usize,
    pub j: usize,
}

/// Per-epoch mean losses on one split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub split: String,
    pub xe: f64,
    pub mse: f64,
    pub mc: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    pub curves: Vec<EpochRow>,
    /// Examples skipped for lacking usable context.
    pub warnings: usize,
}

/// A pre-trained model plus the state needed to resume it.
#[derive(Debug)]
pub struct Pretrained {
    pub bundle: ModelBundle,
    pub optimizer: Optimizer,
    pub log: TrainLog,
}

struct StepOutcome {
    breakdown: LossBreakdown,
    grads: Vec<Mat>,
}

fn trainable_shapes(named: &[(String, Arc<Mat>)]) -> Vec<(usize, usize)> {
    named.iter().map(|(_, m)| (m.rows, m.cols)).collect()
}

fn extract_grads(
    tape: &Tape,
    grads: &crate::tape::Gradients,
    ids: &[NodeId],
) -> Vec<Mat> {
    ids.iter()
        .map(|&id| {
            grads.get(id).cloned().unwrap_or_else(|| {
                let v = tape.value(id);
                Mat::zeros(v.rows, v.cols)
            })
        })
        .collect()
}

fn mean_grads(per_example: &[StepOutcome], shapes: &[(usize, usize)]) -> Vec<Mat> {
    let mut acc: Vec<Mat> = shapes.iter().map(|&(r, c)| Mat::zeros(r, c)).collect();
    for outcome in per_example {
        for (a, g) in acc.iter_mut().zip(&outcome.grads) {
            a.add_assign(g);
        }
    }
    let scale = 1.0 / per_example.len() as f64;
    for a in acc.iter_mut() {
        a.scale_assign(scale);
    }
    acc
}

fn split_sequences(corpus: &[CorpusRecord], split: Split) -> Vec<&ClipSequence> {
    corpus.iter().filter(|r| r.split == split).map(|r| &r.sequence).collect()
}

/// Checksum of a phrase table, binding bundles to the table they trained on.
pub fn table_checksum(table: &PhraseTable) -> String {
    let named = vec![
        ("table.embeddings".to_string(), Arc::new(table.embeddings.clone())),
        ("table.lift".to_string(), Arc::new(table.lift.clone())),
    ];
    let mut text = String::new();
    for p in &table.phrases {
        text.push_str(&p.text);
        text.push('\n');
    }
    crate::hash::sha256_hex(
        format!("{}||{}", params_checksum(&named), crate::hash::sha256_hex(text.as_bytes()))
            .as_bytes(),
    )
}

/// Pre-train encoder and denoiser on the corpus train split.
pub fn pretrain(
    corpus: &[CorpusRecord],
    table: &PhraseTable,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<Pretrained> {
    let mut problems = model_cfg.validate();
    problems.extend(cfg.validate());
    if model_cfg.embedding_dim != table.embedding_dim() {
        problems.push("model embedding_dim does not match table".into());
    }
    if model_cfg.observation_dim != table.observation_dim() {
        problems.push("model observation_dim does not match table".into());
    }
    if !problems.is_empty() {
        return Err(Error::InvalidConfig(problems));
    }

    let encoder = EncoderParams::init(
        model_cfg.observation_dim,
        model_cfg.hidden_dim,
        model_cfg.embedding_dim,
        model_cfg.activation,
        &mut derive_rng(cfg.seed, &[10]),
    );
    let denoiser = DenoiserParams::init(model_cfg.denoiser, &mut derive_rng(cfg.seed, &[11]));
    let schedule = make_schedule(model_cfg.denoiser.t_max)?;
    let bundle = ModelBundle {
        model: model_cfg.clone(),
        encoder,
        denoiser,
        schedule,
        table_hash: table_checksum(table),
        probe: None,
        forecast_head: None,
        activity: None,
        provenance: Provenance {
            config_hash: String::new(),
            corpus_hash: String::new(),
            step_count: 0,
            mode: mode_name(cfg.mode).to_string(),
        },
    };

    let shapes = match cfg.mode {
        ObjectiveMode::Matching => trainable_shapes(&bundle.encoder.named()),
        _ => {
            let mut s = trainable_shapes(&bundle.encoder.named());
            s.extend(trainable_shapes(&bundle.denoiser.named()));
            s
        }
    };
    let optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, cfg.weight_decay, &shapes);
    continue_pretrain(bundle, optimizer, corpus, table, cfg)
}

/// Continue pre-training from an epoch boundary. The epoch to resume at is
/// recovered from the optimizer step count, so a resumed run replays the
/// identical seed streams the uninterrupted run would have used.
pub fn continue_pretrain(
    mut bundle: ModelBundle,
    mut optimizer: Optimizer,
    corpus: &[CorpusRecord],
    table: &PhraseTable,
    cfg: &TrainConfig,
) -> Result<Pretrained> {
    let train = split_sequences(corpus, Split::Train);
    let val = split_sequences(corpus, Split::Val);
    if train.is_empty() {
        return Err(Error::invalid_input("corpus has an empty train split"));
    }
    let table_hash = table_checksum(table);
    if bundle.table_hash != table_hash {
        return Err(Error::Integrity("bundle was trained against a different phrase table".into()));
    }

    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
    if optimizer.step as usize % batches_per_epoch != 0 {
        return Err(Error::Integrity(
            "checkpoint does not sit on an epoch boundary for this corpus/batch size".into(),
        ));
    }
    let start_epoch = optimizer.step as usize / batches_per_epoch;
    let opts = cfg.options();
    let table_emb = Arc::new(table.embeddings.clone());
    let mut log = TrainLog::default();

    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut derive_rng(cfg.seed, &[20, epoch as u64]));

        let mut epoch_sum = [0.0f64; 4];
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let encoder = &bundle.encoder;
            let denoiser = &bundle.denoiser;
            let schedule = &bundle.schedule;
            let outcomes: Result<Vec<StepOutcome>> = chunk
                .par_iter()
                .enumerate()
                .map(|(k, &seq_idx)| {
                    let draw = (batch_idx * cfg.batch_size + k) as u64;
                    let mut rng = derive_rng(cfg.seed, &[30, epoch as u64, draw]);
                    let graph = build_step_loss(
                        encoder,
                        denoiser,
                        schedule,
                        train[seq_idx],
                        &table_emb,
                        bundle.model.tau,
                        &opts,
                        &mut rng,
                    )?;
                    if !graph.breakdown.total.is_finite() {
                        return Err(Error::Numeric(format!(
                            "non-finite loss at epoch {epoch}, batch {batch_idx}, sequence \
                             {seq_idx}: {:?}",
                            graph.breakdown
                        )));
                    }
                    let grads = graph.tape.backward(graph.total);
                    let mut ids = graph.encoder_ids.clone();
                    ids.extend(&graph.denoiser_ids);
                    Ok(StepOutcome {
                        breakdown: graph.breakdown,
                        grads: extract_grads(&graph.tape, &grads, &ids),
                    })
                })
                .collect();
            let outcomes = outcomes?;

            let shapes: Vec<(usize, usize)> =
                outcomes[0].grads.iter().map(|g| (g.rows, g.cols)).collect();
            let mean = mean_grads(&outcomes, &shapes);
            {
                let mut params = bundle.encoder.params_mut();
                if opts.mode != ObjectiveMode::Matching {
                    params.extend(bundle.denoiser.params_mut());
                }
                optimizer.apply(&mut params, &mean);
            }

            for o in &outcomes {
                let b = &o.breakdown;
                epoch_sum[0] += b.xe;
                epoch_sum[1] += b.mse;
                epoch_sum[2] += b.mc;
                epoch_sum[3] += b.total;
                log.rows.push(LogRow {
                    step: optimizer.step,
                    xe: b.xe,
                    mse: b.mse,
                    mc: b.mc,
                    total: b.total,
                    t: b.sampled_t,
                    j: b.masked_slot,
                });
            }
        }

        let n = train.len() as f64;
        log.curves.push(EpochRow {
            epoch,
            split: "train".into(),
            xe: epoch_sum[0] / n,
            mse: epoch_sum[1] / n,
            mc: epoch_sum[2] / n,
            total: epoch_sum[3] / n,
        });

        if cfg.eval_cadence > 0 && (epoch + 1) % cfg.eval_cadence == 0 && !val.is_empty() {
            let row = eval_split_losses(&bundle, &val, &table_emb, &opts, cfg.seed, epoch)?;
            log.curves.push(row);
        }
    }

    bundle.provenance.step_count = optimizer.step;
    Ok(Pretrained { bundle, optimizer, log })
}

fn eval_split_losses(
    bundle: &ModelBundle,
    val: &[&ClipSequence],
    table_emb: &Arc<Mat>,
    opts: &ObjectiveOptions,
    seed: u64,
    epoch: usize,
) -> Result<EpochRow> {
    let sums: Result<Vec<LossBreakdown>> = val
        .par_iter()
        .enumerate()
        .map(|(i, seq)| {
            let mut rng = derive_rng(seed, &[40, epoch as u64, i as u64]);
            let graph = build_step_loss(
                &bundle.encoder,
                &bundle.denoiser,
                &bundle.schedule,
                seq,
                table_emb,
                bundle.model.tau,
                opts,
                &mut rng,
            )?;
            Ok(graph.breakdown)
        })
        .collect();
    let sums = sums?;
    let n = sums.len() as f64;
    Ok(EpochRow {
        epoch,
        split: "val".into(),
        xe: sums.iter().map(|b| b.xe).sum::<f64>() / n,
        mse: sums.iter().map(|b| b.mse).sum::<f64>() / n,
        mc: sums.iter().map(|b| b.mc).sum::<f64>() / n,
        total: sums.iter().map(|b| b.total).sum::<f64>() / n,
    })
}

/// Train a linear classifier over frozen embeddings with softmax
/// cross-entropy. The encoder is untouched; its checksum is verified.
pub fn fit_linear_probe(
    bundle: &ModelBundle,
    table: &PhraseTable,
    labeled: &[(crate::types::ClipObservation, usize)],
    cfg: &TrainConfig,
) -> Result<(ClassifierHead, TrainLog)> {
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(Error::InvalidConfig(problems));
    }
    if labeled.is_empty() {
        return Err(Error::invalid_input("no labeled clips"));
    }
    let k = table.len();
    for (_, label) in labeled {
        if *label >= k {
            return Err(Error::invalid_input(format!("label {label} outside phrase range")));
        }
    }
    let checksum_before = bundle.encoder_checksum();

    // one frozen-encoder pass over all clips
    let d_obs = bundle.model.observation_dim;
    let mut obs = Mat::zeros(labeled.len(), d_obs);
    for (r, (clip, _)) in labeled.iter().enumerate() {
        if clip.raw.len() != d_obs {
            return Err(Error::invalid_input("clip dim does not match encoder"));
        }
        obs.row_mut(r).copy_from_slice(&clip.raw);
    }
    let embeddings = encode_rows(&bundle.encoder, &obs);

    let d = bundle.model.embedding_dim;
    let mut head = ClassifierHead::zeros(k, d);
    let mut optimizer = Optimizer::new(
        cfg.optimizer,
        cfg.learning_rate,
        cfg.weight_decay,
        &[(k, d), (1, k)],
    );

    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..labeled.len()).collect();
        order.shuffle(&mut derive_rng(cfg.seed, &[21, epoch as u64]));
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let w = tape.param(head.weight.clone());
            let b = tape.param(head.bias.clone());
            let mut batch = Mat::zeros(chunk.len(), d);
            for (r, &i) in chunk.iter().enumerate() {
                batch.row_mut(r).copy_from_slice(embeddings.row(i));
            }
            let x = tape.constant(batch);
            let logits = tape.matmul_nt(x, w);
            let logits = tape.add_row(logits, b);
            let mut ce_total = None;
            for (r, &i) in chunk.iter().enumerate() {
                let row = tape.row(logits, r);
                let mut one_hot = vec![0.0; k];
                one_hot[labeled[i].1] = 1.0;
                let (ce, _) = tape.ce_from_scores(row, &one_hot);
                ce_total = Some(match ce_total {
                    None => ce,
                    Some(acc) => tape.add(acc, ce),
                });
            }
            let loss = tape.scale(ce_total.expect("non-empty batch"), 1.0 / chunk.len() as f64);
            epoch_loss += tape.value(loss).data[0] * chunk.len() as f64;
            let grads = tape.backward(loss);
            let mean = extract_grads(&tape, &grads, &[w, b]);
            optimizer.apply(&mut head.params_mut(), &mean);
        }
        log.curves.push(EpochRow {
            epoch,
            split: "train".into(),
            xe: epoch_loss / labeled.len() as f64,
            mse: 0.0,
            mc: 0.0,
            total: epoch_loss / labeled.len() as f64,
        });
    }

    if bundle.encoder_checksum() != checksum_before {
        return Err(Error::Integrity("encoder changed during probe training".into()));
    }
    Ok((head, log))
}

/// Forecast training/eval windows: the up-to-8 clips before `target_pos`,
/// placed right-aligned at slots `(8 - L)..8` with the masked slot at 8, so
/// the most recent clip always sits next to the prediction slot.
pub fn forecast_window(target_pos: usize) -> (usize, Vec<usize>) {
    let len = target_pos.min(FORECAST_CONTEXT);
    let start = target_pos - len;
    let slots = (0..len).map(|i| FORECAST_MASK_SLOT - len + i).collect();
    (start, slots)
}

fn encode_sequences(encoder: &EncoderParams, seqs: &[&ClipSequence]) -> Vec<Mat> {
    seqs.par_iter()
        .map(|seq| {
            let mut obs = Mat::zeros(seq.len(), seq.clips[0].raw.len());
            for (r, clip) in seq.clips.iter().enumerate() {
                obs.row_mut(r).copy_from_slice(&clip.raw);
            }
            encode_rows(encoder, &obs)
        })
        .collect()
}

/// Fine-tune the denoiser (and a linear classifier over the deterministic
/// chain output) to predict the next step id; the encoder stays frozen.
pub fn finetune_forecaster(
    bundle: &ModelBundle,
    corpus: &[CorpusRecord],
    table: &PhraseTable,
    cfg: &TrainConfig,
) -> Result<(ModelBundle, TrainLog)> {
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(Error::InvalidConfig(problems));
    }
    let checksum_before = bundle.encoder_checksum();
    let train = split_sequences(corpus, Split::Train);
    if train.is_empty() {
        return Err(Error::invalid_input("corpus has an empty train split"));
    }
    let embeddings = encode_sequences(&bundle.encoder, &train);

    let k = table.len();
    let d = bundle.model.embedding_dim;
    let mut denoiser = bundle.denoiser.clone();
    let mut head = ClassifierHead::zeros(k, d);
    let mut shapes = trainable_shapes(&denoiser.named());
    shapes.extend([(k, d), (1, k)]);
    let mut optimizer =
        Optimizer::new(cfg.optimizer, cfg.learning_rate, cfg.weight_decay, &shapes);

    let mask_mode = bundle.provenance.mode == "mask";
    let mut log = TrainLog::default();
    let mut skipped = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut derive_rng(cfg.seed, &[60, epoch as u64]));
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let den_ref = &denoiser;
            let head_ref = &head;
            let outcomes: Result<Vec<Option<StepOutcome>>> = chunk
                .par_iter()
                .enumerate()
                .map(|(b_pos, &seq_idx)| {
                    let draw = (batch_idx * cfg.batch_size + b_pos) as u64;
                    let mut rng = derive_rng(cfg.seed, &[61, epoch as u64, draw]);
                    let seq = train[seq_idx];
                    let target_pos = rng.gen_range(1..seq.len());
                    let (start, slots) = forecast_window(target_pos);
                    if slots.is_empty() {
                        return Ok(None);
                    }
                    let mut tape = Tape::new();
                    let den = DenoiserBinding::bind(&mut tape, den_ref);
                    let w = tape.param(head_ref.weight.clone());
                    let b = tape.param(head_ref.bias.clone());
                    let context: Vec<(usize, NodeId)> = slots
                        .iter()
                        .enumerate()
                        .map(|(i, &slot)| {
                            let row = embeddings[seq_idx].row(start + i).to_vec();
                            (slot, tape.constant(Mat::row_vec(row)))
                        })
                        .collect();
                    let x0_hat = if mask_mode {
                        den.predict_masked(
                            &mut tape,
                            &context,
                            FORECAST_MASK_SLOT,
                            crate::denoiser::MaskedInput::MaskToken,
                        )
                    } else {
                        approximate_chain_on_tape(
                            &mut tape,
                            &den,
                            &context,
                            FORECAST_MASK_SLOT,
                            &bundle.schedule,
                            d,
                        )
                    };
                    let logits = tape.matmul_nt(x0_hat, w);
                    let logits = tape.add(logits, b);
                    let mut one_hot = vec![0.0; k];
                    one_hot[seq.phrase_ids[target_pos]] = 1.0;
                    let (loss, _) = tape.ce_from_scores(logits, &one_hot);
                    let value = tape.value(loss).data[0];
                    if !value.is_finite() {
                        return Err(Error::Numeric(format!(
                            "non-finite forecast loss at epoch {epoch}, sequence {seq_idx}"
                        )));
                    }
                    let grads = tape.backward(loss);
                    let mut ids = den.node_ids();
                    ids.extend([w, b]);
                    Ok(Some(StepOutcome {
                        breakdown: LossBreakdown {
                            xe: 0.0,
                            mse: 0.0,
                            mc: value,
                            total: value,
                            masked_slot: target_pos,
                            sampled_t: 0,
                            clamped: false,
                        },
                        grads: extract_grads(&tape, &grads, &ids),
                    }))
                })
                .collect();
            let outcomes: Vec<StepOutcome> = outcomes?.into_iter().flatten().collect();
            skipped += chunk.len() - outcomes.len();
            if outcomes.is_empty() {
                continue;
            }
            let mean = mean_grads(&outcomes, &shapes);
            {
                let mut params = denoiser.params_mut();
                params.extend(head.params_mut());
                optimizer.apply(&mut params, &mean);
            }
            for o in &outcomes {
                log.rows.push(LogRow {
                    step: optimizer.step,
                    xe: 0.0,
                    mse: 0.0,
                    mc: 0.0,
                    total: o.breakdown.total,
                    t: 0,
                    j: o.breakdown.masked_slot,
                });
            }
        }
    }
    log.warnings = skipped;

    if bundle.encoder_checksum() != checksum_before {
        return Err(Error::Integrity("encoder changed during forecast fine-tune".into()));
    }
    let mut out = bundle.clone();
    out.denoiser = denoiser;
    out.forecast_head = Some(head);
    out.provenance.step_count += optimizer.step;
    Ok((out, log))
}

/// The ordering-free baseline: a linear head over the mean context
/// embedding, trained on the same windows the forecaster sees.
pub fn fit_forecast_baseline(
    bundle: &ModelBundle,
    corpus: &[CorpusRecord],
    table: &PhraseTable,
    cfg: &TrainConfig,
) -> Result<ClassifierHead> {
    let train = split_sequences(corpus, Split::Train);
    if train.is_empty() {
        return Err(Error::invalid_input("corpus has an empty train split"));
    }
    let embeddings = encode_sequences(&bundle.encoder, &train);
    let k = table.len();
    let d = bundle.model.embedding_dim;
    let mut head = ClassifierHead::zeros(k, d);
    let mut optimizer = Optimizer::new(
        cfg.optimizer,
        cfg.learning_rate,
        cfg.weight_decay,
        &[(k, d), (1, k)],
    );

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut derive_rng(cfg.seed, &[62, epoch as u64]));
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let w = tape.param(head.weight.clone());
            let b = tape.param(head.bias.clone());
            let mut ce_total = None;
            for (b_pos, &seq_idx) in chunk.iter().enumerate() {
                let draw = (batch_idx * cfg.batch_size + b_pos) as u64;
                let mut rng = derive_rng(cfg.seed, &[61, epoch as u64, draw]);
                let seq = train[seq_idx];
                let target_pos = rng.gen_range(1..seq.len());
                let (start, slots) = forecast_window(target_pos);
                let feature = mean_embedding(&embeddings[seq_idx], start, slots.len());
                let x = tape.constant(Mat::row_vec(feature));
                let logits = tape.matmul_nt(x, w);
                let logits = tape.add(logits, b);
                let mut one_hot = vec![0.0; k];
                one_hot[seq.phrase_ids[target_pos]] = 1.0;
                let (ce, _) = tape.ce_from_scores(logits, &one_hot);
                ce_total = Some(match ce_total {
                    None => ce,
                    Some(acc) => tape.add(acc, ce),
                });
            }
            let loss = tape.scale(ce_total.expect("non-empty batch"), 1.0 / chunk.len() as f64);
            let grads = tape.backward(loss);
            let mean = extract_grads(&tape, &grads, &[w, b]);
            optimizer.apply(&mut head.params_mut(), &mean);
        }
    }
    Ok(head)
}

/// Mean of `len` consecutive embedding rows starting at `start`.
pub fn mean_embedding(rows: &Mat, start: usize, len: usize) -> Vec<f64> {
    let mut mean = vec![0.0; rows.cols];
    for r in start..start + len {
        for (m, &v) in mean.iter_mut().zip(rows.row(r)) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= len as f64;
    }
    mean
}

/// Fine-tune the denoiser to classify whole sequences into activities via a
/// learned readout slot; the encoder stays frozen.
pub fn finetune_activity(
    bundle: &ModelBundle,
    corpus: &[CorpusRecord],
    cfg: &TrainConfig,
) -> Result<(ModelBundle, TrainLog)> {
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(Error::InvalidConfig(problems));
    }
    let checksum_before = bundle.encoder_checksum();
    let train: Vec<&ClipSequence> = split_sequences(corpus, Split::Train);
    if train.is_empty() {
        return Err(Error::invalid_input("corpus has an empty train split"));
    }
    let tasks = corpus.iter().map(|r| r.sequence.task_id).max().unwrap() + 1;
    let embeddings = encode_sequences(&bundle.encoder, &train);

    let d = bundle.model.embedding_dim;
    let mut denoiser = bundle.denoiser.clone();
    let mut activity = ActivityHead::zeros(
        tasks,
        d,
        Mat::randn(1, d, 0.02, &mut derive_rng(cfg.seed, &[70])),
    );
    let mut shapes = trainable_shapes(&denoiser.named());
    shapes.extend(trainable_shapes(&activity.named()));
    let mut optimizer =
        Optimizer::new(cfg.optimizer, cfg.learning_rate, cfg.weight_decay, &shapes);
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut derive_rng(cfg.seed, &[71, epoch as u64]));
        for chunk in order.chunks(cfg.batch_size) {
            let den_ref = &denoiser;
            let act_ref = &activity;
            let outcomes: Result<Vec<StepOutcome>> = chunk
                .par_iter()
                .map(|&seq_idx| {
                    let seq = train[seq_idx];
                    if seq.task_id >= tasks {
                        return Err(Error::invalid_input(format!(
                            "unknown task id {}",
                            seq.task_id
                        )));
                    }
                    let mut tape = Tape::new();
                    let den = DenoiserBinding::bind(&mut tape, den_ref);
                    let readout = tape.param(act_ref.readout_token.clone());
                    let w = tape.param(act_ref.head.weight.clone());
                    let b = tape.param(act_ref.head.bias.clone());
                    let logits =
                        activity_logits(&mut tape, &den, readout, w, b, &embeddings[seq_idx]);
                    let mut one_hot = vec![0.0; tasks];
                    one_hot[seq.task_id] = 1.0;
                    let (loss, _) = tape.ce_from_scores(logits, &one_hot);
                    let value = tape.value(loss).data[0];
                    if !value.is_finite() {
                        return Err(Error::Numeric(format!(
                            "non-finite activity loss at epoch {epoch}, sequence {seq_idx}"
                        )));
                    }
                    let grads = tape.backward(loss);
                    let mut ids = den.node_ids();
                    ids.extend([readout, w, b]);
                    Ok(StepOutcome {
                        breakdown: LossBreakdown {
                            xe: 0.0,
                            mse: 0.0,
                            mc: 0.0,
                            total: value,
                            masked_slot: 0,
                            sampled_t: 0,
                            clamped: false,
                        },
                        grads: extract_grads(&tape, &grads, &ids),
                    })
                })
                .collect();
            let outcomes = outcomes?;
            let mean = mean_grads(&outcomes, &shapes);
            {
                let mut params = denoiser.params_mut();
                params.extend(activity.params_mut());
                optimizer.apply(&mut params, &mean);
            }
            for o in &outcomes {
                log.rows.push(LogRow {
                    step: optimizer.step,
                    xe: 0.0,
                    mse: 0.0,
                    mc: 0.0,
                    total: o.breakdown.total,
                    t: 0,
                    j: 0,
                });
            }
        }
    }

    if bundle.encoder_checksum() != checksum_before {
        return Err(Error::Integrity("encoder changed during activity fine-tune".into()));
    }
    let mut out = bundle.clone();
    out.denoiser = denoiser;
    out.activity = Some(activity);
    out.provenance.step_count += optimizer.step;
    Ok((out, log))
}

/// Token assembly and readout for activity classification: encoded clips at
/// their slots plus a learned readout token carrying its own position.
pub fn activity_logits(
    tape: &mut Tape,
    den: &DenoiserBinding,
    readout: NodeId,
    head_w: NodeId,
    head_b: NodeId,
    clip_embeddings: &Mat,
) -> NodeId {
    let n = clip_embeddings.rows;
    let clips = tape.constant(clip_embeddings.clone());
    let pos_rows: Vec<NodeId> = (0..n).map(|slot| tape.row(den.pos_embed, slot)).collect();
    let pos = tape.concat_rows(&pos_rows);
    let placed = tape.add(clips, pos);
    let tokens = tape.concat_rows(&[placed, readout]);
    let hidden = den.transformer(tape, tokens);
    let h = tape.row(hidden, n);
    let logits = tape.matmul_nt(h, head_w);
    tape.add(logits, head_b)
}

/// Predict an activity label for one sequence of clip embeddings.
pub fn activity_predict(bundle: &ModelBundle, clip_embeddings: &Mat) -> Result<usize> {
    let activity = bundle
        .activity
        .as_ref()
        .ok_or_else(|| Error::invalid_input("bundle has no activity readout"))?;
    let mut tape = Tape::new();
    let den = DenoiserBinding::bind_frozen(&mut tape, &bundle.denoiser);
    let readout = tape.constant((*activity.readout_token).clone());
    let w = tape.constant((*activity.head.weight).clone());
    let b = tape.constant((*activity.head.bias).clone());
    let logits = activity_logits(&mut tape, &den, readout, w, b, clip_embeddings);
    Ok(crate::math::argmax(&tape.value(logits).data))
}
