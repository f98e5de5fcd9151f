//! Checkpoint persistence: a JSON header describing shapes and provenance,
//! followed by the raw parameter payload as 64-bit little-endian reals in
//! header-declared order. Nothing framework-specific, bit-exact round trips,
//! and a payload hash so corruption is caught before use.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bundle::{ActivityHead, ModelBundle, ModelConfig, Provenance};
use crate::denoiser::{DenoiserConfig, DenoiserParams};
use crate::diffusion::make_schedule;
use crate::encoder::{Activation, ClassifierHead, EncoderParams};
use crate::error::{Error, Result};
use crate::hash::sha256_hex;
use crate::mat::Mat;
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::derive_rng;

const MAGIC: &[u8; 4] = b"PDCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArraySpec {
    name: String,
    rows: usize,
    cols: usize,
    /// Offset into the payload, in f64 elements.
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OptimizerHeader {
    kind: String,
    learning_rate: f64,
    weight_decay: f64,
    step: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config_hash: String,
    corpus_hash: String,
    table_hash: String,
    mode: String,
    step_count: u64,
    embedding_dim: usize,
    observation_dim: usize,
    hidden_dim: usize,
    activation: String,
    denoiser_layers: usize,
    denoiser_heads: usize,
    denoiser_ff_mult: usize,
    t_max: usize,
    tau: f64,
    /// Recorded for exact replay; must match the rebuilt schedule.
    schedule_alpha_bar: Vec<f64>,
    components: Vec<String>,
    optimizer: Option<OptimizerHeader>,
    arrays: Vec<ArraySpec>,
    payload_sha256: String,
}

/// Serialize a bundle (and optionally optimizer state) to bytes.
pub fn checkpoint_bytes(bundle: &ModelBundle, optimizer: Option<&Optimizer>) -> Vec<u8> {
    let mut named = bundle.all_named();
    if let Some(opt) = optimizer {
        for (i, m) in opt.first_moment.iter().enumerate() {
            named.push((format!("opt.m.{i}"), Arc::new(m.clone())));
        }
        for (i, v) in opt.second_moment.iter().enumerate() {
            named.push((format!("opt.v.{i}"), Arc::new(v.clone())));
        }
    }

    let mut payload: Vec<u8> = Vec::new();
    let mut arrays = Vec::with_capacity(named.len());
    let mut offset = 0usize;
    for (name, mat) in &named {
        arrays.push(ArraySpec { name: name.clone(), rows: mat.rows, cols: mat.cols, offset });
        for v in &mat.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        offset += mat.len();
    }

    let mut components = Vec::new();
    if bundle.probe.is_some() {
        components.push("probe".to_string());
    }
    if bundle.forecast_head.is_some() {
        components.push("forecast".to_string());
    }
    if bundle.activity.is_some() {
        components.push("activity".to_string());
    }

    let header = Header {
        format_version: FORMAT_VERSION,
        config_hash: bundle.provenance.config_hash.clone(),
        corpus_hash: bundle.provenance.corpus_hash.clone(),
        table_hash: bundle.table_hash.clone(),
        mode: bundle.provenance.mode.clone(),
        step_count: bundle.provenance.step_count,
        embedding_dim: bundle.model.embedding_dim,
        observation_dim: bundle.model.observation_dim,
        hidden_dim: bundle.model.hidden_dim,
        activation: bundle.model.activation.as_str().to_string(),
        denoiser_layers: bundle.model.denoiser.layers,
        denoiser_heads: bundle.model.denoiser.heads,
        denoiser_ff_mult: bundle.model.denoiser.ff_mult,
        t_max: bundle.model.denoiser.t_max,
        tau: bundle.model.tau,
        schedule_alpha_bar: bundle.schedule.alpha_bar.clone(),
        components,
        optimizer: optimizer.map(|o| OptimizerHeader {
            kind: o.kind.as_str().to_string(),
            learning_rate: o.learning_rate,
            weight_decay: o.weight_decay,
            step: o.step,
        }),
        arrays,
        payload_sha256: sha256_hex(&payload),
    };

    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(4 + 4 + header_json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload);
    out
}

pub fn save_checkpoint(
    path: &Path,
    bundle: &ModelBundle,
    optimizer: Option<&Optimizer>,
) -> Result<()> {
    let bytes = checkpoint_bytes(bundle, optimizer);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// A loaded checkpoint: the bundle plus any optimizer state it carried.
#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub bundle: ModelBundle,
    pub optimizer: Option<Optimizer>,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    checkpoint_from_bytes(&bytes)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<LoadedCheckpoint> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Integrity("not a checkpoint file (bad magic)".into()));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + header_len {
        return Err(Error::Integrity("truncated checkpoint header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[8..8 + header_len])
        .map_err(|e| Error::Integrity(format!("unreadable header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Integrity(format!(
            "unsupported checkpoint version {}",
            header.format_version
        )));
    }
    let payload = &bytes[8 + header_len..];
    let digest = sha256_hex(payload);
    if digest != header.payload_sha256 {
        return Err(Error::Integrity(format!(
            "payload checksum mismatch: stored {} computed {digest}",
            header.payload_sha256
        )));
    }

    let mut arrays: std::collections::HashMap<String, Mat> = std::collections::HashMap::new();
    for spec in &header.arrays {
        let len = spec.rows * spec.cols;
        let start = spec.offset * 8;
        let end = start + len * 8;
        if end > payload.len() {
            return Err(Error::Integrity(format!("array {} exceeds payload", spec.name)));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        arrays.insert(spec.name.clone(), Mat::from_vec(spec.rows, spec.cols, data));
    }

    let take = |name: &str, arrays: &mut std::collections::HashMap<String, Mat>| -> Result<Arc<Mat>> {
        arrays
            .remove(name)
            .map(Arc::new)
            .ok_or_else(|| Error::Integrity(format!("checkpoint missing array {name}")))
    };

    let activation = Activation::parse(&header.activation)?;
    let model = ModelConfig {
        embedding_dim: header.embedding_dim,
        observation_dim: header.observation_dim,
        hidden_dim: header.hidden_dim,
        activation,
        denoiser: DenoiserConfig {
            dim: header.embedding_dim,
            layers: header.denoiser_layers,
            heads: header.denoiser_heads,
            ff_mult: header.denoiser_ff_mult,
            t_max: header.t_max,
        },
        tau: header.tau,
    };
    let problems = model.validate();
    if !problems.is_empty() {
        return Err(Error::Integrity(format!("invalid model shape: {}", problems.join("; "))));
    }

    let mut encoder = EncoderParams::init(
        model.observation_dim,
        model.hidden_dim,
        model.embedding_dim,
        activation,
        &mut derive_rng(0, &[0]),
    );
    let mut denoiser = DenoiserParams::init(model.denoiser, &mut derive_rng(0, &[1]));
    fill_params(&mut encoder.params_mut(), &encoder_names(), &mut arrays)?;
    let denoiser_names: Vec<String> = denoiser.named().iter().map(|(n, _)| n.clone()).collect();
    fill_params(&mut denoiser.params_mut(), &denoiser_names, &mut arrays)?;

    let schedule = make_schedule(header.t_max)?;
    if schedule.alpha_bar != header.schedule_alpha_bar {
        return Err(Error::Integrity("schedule in header does not match rebuilt schedule".into()));
    }

    let probe = if header.components.iter().any(|c| c == "probe") {
        Some(load_head("probe", &mut arrays)?)
    } else {
        None
    };
    let forecast_head = if header.components.iter().any(|c| c == "forecast") {
        Some(load_head("forecast", &mut arrays)?)
    } else {
        None
    };
    let activity = if header.components.iter().any(|c| c == "activity") {
        let readout = take("activity.readout_token", &mut arrays)?;
        let head = load_head("activity", &mut arrays)?;
        Some(ActivityHead { readout_token: readout, head })
    } else {
        None
    };

    let optimizer = match &header.optimizer {
        Some(oh) => {
            let kind = OptimizerKind::parse(&oh.kind)?;
            let mut first = Vec::new();
            let mut second = Vec::new();
            for i in 0.. {
                let (m, v) =
                    (arrays.remove(&format!("opt.m.{i}")), arrays.remove(&format!("opt.v.{i}")));
                match (m, v) {
                    (Some(m), Some(v)) => {
                        first.push(m);
                        second.push(v);
                    }
                    (None, None) => break,
                    _ => return Err(Error::Integrity("optimizer arrays incomplete".into())),
                }
            }
            let mut opt = Optimizer::new(kind, oh.learning_rate, oh.weight_decay, &[]);
            opt.step = oh.step;
            opt.first_moment = first;
            opt.second_moment = second;
            Some(opt)
        }
        None => None,
    };

    let bundle = ModelBundle {
        model,
        encoder,
        denoiser,
        schedule,
        table_hash: header.table_hash,
        probe,
        forecast_head,
        activity,
        provenance: Provenance {
            config_hash: header.config_hash,
            corpus_hash: header.corpus_hash,
            step_count: header.step_count,
            mode: header.mode,
        },
    };
    Ok(LoadedCheckpoint { bundle, optimizer })
}

fn encoder_names() -> Vec<String> {
    ["encoder.w1", "encoder.b1", "encoder.w2", "encoder.b2"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

fn fill_params(
    slots: &mut [&mut Arc<Mat>],
    names: &[String],
    arrays: &mut std::collections::HashMap<String, Mat>,
) -> Result<()> {
    for (slot, name) in slots.iter_mut().zip(names) {
        let mat = arrays
            .remove(name)
            .ok_or_else(|| Error::Integrity(format!("checkpoint missing array {name}")))?;
        if (mat.rows, mat.cols) != (slot.rows, slot.cols) {
            return Err(Error::Integrity(format!(
                "array {name} has shape ({}, {}), expected ({}, {})",
                mat.rows, mat.cols, slot.rows, slot.cols
            )));
        }
        **slot = Arc::new(mat);
    }
    Ok(())
}

fn load_head(
    prefix: &str,
    arrays: &mut std::collections::HashMap<String, Mat>,
) -> Result<ClassifierHead> {
    let weight = arrays
        .remove(&format!("{prefix}.weight"))
        .ok_or_else(|| Error::Integrity(format!("checkpoint missing {prefix}.weight")))?;
    let bias = arrays
        .remove(&format!("{prefix}.bias"))
        .ok_or_else(|| Error::Integrity(format!("checkpoint missing {prefix}.bias")))?;
    Ok(ClassifierHead { weight: Arc::new(weight), bias: Arc::new(bias) })
}
