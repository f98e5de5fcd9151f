//! The model bundle: every trained component plus provenance, the unit that
//! checkpoints serialize and evaluation consumes.

use std::sync::Arc;

use crate::denoiser::{DenoiserConfig, DenoiserParams};
use crate::diffusion::NoiseSchedule;
use crate::encoder::{Activation, ClassifierHead, EncoderParams};
use crate::error::{Error, Result};
use crate::hash::params_checksum;
use crate::mat::Mat;
use crate::objective::ObjectiveMode;

/// Model shape and matching hyper-parameters, fixed before training.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub observation_dim: usize,
    pub hidden_dim: usize,
    pub activation: Activation,
    pub denoiser: DenoiserConfig,
    /// Matching-softmax temperature.
    pub tau: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embedding_dim: 64,
            observation_dim: 128,
            hidden_dim: 128,
            activation: Activation::Tanh,
            denoiser: DenoiserConfig::default(),
            tau: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.embedding_dim < 2 {
            problems.push("embedding_dim must be >= 2".into());
        }
        if self.hidden_dim < 1 {
            problems.push("hidden_dim must be >= 1".into());
        }
        if self.observation_dim < self.embedding_dim {
            problems.push("observation_dim must be >= embedding_dim".into());
        }
        if self.denoiser.dim != self.embedding_dim {
            problems.push("denoiser dim must equal embedding_dim".into());
        }
        if self.denoiser.heads == 0 || self.denoiser.dim % self.denoiser.heads != 0 {
            problems.push("denoiser heads must divide dim".into());
        }
        if self.denoiser.layers == 0 || self.denoiser.ff_mult == 0 {
            problems.push("denoiser layers and ff_mult must be positive".into());
        }
        if self.denoiser.t_max < 1 {
            problems.push("schedule needs t_max >= 1".into());
        }
        if self.tau <= 0.0 {
            problems.push("tau must be > 0".into());
        }
        problems
    }
}

/// Activity-classification additions: a learned readout token appended to
/// the sequence plus a linear readout over its hidden state.
#[derive(Debug, Clone)]
pub struct ActivityHead {
    pub readout_token: Arc<Mat>,
    pub head: ClassifierHead,
}

impl ActivityHead {
    pub fn zeros(tasks: usize, dim: usize, readout_init: Mat) -> Self {
        ActivityHead {
            readout_token: Arc::new(readout_init),
            head: ClassifierHead::zeros(tasks, dim),
        }
    }

    pub fn named(&self) -> Vec<(String, Arc<Mat>)> {
        let mut out = vec![("activity.readout_token".to_string(), self.readout_token.clone())];
        out.extend(self.head.named("activity"));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Arc<Mat>> {
        let mut out = vec![&mut self.readout_token];
        out.extend(self.head.params_mut());
        out
    }
}

/// Where a bundle came from: enough to reconstruct the experiment DAG.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Provenance {
    pub config_hash: String,
    pub corpus_hash: String,
    pub step_count: u64,
    /// Pre-training regime: "matching", "mask", or "diffusion".
    pub mode: String,
}

pub fn mode_name(mode: ObjectiveMode) -> &'static str {
    match mode {
        ObjectiveMode::Matching => "matching",
        ObjectiveMode::Mask => "mask",
        ObjectiveMode::Diffusion => "diffusion",
    }
}

pub fn parse_mode(s: &str) -> Result<ObjectiveMode> {
    match s {
        "matching" => Ok(ObjectiveMode::Matching),
        "mask" => Ok(ObjectiveMode::Mask),
        "diffusion" => Ok(ObjectiveMode::Diffusion),
        other => Err(Error::invalid_config(format!("unknown pretrain mode {other:?}"))),
    }
}

/// Everything a trained model carries.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub model: ModelConfig,
    pub encoder: EncoderParams,
    pub denoiser: DenoiserParams,
    pub schedule: NoiseSchedule,
    /// Hash of the phrase table this model was trained against.
    pub table_hash: String,
    pub probe: Option<ClassifierHead>,
    pub forecast_head: Option<ClassifierHead>,
    pub activity: Option<ActivityHead>,
    pub provenance: Provenance,
}

impl ModelBundle {
    /// Checksum of the encoder parameters (the frozen component in every
    /// fine-tuning protocol).
    pub fn encoder_checksum(&self) -> String {
        params_checksum(&self.encoder.named())
    }

    pub fn denoiser_checksum(&self) -> String {
        params_checksum(&self.denoiser.named())
    }

    /// Checksum over every component present, in canonical order.
    pub fn full_checksum(&self) -> String {
        params_checksum(&self.all_named())
    }

    pub fn all_named(&self) -> Vec<(String, Arc<Mat>)> {
        let mut out = self.encoder.named();
        out.extend(self.denoiser.named());
        if let Some(p) = &self.probe {
            out.extend(p.named("probe"));
        }
        if let Some(f) = &self.forecast_head {
            out.extend(f.named("forecast"));
        }
        if let Some(a) = &self.activity {
            out.extend(a.named());
        }
        out
    }
}
