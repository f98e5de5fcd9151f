//! The experiment configuration document: one JSON file covering corpus
//! synthesis, model shape, and training, schema-validated with unknown keys
//! rejected. Every output embeds the hash of the canonical serialization.

use std::path::Path;

use serde::{Deserialize, Serialize};

use procdiff::bundle::ModelConfig;
use procdiff::corpus::CorpusConfig;
use procdiff::denoiser::DenoiserConfig;
use procdiff::encoder::Activation;
use procdiff::error::{Error, Result};
use procdiff::grammar::TaskGrammar;
use procdiff::objective::ObjectiveMode;
use procdiff::optim::OptimizerKind;
use procdiff::training::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub corpus: CorpusSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    /// Overrides for the probe / forecast / activity protocols; `train`
    /// fills anything unset.
    #[serde(default)]
    pub probe_train: Option<TrainSection>,
    #[serde(default)]
    pub forecast_train: Option<TrainSection>,
    #[serde(default)]
    pub activity_train: Option<TrainSection>,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub phrase_count: usize,
    #[serde(default = "d_embedding_dim")]
    pub embedding_dim: usize,
    #[serde(default = "d_observation_dim")]
    pub observation_dim: usize,
    pub grammars: Vec<TaskGrammar>,
    pub sequences_per_grammar: usize,
    #[serde(default)]
    pub obs_noise_sigma: f64,
    #[serde(default = "d_label_temperature")]
    pub label_temperature: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "d_embedding_dim")]
    pub embedding_dim: usize,
    #[serde(default = "d_observation_dim")]
    pub observation_dim: usize,
    #[serde(default = "d_hidden_dim")]
    pub hidden_dim: usize,
    #[serde(default = "d_activation")]
    pub activation: String,
    #[serde(default = "d_layers")]
    pub layers: usize,
    #[serde(default = "d_heads")]
    pub heads: usize,
    #[serde(default = "d_ff_mult")]
    pub ff_mult: usize,
    #[serde(default = "d_t_max")]
    pub t_max: usize,
    #[serde(default = "d_tau")]
    pub tau: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch_size")]
    pub batch_size: usize,
    #[serde(default = "d_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "d_optimizer")]
    pub optimizer: String,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "d_mode")]
    pub mode: String,
    #[serde(default = "d_true")]
    pub stop_gradient_target: bool,
    #[serde(default = "d_one")]
    pub eval_cadence: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "d_eval_mode")]
    pub mode: String,
    #[serde(default = "d_k")]
    pub k: usize,
    #[serde(default = "d_samples")]
    pub samples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

fn d_embedding_dim() -> usize {
    64
}
fn d_observation_dim() -> usize {
    128
}
fn d_hidden_dim() -> usize {
    128
}
fn d_activation() -> String {
    "tanh".into()
}
fn d_layers() -> usize {
    4
}
fn d_heads() -> usize {
    4
}
fn d_ff_mult() -> usize {
    4
}
fn d_t_max() -> usize {
    4
}
fn d_tau() -> f64 {
    0.02
}
fn d_label_temperature() -> f64 {
    0.05
}
fn d_epochs() -> usize {
    10
}
fn d_batch_size() -> usize {
    32
}
fn d_learning_rate() -> f64 {
    1e-3
}
fn d_optimizer() -> String {
    "adam".into()
}
fn d_mode() -> String {
    "diffusion".into()
}
fn d_true() -> bool {
    true
}
fn d_one() -> usize {
    1
}
fn d_eval_mode() -> String {
    "approximate".into()
}
fn d_k() -> usize {
    5
}
fn d_samples() -> usize {
    32
}

impl ExperimentConfig {
    /// Parse and validate; errors carry the serde line/column.
    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut cfg: ExperimentConfig = serde_json::from_slice(&bytes)
            .map_err(|e| Error::invalid_config(format!("{}: {e}", path.display())))?;
        if let Some(seed) = seed_override {
            cfg.seed = seed;
        }
        let problems = cfg.validate();
        if !problems.is_empty() {
            return Err(Error::InvalidConfig(problems));
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        match self.corpus_config() {
            Ok(c) => problems.extend(c.validate()),
            Err(e) => problems.push(e.to_string()),
        }
        match self.model_config() {
            Ok(m) => problems.extend(m.validate()),
            Err(e) => problems.push(e.to_string()),
        }
        for (name, section) in self.train_sections() {
            match section_to_train(&section, self.seed) {
                Ok(t) => {
                    problems.extend(t.validate().into_iter().map(|p| format!("{name}: {p}")))
                }
                Err(e) => problems.push(format!("{name}: {e}")),
            }
        }
        if !["approximate", "expectation", "oracle"].contains(&self.eval.mode.as_str()) {
            problems.push(format!("eval.mode {:?} unknown", self.eval.mode));
        }
        if self.eval.k == 0 || self.eval.samples == 0 {
            problems.push("eval.k and eval.samples must be positive".into());
        }
        problems
    }

    fn train_sections(&self) -> Vec<(&'static str, TrainSection)> {
        let mut out = vec![("train", self.train.clone())];
        if let Some(s) = &self.probe_train {
            out.push(("probe_train", s.clone()));
        }
        if let Some(s) = &self.forecast_train {
            out.push(("forecast_train", s.clone()));
        }
        if let Some(s) = &self.activity_train {
            out.push(("activity_train", s.clone()));
        }
        out
    }

    /// Hash of the canonical (parsed, re-serialized) config.
    pub fn hash(&self) -> String {
        procdiff::hash::sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn corpus_config(&self) -> Result<CorpusConfig> {
        Ok(CorpusConfig {
            phrase_count: self.corpus.phrase_count,
            embedding_dim: self.corpus.embedding_dim,
            observation_dim: self.corpus.observation_dim,
            grammars: self.corpus.grammars.clone(),
            sequences_per_grammar: self.corpus.sequences_per_grammar,
            obs_noise_sigma: self.corpus.obs_noise_sigma,
            label_temperature: self.corpus.label_temperature,
            seed: self.seed,
        })
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            embedding_dim: self.model.embedding_dim,
            observation_dim: self.model.observation_dim,
            hidden_dim: self.model.hidden_dim,
            activation: Activation::parse(&self.model.activation)?,
            denoiser: DenoiserConfig {
                dim: self.model.embedding_dim,
                layers: self.model.layers,
                heads: self.model.heads,
                ff_mult: self.model.ff_mult,
                t_max: self.model.t_max,
            },
            tau: self.model.tau,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        section_to_train(&self.train, self.seed)
    }

    pub fn probe_config(&self) -> Result<TrainConfig> {
        section_to_train(self.probe_train.as_ref().unwrap_or(&self.train), self.seed)
    }

    pub fn forecast_config(&self) -> Result<TrainConfig> {
        section_to_train(self.forecast_train.as_ref().unwrap_or(&self.train), self.seed)
    }

    pub fn activity_config(&self) -> Result<TrainConfig> {
        section_to_train(self.activity_train.as_ref().unwrap_or(&self.train), self.seed)
    }
}

fn section_to_train(section: &TrainSection, seed: u64) -> Result<TrainConfig> {
    let mode = match section.mode.as_str() {
        "matching" => ObjectiveMode::Matching,
        "mask" => ObjectiveMode::Mask,
        "diffusion" => ObjectiveMode::Diffusion,
        other => {
            return Err(Error::invalid_config(format!("unknown train mode {other:?}")));
        }
    };
    Ok(TrainConfig {
        epochs: section.epochs,
        batch_size: section.batch_size,
        learning_rate: section.learning_rate,
        optimizer: OptimizerKind::parse(&section.optimizer)?,
        weight_decay: section.weight_decay,
        seed,
        mode,
        stop_gradient_target: section.stop_gradient_target,
        eval_cadence: section.eval_cadence,
    })
}
