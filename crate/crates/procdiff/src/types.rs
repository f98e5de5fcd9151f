//! Domain value types shared by the corpus, models, and evaluation.

use crate::error::{Error, Result};

/// Maximum clips per sequence; slot indices run `0..MAX_SEQ_LEN`.
pub const MAX_SEQ_LEN: usize = 9;
/// Minimum clips per sequence.
pub const MIN_SEQ_LEN: usize = 2;

/// A fixed-dimension real vector: clip representations, phrase embeddings,
/// and denoiser predictions all live here.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Vec<f64>,
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid_input("embedding has non-finite entry"));
        }
        Ok(Embedding { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn zeros(dim: usize) -> Self {
        Embedding { values: vec![0.0; dim] }
    }
}

/// One step phrase in the pool, e.g. "stir the egg".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepPhrase {
    pub id: usize,
    pub text: String,
}

/// A distribution over phrase ids: the per-clip soft training target.
/// Stored densely, indexed by phrase id.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTarget {
    pub weights: Vec<f64>,
}

impl SoftTarget {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::invalid_input("soft target has negative or non-finite weight"));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::invalid_input(format!(
                "soft target weights sum to {sum}, expected 1"
            )));
        }
        Ok(SoftTarget { weights })
    }

    pub fn uniform(k: usize) -> Self {
        SoftTarget { weights: vec![1.0 / k as f64; k] }
    }

    pub fn argmax(&self) -> usize {
        crate::math::argmax(&self.weights)
    }
}

/// A synthetic clip observation: the raw per-clip input the encoder consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipObservation {
    pub raw: Vec<f64>,
    pub time_index: usize,
}

/// Train/val/test assignment of a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid_input(format!("unknown split {other:?}"))),
        }
    }
}

/// One training unit: ordered clip observations with their narration phrase
/// ids and per-clip soft targets.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipSequence {
    pub task_id: usize,
    pub clips: Vec<ClipObservation>,
    pub phrase_ids: Vec<usize>,
    pub soft_targets: Vec<SoftTarget>,
}

impl ClipSequence {
    pub fn new(
        task_id: usize,
        clips: Vec<ClipObservation>,
        phrase_ids: Vec<usize>,
        soft_targets: Vec<SoftTarget>,
    ) -> Result<Self> {
        let n = clips.len();
        if phrase_ids.len() != n || soft_targets.len() != n {
            return Err(Error::invalid_input(
                "clips, phrase_ids, soft_targets must have identical length",
            ));
        }
        if !(MIN_SEQ_LEN..=MAX_SEQ_LEN).contains(&n) {
            return Err(Error::invalid_input(format!(
                "sequence length {n} outside {MIN_SEQ_LEN}..={MAX_SEQ_LEN}"
            )));
        }
        for (k, clip) in clips.iter().enumerate() {
            if clip.time_index != k {
                return Err(Error::invalid_input(format!(
                    "clip {k} has time_index {}",
                    clip.time_index
                )));
            }
        }
        Ok(ClipSequence { task_id, clips, phrase_ids, soft_targets })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }
}

/// A sequence together with its deterministic split assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusRecord {
    pub split: Split,
    pub sequence: ClipSequence,
}
