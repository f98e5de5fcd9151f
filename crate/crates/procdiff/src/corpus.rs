//! Synthetic procedural-activity corpora.
//!
//! A [`PhraseTable`] stands in for a fixed text encoder over a pool of verb
//! phrases: `K` unit-norm embeddings plus a fixed orthonormal lift into
//! observation space. Clip observations are lifted phrase embeddings plus
//! Gaussian noise, and soft targets come from projecting an observation back
//! and taking a temperature softmax over cosines — so ground truth is known
//! everywhere and every pseudo-label can be checked against an oracle.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::{sample_step_sequence, TaskGrammar};
use crate::mat::Mat;
use crate::math::{cosine, l2_normalize, softmax};
use crate::rng::{derive_rng, SeedRng};
use crate::types::{ClipObservation, ClipSequence, CorpusRecord, SoftTarget, Split, StepPhrase};

const VERBS: [&str; 12] = [
    "stir", "whisk", "chop", "pour", "heat", "rinse", "slice", "grate", "melt", "knead",
    "season", "drain",
];
const NOUNS: [&str; 12] = [
    "eggs", "butter", "flour", "water", "onions", "cheese", "dough", "milk", "garlic", "sauce",
    "pasta", "beans",
];

/// The fixed pool of step phrases with unit-norm embeddings and the lift
/// matrix mapping embedding space into observation space.
#[derive(Debug, Clone, PartialEq)]
pub struct PhraseTable {
    pub phrases: Vec<StepPhrase>,
    /// `(K, D)`, unit-norm rows.
    pub embeddings: Mat,
    /// `(D_obs, D)`, orthonormal columns.
    pub lift: Mat,
}

impl PhraseTable {
    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    pub fn embedding_dim(&self) -> usize {
        self.embeddings.cols
    }

    pub fn observation_dim(&self) -> usize {
        self.lift.rows
    }

    pub fn embedding(&self, id: usize) -> Result<&[f64]> {
        if id >= self.len() {
            return Err(Error::invalid_input(format!("phrase id {id} outside table")));
        }
        Ok(self.embeddings.row(id))
    }
}

/// Everything needed to generate one corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub phrase_count: usize,
    pub embedding_dim: usize,
    pub observation_dim: usize,
    pub grammars: Vec<TaskGrammar>,
    pub sequences_per_grammar: usize,
    pub obs_noise_sigma: f64,
    /// Softmax temperature of the pseudo-label generator (softer than the
    /// model temperature so targets keep mass on near neighbours).
    pub label_temperature: f64,
    pub seed: u64,
}

impl CorpusConfig {
    /// Collect every violation rather than stopping at the first.
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.phrase_count < 1 {
            problems.push("phrase_count must be >= 1".into());
        }
        if self.phrase_count > VERBS.len() * NOUNS.len() {
            problems.push(format!(
                "phrase_count {} exceeds the {} distinct verb-noun texts",
                self.phrase_count,
                VERBS.len() * NOUNS.len()
            ));
        }
        if self.embedding_dim < 2 {
            problems.push("embedding_dim must be >= 2".into());
        }
        if self.observation_dim < self.embedding_dim {
            problems.push(format!(
                "observation_dim {} < embedding_dim {}",
                self.observation_dim, self.embedding_dim
            ));
        }
        if self.grammars.is_empty() {
            problems.push("at least one grammar required".into());
        }
        if self.sequences_per_grammar == 0 {
            problems.push("sequences_per_grammar must be positive".into());
        }
        if self.obs_noise_sigma < 0.0 {
            problems.push("obs_noise_sigma must be >= 0".into());
        }
        if self.label_temperature <= 0.0 {
            problems.push("label_temperature must be > 0".into());
        }
        for g in &self.grammars {
            problems.extend(g.validate(self.phrase_count));
        }
        problems
    }
}

/// Build a table of `k` isotropic unit-norm phrase embeddings, an orthonormal
/// lift, and auto-generated verb-noun phrase texts.
pub fn build_phrase_table(
    k: usize,
    embedding_dim: usize,
    observation_dim: usize,
    rng: &mut SeedRng,
) -> Result<PhraseTable> {
    if k < 1 {
        return Err(Error::invalid_config("phrase_count must be >= 1"));
    }
    if k > VERBS.len() * NOUNS.len() {
        return Err(Error::invalid_config(format!(
            "phrase_count {k} exceeds the {} distinct verb-noun texts",
            VERBS.len() * NOUNS.len()
        )));
    }
    if embedding_dim < 2 {
        return Err(Error::invalid_config("embedding_dim must be >= 2"));
    }
    if observation_dim < embedding_dim {
        return Err(Error::invalid_config(format!(
            "observation_dim {observation_dim} < embedding_dim {embedding_dim}"
        )));
    }

    let mut embeddings = Mat::zeros(k, embedding_dim);
    for row in 0..k {
        let raw: Vec<f64> = (0..embedding_dim)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let unit = l2_normalize(&raw)?;
        embeddings.row_mut(row).copy_from_slice(&unit);
    }

    let lift = orthonormal_columns(observation_dim, embedding_dim, rng);

    let phrases = (0..k)
        .map(|id| StepPhrase {
            id,
            text: format!("{} {}", VERBS[id % VERBS.len()], NOUNS[id / VERBS.len()]),
        })
        .collect();

    Ok(PhraseTable { phrases, embeddings, lift })
}

/// Random `(rows, cols)` matrix with orthonormal columns via modified
/// Gram-Schmidt with one re-orthogonalization pass.
fn orthonormal_columns(rows: usize, cols: usize, rng: &mut SeedRng) -> Mat {
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(cols);
    for _ in 0..cols {
        let mut v: Vec<f64> =
            (0..rows).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        for _ in 0..2 {
            for prev in &columns {
                let proj = crate::mat::dot(&v, prev);
                for (x, p) in v.iter_mut().zip(prev) {
                    *x -= proj * p;
                }
            }
        }
        let unit = l2_normalize(&v).expect("random column is nonzero");
        columns.push(unit);
    }
    let mut out = Mat::zeros(rows, cols);
    for r in 0..rows {
        for (c, col) in columns.iter().enumerate() {
            out.row_mut(r)[c] = col[r];
        }
    }
    out
}

/// Lift a phrase embedding into observation space and add isotropic noise:
/// `raw = lift . y + sigma . eps`. The caller assigns the time index.
pub fn synthesize_observation(
    step_id: usize,
    table: &PhraseTable,
    sigma: f64,
    rng: &mut SeedRng,
) -> Result<ClipObservation> {
    let y = table.embedding(step_id)?;
    let d_obs = table.observation_dim();
    let mut raw = vec![0.0; d_obs];
    for r in 0..d_obs {
        raw[r] = crate::mat::dot(table.lift.row(r), y);
    }
    if sigma > 0.0 {
        for v in raw.iter_mut() {
            *v += sigma * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }
    Ok(ClipObservation { raw, time_index: 0 })
}

/// Project an observation back through the lift's transpose, score every
/// phrase by cosine, and softmax at `label_temperature`. Returns the target
/// and a flag marking the degenerate all-zero-projection case (which falls
/// back to the uniform distribution).
pub fn make_soft_targets(
    obs: &ClipObservation,
    table: &PhraseTable,
    label_temperature: f64,
) -> Result<(SoftTarget, bool)> {
    if label_temperature <= 0.0 {
        return Err(Error::invalid_config("label_temperature must be > 0"));
    }
    let d = table.embedding_dim();
    // lift has orthonormal columns, so the transpose is the pseudo-inverse
    let mut projected = vec![0.0; d];
    for (r, &x) in obs.raw.iter().enumerate() {
        for (c, p) in projected.iter_mut().enumerate() {
            *p += table.lift.row(r)[c] * x;
        }
    }
    if projected.iter().all(|&v| v == 0.0) {
        return Ok((SoftTarget::uniform(table.len()), true));
    }
    let scores: Vec<f64> = (0..table.len())
        .map(|k| cosine(&projected, table.embeddings.row(k)).map(|c| c / label_temperature))
        .collect::<Result<_>>()?;
    Ok((SoftTarget { weights: softmax(&scores) }, false))
}

/// Generate the full corpus: for every grammar, `sequences_per_grammar`
/// sequences with observations, true phrase ids, and soft targets, split
/// 80/10/10 deterministically by sequence index.
pub fn generate_corpus(config: &CorpusConfig) -> Result<(Vec<CorpusRecord>, PhraseTable)> {
    let problems = config.validate();
    if !problems.is_empty() {
        return Err(Error::InvalidConfig(problems));
    }
    let mut table_rng = derive_rng(config.seed, &[0]);
    let table = build_phrase_table(
        config.phrase_count,
        config.embedding_dim,
        config.observation_dim,
        &mut table_rng,
    )?;

    let total = config.grammars.len() * config.sequences_per_grammar;
    let records: Result<Vec<CorpusRecord>> = (0..total)
        .into_par_iter()
        .map(|index| {
            let grammar = &config.grammars[index / config.sequences_per_grammar];
            let mut rng = derive_rng(config.seed, &[1, index as u64]);
            let steps = sample_step_sequence(grammar, config.phrase_count, &mut rng);
            let mut clips = Vec::with_capacity(steps.len());
            let mut soft_targets = Vec::with_capacity(steps.len());
            for (t, &step) in steps.iter().enumerate() {
                let mut obs =
                    synthesize_observation(step, &table, config.obs_noise_sigma, &mut rng)?;
                obs.time_index = t;
                let (target, _) = make_soft_targets(&obs, &table, config.label_temperature)?;
                clips.push(obs);
                soft_targets.push(target);
            }
            let sequence = ClipSequence::new(grammar.task_id, clips, steps, soft_targets)?;
            Ok(CorpusRecord { split: split_for_index(index), sequence })
        })
        .collect();

    Ok((records?, table))
}

/// Deterministic 80/10/10 assignment by sequence index.
pub fn split_for_index(index: usize) -> Split {
    match index % 10 {
        8 => Split::Val,
        9 => Split::Test,
        _ => Split::Train,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::sub_rng;

    fn toy_grammars() -> Vec<TaskGrammar> {
        vec![
            TaskGrammar {
                task_id: 0,
                orderings: vec![(vec![0, 1, 2], 1.0)],
                swap_rate: 0.0,
                drop_rate: 0.0,
                distractor_rate: 0.0,
            },
            TaskGrammar {
                task_id: 1,
                orderings: vec![(vec![3, 4, 5], 1.0)],
                swap_rate: 0.0,
                drop_rate: 0.0,
                distractor_rate: 0.0,
            },
            TaskGrammar {
                task_id: 2,
                orderings: vec![(vec![6, 7], 1.0)],
                swap_rate: 0.0,
                drop_rate: 0.0,
                distractor_rate: 0.0,
            },
        ]
    }

    fn toy_config() -> CorpusConfig {
        CorpusConfig {
            phrase_count: 8,
            embedding_dim: 16,
            observation_dim: 24,
            grammars: toy_grammars(),
            sequences_per_grammar: 100,
            obs_noise_sigma: 0.0,
            label_temperature: 0.05,
            seed: 11,
        }
    }

    #[test]
    fn single_phrase_table() {
        let t = build_phrase_table(1, 4, 6, &mut sub_rng(1, 0)).unwrap();
        assert_eq!(t.len(), 1);
        let n = crate::mat::norm(t.embeddings.row(0));
        assert!((n - 1.0).abs() < 1e-9);
    }

    #[test]
    fn table_is_deterministic() {
        let a = build_phrase_table(8, 16, 24, &mut sub_rng(3, 0)).unwrap();
        let b = build_phrase_table(8, 16, 24, &mut sub_rng(3, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lift_columns_are_orthonormal() {
        let t = build_phrase_table(4, 8, 20, &mut sub_rng(4, 0)).unwrap();
        let gram = t.lift.matmul_tn(&t.lift);
        for i in 0..8 {
            for j in 0..8 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((gram.at(i, j) - expected).abs() < 1e-12, "gram[{i}][{j}]");
            }
        }
    }

    #[test]
    fn phrase_texts_are_unique_verb_noun_pairs() {
        let t = build_phrase_table(30, 8, 8, &mut sub_rng(5, 0)).unwrap();
        let mut texts: Vec<&str> = t.phrases.iter().map(|p| p.text.as_str()).collect();
        texts.sort_unstable();
        texts.dedup();
        assert_eq!(texts.len(), 30);
        assert!(t.phrases[0].text.split_whitespace().count() == 2);
    }

    #[test]
    fn rejects_bad_dims() {
        assert!(build_phrase_table(0, 8, 8, &mut sub_rng(6, 0)).is_err());
        assert!(build_phrase_table(4, 8, 4, &mut sub_rng(6, 0)).is_err());
        assert!(build_phrase_table(145, 8, 8, &mut sub_rng(6, 0)).is_err());
    }

    #[test]
    fn random_tables_are_well_separated() {
        // Monte Carlo over seeds: max pairwise |cosine| < 0.7 should hold in
        // at least 99% of draws at K=32, D=64 (it holds in all of them here).
        for seed in 0..150 {
            let t = build_phrase_table(32, 64, 64, &mut sub_rng(7, seed)).unwrap();
            let mut max_abs: f64 = 0.0;
            for i in 0..32 {
                for j in (i + 1)..32 {
                    let c = cosine(t.embeddings.row(i), t.embeddings.row(j)).unwrap();
                    max_abs = max_abs.max(c.abs());
                }
            }
            assert!(max_abs < 0.7, "seed {seed}: max |cos| = {max_abs}");
        }
    }

    #[test]
    fn noiseless_observation_is_exact_lift() {
        let t = build_phrase_table(4, 8, 12, &mut sub_rng(8, 0)).unwrap();
        let obs = synthesize_observation(2, &t, 0.0, &mut sub_rng(8, 1)).unwrap();
        for r in 0..12 {
            let expected = crate::mat::dot(t.lift.row(r), t.embeddings.row(2));
            assert_eq!(obs.raw[r], expected);
        }
        assert!(synthesize_observation(9, &t, 0.0, &mut sub_rng(8, 2)).is_err());
    }

    #[test]
    fn orthonormal_lift_preserves_angles() {
        let t = build_phrase_table(2, 6, 10, &mut sub_rng(9, 0)).unwrap();
        let a = synthesize_observation(0, &t, 0.0, &mut sub_rng(9, 1)).unwrap();
        let b = synthesize_observation(1, &t, 0.0, &mut sub_rng(9, 2)).unwrap();
        let raw_cos = cosine(&a.raw, &b.raw).unwrap();
        let emb_cos = cosine(t.embeddings.row(0), t.embeddings.row(1)).unwrap();
        assert!((raw_cos - emb_cos).abs() < 1e-9);
    }

    #[test]
    fn noisy_observation_mean_matches_clt_bound() {
        let t = build_phrase_table(2, 4, 6, &mut sub_rng(10, 0)).unwrap();
        let clean = synthesize_observation(0, &t, 0.0, &mut sub_rng(10, 1)).unwrap();
        let n = 100_000;
        let sigma = 0.1;
        let mut sums = vec![0.0; 6];
        let mut rng = sub_rng(10, 2);
        for _ in 0..n {
            let obs = synthesize_observation(0, &t, sigma, &mut rng).unwrap();
            for (s, v) in sums.iter_mut().zip(&obs.raw) {
                *s += v;
            }
        }
        let bound = 3.0 * sigma / (n as f64).sqrt();
        for (c, (&s, &clean_v)) in sums.iter().zip(&clean.raw).enumerate() {
            let mean = s / n as f64;
            assert!((mean - clean_v).abs() < bound, "coordinate {c}");
        }
    }

    #[test]
    fn soft_target_of_clean_observation_is_nearly_one_hot() {
        let t = build_phrase_table(24, 64, 64, &mut sub_rng(11, 0)).unwrap();
        let obs = synthesize_observation(5, &t, 0.0, &mut sub_rng(11, 1)).unwrap();
        let (target, degenerate) = make_soft_targets(&obs, &t, 0.02).unwrap();
        assert!(!degenerate);
        assert!(target.weights[5] >= 1.0 - 1e-6, "weight {}", target.weights[5]);
    }

    #[test]
    fn soft_target_two_phrases_at_cos_point_seven() {
        // hand-built table: other cosine exactly 0.7; softmax gap
        // e^{(1-0.7)/0.02} = e^15 still leaves weight >= 1 - 1e-6
        let mut t = build_phrase_table(2, 4, 4, &mut sub_rng(12, 0)).unwrap();
        t.embeddings = Mat::from_vec(
            2,
            4,
            vec![1.0, 0.0, 0.0, 0.0, 0.7, (1.0f64 - 0.49).sqrt(), 0.0, 0.0],
        );
        t.lift = Mat::from_vec(4, 4, {
            let mut id = vec![0.0; 16];
            for i in 0..4 {
                id[i * 4 + i] = 1.0;
            }
            id
        });
        let obs = synthesize_observation(0, &t, 0.0, &mut sub_rng(12, 1)).unwrap();
        let (target, _) = make_soft_targets(&obs, &t, 0.02).unwrap();
        assert!(target.weights[0] >= 1.0 - 1e-6);
    }

    #[test]
    fn infinite_temperature_gives_uniform() {
        let t = build_phrase_table(8, 16, 16, &mut sub_rng(13, 0)).unwrap();
        let obs = synthesize_observation(3, &t, 0.0, &mut sub_rng(13, 1)).unwrap();
        let (target, _) = make_soft_targets(&obs, &t, 1e6).unwrap();
        for &w in &target.weights {
            assert!((w - 1.0 / 8.0).abs() < 1e-6);
        }
    }

    #[test]
    fn hand_computed_binary_softmax() {
        // cosines (1, 0) at temperature 1 -> (0.7311, 0.2689)
        let mut t = build_phrase_table(2, 4, 4, &mut sub_rng(14, 0)).unwrap();
        t.embeddings =
            Mat::from_vec(2, 4, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        t.lift = Mat::from_vec(4, 4, {
            let mut id = vec![0.0; 16];
            for i in 0..4 {
                id[i * 4 + i] = 1.0;
            }
            id
        });
        let obs = synthesize_observation(0, &t, 0.0, &mut sub_rng(14, 1)).unwrap();
        let (target, _) = make_soft_targets(&obs, &t, 1.0).unwrap();
        assert!((target.weights[0] - 0.7311).abs() < 1e-4);
        assert!((target.weights[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn zero_observation_falls_back_to_uniform_with_flag() {
        let t = build_phrase_table(4, 8, 8, &mut sub_rng(15, 0)).unwrap();
        let obs = ClipObservation { raw: vec![0.0; 8], time_index: 0 };
        let (target, degenerate) = make_soft_targets(&obs, &t, 0.05).unwrap();
        assert!(degenerate);
        assert_eq!(target.weights, vec![0.25; 4]);
    }

    #[test]
    fn corpus_split_sizes_are_exact() {
        let (records, _) = generate_corpus(&toy_config()).unwrap();
        assert_eq!(records.len(), 300);
        let count = |s: Split| records.iter().filter(|r| r.split == s).count();
        assert_eq!(count(Split::Train), 240);
        assert_eq!(count(Split::Val), 30);
        assert_eq!(count(Split::Test), 30);
    }

    #[test]
    fn corpus_is_deterministic() {
        let (a, ta) = generate_corpus(&toy_config()).unwrap();
        let (b, tb) = generate_corpus(&toy_config()).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(a, b);
    }

    #[test]
    fn clean_corpus_soft_targets_argmax_truth() {
        let (records, _) = generate_corpus(&toy_config()).unwrap();
        for r in &records {
            for (target, &id) in r.sequence.soft_targets.iter().zip(&r.sequence.phrase_ids) {
                assert_eq!(target.argmax(), id);
            }
        }
    }

    #[test]
    fn invalid_config_lists_all_violations() {
        let mut cfg = toy_config();
        cfg.sequences_per_grammar = 0;
        cfg.label_temperature = 0.0;
        cfg.grammars[0].orderings[0].0.push(99);
        let err = generate_corpus(&cfg).unwrap_err();
        match err {
            Error::InvalidConfig(problems) => {
                assert!(problems.len() >= 3, "got {problems:?}");
            }
            other => panic!("expected InvalidConfig, got {other}"),
        }
    }

    #[test]
    fn soft_targets_are_valid_distributions() {
        let mut cfg = toy_config();
        cfg.obs_noise_sigma = 0.3;
        cfg.sequences_per_grammar = 20;
        let (records, _) = generate_corpus(&cfg).unwrap();
        for r in &records {
            for t in &r.sequence.soft_targets {
                let sum: f64 = t.weights.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
                assert!(t.weights.iter().all(|&w| w >= 0.0));
            }
        }
    }
}
