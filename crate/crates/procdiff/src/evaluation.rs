//! Zero-shot and fine-tuned evaluation: step classification, step
//! forecasting under three inference schemes, diversity statistics at
//! branch points, and the BLEU-1 seen/novel split.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::ModelBundle;
use crate::corpus::{synthesize_observation, PhraseTable};
use crate::diffusion::{sample_chain, ChainMode};
use crate::encoder::{encode_clip, encode_rows, match_distribution, ClassifierHead};
use crate::error::{Error, Result};
use crate::grammar::TaskGrammar;
use crate::mat::Mat;
use crate::math::argmax;
use crate::rng::{derive_rng, SeedRng};
use crate::training::{forecast_window, FORECAST_CONTEXT};
use crate::types::{ClipObservation, CorpusRecord, Embedding, SoftTarget, Split};

/// Fraction of exactly-matching predictions.
pub fn top1_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::invalid_input("top1_accuracy needs equal-length non-empty inputs"));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Classify a clip by matching its embedding against the phrase table.
/// Ties break toward the lowest phrase id.
pub fn zero_shot_classify(
    bundle: &ModelBundle,
    table: &PhraseTable,
    clip: &ClipObservation,
) -> Result<usize> {
    let x = encode_clip(&bundle.encoder, clip)?;
    let dist = match_distribution(&x.values, table, bundle.model.tau)?;
    Ok(dist.argmax())
}

/// Classify a clip with the probe head when the bundle carries one,
/// otherwise zero-shot.
pub fn classify_clip(
    bundle: &ModelBundle,
    table: &PhraseTable,
    clip: &ClipObservation,
) -> Result<usize> {
    match &bundle.probe {
        Some(head) => {
            let x = encode_clip(&bundle.encoder, clip)?;
            Ok(argmax(&head_scores(head, &x.values)))
        }
        None => zero_shot_classify(bundle, table, clip),
    }
}

fn head_scores(head: &ClassifierHead, x: &[f64]) -> Vec<f64> {
    let mut scores = head.bias.data.clone();
    for (c, s) in scores.iter_mut().enumerate() {
        *s += crate::mat::dot(head.weight.row(c), x);
    }
    scores
}

/// Encode and place a forecast context. Fine-tuned bundles use the training
/// placement (right-aligned before mask slot 8); zero-shot bundles use the
/// natural prefix placement (slots `0..L`, mask at `L`).
fn place_context(
    bundle: &ModelBundle,
    context: &[ClipObservation],
) -> Result<(Vec<(usize, Embedding)>, usize)> {
    if context.is_empty() {
        return Err(Error::invalid_input("forecast context must not be empty"));
    }
    if context.len() > FORECAST_CONTEXT {
        return Err(Error::invalid_input(format!(
            "forecast context limited to {FORECAST_CONTEXT} clips"
        )));
    }
    let mut obs = Mat::zeros(context.len(), bundle.model.observation_dim);
    for (r, clip) in context.iter().enumerate() {
        if clip.raw.len() != bundle.model.observation_dim {
            return Err(Error::invalid_input("context clip dim does not match encoder"));
        }
        obs.row_mut(r).copy_from_slice(&clip.raw);
    }
    let rows = encode_rows(&bundle.encoder, &obs);
    let (slots, mask_slot) = if bundle.forecast_head.is_some() {
        let (_, slots) = forecast_window(context.len());
        (slots, crate::training::FORECAST_MASK_SLOT)
    } else {
        ((0..context.len()).collect(), context.len())
    };
    let placed = slots
        .into_iter()
        .enumerate()
        .map(|(i, slot)| Ok((slot, Embedding::new(rows.row(i).to_vec())?)))
        .collect::<Result<Vec<_>>>()?;
    Ok((placed, mask_slot))
}

fn classify_prediction(
    bundle: &ModelBundle,
    table: &PhraseTable,
    x0_hat: &Embedding,
) -> Result<usize> {
    match &bundle.forecast_head {
        Some(head) => Ok(argmax(&head_scores(head, &x0_hat.values))),
        None => Ok(match_distribution(&x0_hat.values, table, bundle.model.tau)?.argmax()),
    }
}

fn prediction_distribution(
    bundle: &ModelBundle,
    table: &PhraseTable,
    x0_hat: &Embedding,
) -> Result<Vec<f64>> {
    match &bundle.forecast_head {
        Some(head) => Ok(crate::math::softmax(&head_scores(head, &x0_hat.values))),
        None => Ok(match_distribution(&x0_hat.values, table, bundle.model.tau)?.weights),
    }
}

/// Predict the masked embedding the way the bundle was trained to: the
/// reverse chain for diffusion bundles, the mask token for mask-prediction
/// bundles (which are deterministic and refuse stochastic modes).
fn predict_x0(
    bundle: &ModelBundle,
    placed: &[(usize, Embedding)],
    mask_slot: usize,
    mode: ChainMode,
    rng: &mut SeedRng,
) -> Result<Embedding> {
    if bundle.provenance.mode == "mask" {
        if mode == ChainMode::Stochastic {
            return Err(Error::invalid_input(
                "mask-prediction bundles support approximate inference only",
            ));
        }
        return crate::denoiser::mask_predict(&bundle.denoiser, placed, mask_slot);
    }
    sample_chain(&bundle.denoiser, placed, mask_slot, &bundle.schedule, mode, rng)
}

/// Deterministic forecast: the zero-noise reverse chain, classified.
pub fn forecast_approximate(
    bundle: &ModelBundle,
    table: &PhraseTable,
    context: &[ClipObservation],
) -> Result<usize> {
    let (placed, mask_slot) = place_context(bundle, context)?;
    let mut rng = derive_rng(0, &[]);
    let x0_hat = predict_x0(bundle, &placed, mask_slot, ChainMode::Approximate, &mut rng)?;
    classify_prediction(bundle, table, &x0_hat)
}

/// Monte Carlo forecast: the uniform average of classification
/// distributions over `m` stochastic chains.
pub fn forecast_expectation(
    bundle: &ModelBundle,
    table: &PhraseTable,
    context: &[ClipObservation],
    m: usize,
    rng: &mut SeedRng,
) -> Result<SoftTarget> {
    if m < 1 {
        return Err(Error::invalid_input("expectation needs at least one sample"));
    }
    let (placed, mask_slot) = place_context(bundle, context)?;
    let mut mean = vec![0.0; table.len()];
    for _ in 0..m {
        let x0_hat = predict_x0(bundle, &placed, mask_slot, ChainMode::Stochastic, rng)?;
        let dist = prediction_distribution(bundle, table, &x0_hat)?;
        for (acc, p) in mean.iter_mut().zip(&dist) {
            *acc += p;
        }
    }
    for acc in mean.iter_mut() {
        *acc /= m as f64;
    }
    SoftTarget::new(mean)
}

/// `k` stochastic-chain predictions in draw order; prefixes are nested, so
/// oracle accuracy over the first `k'` entries is monotone in `k'`.
pub fn stochastic_predictions(
    bundle: &ModelBundle,
    table: &PhraseTable,
    context: &[ClipObservation],
    k: usize,
    rng: &mut SeedRng,
) -> Result<Vec<usize>> {
    if k < 1 {
        return Err(Error::invalid_input("need at least one sample"));
    }
    let (placed, mask_slot) = place_context(bundle, context)?;
    (0..k)
        .map(|_| {
            let x0_hat = predict_x0(bundle, &placed, mask_slot, ChainMode::Stochastic, rng)?;
            classify_prediction(bundle, table, &x0_hat)
        })
        .collect()
}

/// Oracle protocol: a hit iff any of `k` sampled predictions is the truth.
pub fn oracle_topk(
    bundle: &ModelBundle,
    table: &PhraseTable,
    context: &[ClipObservation],
    k: usize,
    truth: usize,
    rng: &mut SeedRng,
) -> Result<bool> {
    Ok(stochastic_predictions(bundle, table, context, k, rng)?.contains(&truth))
}

/// A forecast context with grammar ground truth about what may follow.
#[derive(Debug, Clone)]
pub struct BranchContext {
    pub task_id: usize,
    pub clips: Vec<ClipObservation>,
    pub valid_next: Vec<usize>,
}

/// Build evaluation contexts from grammar prefixes: observations are
/// synthesized for every canonical prefix, tagged with the set of valid
/// next steps. Returns `(branching, deterministic)` contexts.
pub fn grammar_prefix_contexts(
    grammars: &[TaskGrammar],
    table: &PhraseTable,
    sigma: f64,
    instances_per_prefix: usize,
    seed: u64,
) -> Result<(Vec<BranchContext>, Vec<BranchContext>)> {
    let mut branching = Vec::new();
    let mut deterministic = Vec::new();
    for grammar in grammars {
        let mut seen: Vec<Vec<usize>> = Vec::new();
        for (ordering, p) in &grammar.orderings {
            if *p <= 0.0 {
                continue;
            }
            for plen in 1..ordering.len().min(FORECAST_CONTEXT + 1) {
                let prefix = ordering[..plen].to_vec();
                if seen.contains(&prefix) {
                    continue;
                }
                seen.push(prefix.clone());
                let valid = grammar.valid_continuations(&prefix);
                if valid.is_empty() {
                    continue;
                }
                for instance in 0..instances_per_prefix {
                    let mut rng = derive_rng(
                        seed,
                        &[80, grammar.task_id as u64, seen.len() as u64, instance as u64],
                    );
                    let mut clips = Vec::with_capacity(prefix.len());
                    for (t, &step) in prefix.iter().enumerate() {
                        let mut obs = synthesize_observation(step, table, sigma, &mut rng)?;
                        obs.time_index = t;
                        clips.push(obs);
                    }
                    let ctx = BranchContext {
                        task_id: grammar.task_id,
                        clips,
                        valid_next: valid.clone(),
                    };
                    if valid.len() >= 2 {
                        branching.push(ctx);
                    } else {
                        deterministic.push(ctx);
                    }
                }
            }
        }
    }
    Ok((branching, deterministic))
}

/// Diversity over branch-point contexts: mean count of distinct predicted
/// phrases in `k` samples, and the fraction of contexts where at least two
/// distinct valid continuations appear.
pub fn diversity_stats(
    bundle: &ModelBundle,
    table: &PhraseTable,
    contexts: &[BranchContext],
    k: usize,
    rng: &mut SeedRng,
) -> Result<(f64, f64)> {
    if contexts.is_empty() {
        return Err(Error::invalid_input("no branching contexts to evaluate"));
    }
    let mut distinct_sum = 0.0;
    let mut covered = 0usize;
    for ctx in contexts {
        let preds = stochastic_predictions(bundle, table, &ctx.clips, k, rng)?;
        let mut unique: Vec<usize> = preds.clone();
        unique.sort_unstable();
        unique.dedup();
        distinct_sum += unique.len() as f64;
        let valid_hits = unique.iter().filter(|p| ctx.valid_next.contains(p)).count();
        if valid_hits >= 2 {
            covered += 1;
        }
    }
    Ok((distinct_sum / contexts.len() as f64, covered as f64 / contexts.len() as f64))
}

/// Mean share of the modal prediction across `k` samples per context.
pub fn modal_share(
    bundle: &ModelBundle,
    table: &PhraseTable,
    contexts: &[BranchContext],
    k: usize,
    rng: &mut SeedRng,
) -> Result<f64> {
    if contexts.is_empty() {
        return Err(Error::invalid_input("no contexts to evaluate"));
    }
    let mut share_sum = 0.0;
    for ctx in contexts {
        let preds = stochastic_predictions(bundle, table, &ctx.clips, k, rng)?;
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for p in &preds {
            *counts.entry(*p).or_default() += 1;
        }
        let modal = counts.values().max().copied().unwrap_or(0);
        share_sum += modal as f64 / k as f64;
    }
    Ok(share_sum / contexts.len() as f64)
}

/// BLEU-1 of a candidate against one reference: clipped unigram precision
/// with the standard brevity penalty. Empty candidates score 0.
pub fn bleu1(candidate: &str, reference: &str) -> f64 {
    let cand: Vec<&str> = candidate.split_whitespace().collect();
    let refs: Vec<&str> = reference.split_whitespace().collect();
    if cand.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let mut ref_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for w in &refs {
        *ref_counts.entry(w).or_default() += 1;
    }
    let mut matched = 0usize;
    let mut cand_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for w in &cand {
        *cand_counts.entry(w).or_default() += 1;
    }
    for (w, c) in &cand_counts {
        matched += (*c).min(ref_counts.get(w).copied().unwrap_or(0));
    }
    let precision = matched as f64 / cand.len() as f64;
    let brevity = if cand.len() < refs.len() {
        (1.0 - refs.len() as f64 / cand.len() as f64).exp()
    } else {
        1.0
    };
    precision * brevity
}

/// Per eval phrase, the max BLEU-1 against any train phrase.
#[derive(Debug, Clone, PartialEq)]
pub struct BleuSplit {
    /// Phrase ids with max BLEU-1 >= threshold.
    pub seen: Vec<usize>,
    /// Phrase ids below the threshold.
    pub novel: Vec<usize>,
    /// Max score per eval phrase, in input order.
    pub scores: Vec<f64>,
}

/// Group eval phrases into seen/novel by max unigram overlap with the train
/// phrases. Deterministic and invariant to train-list order.
pub fn bleu1_split(
    eval_phrases: &[(usize, String)],
    train_phrases: &[String],
    threshold: f64,
) -> BleuSplit {
    let mut split = BleuSplit { seen: Vec::new(), novel: Vec::new(), scores: Vec::new() };
    for (id, text) in eval_phrases {
        let best = train_phrases.iter().map(|t| bleu1(text, t)).fold(0.0f64, f64::max);
        split.scores.push(best);
        if best >= threshold {
            split.seen.push(*id);
        } else {
            split.novel.push(*id);
        }
    }
    split
}

/// Per-category tally.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CategoryStat {
    pub count: usize,
    pub accuracy: f64,
}

/// Split-level evaluation numbers, before wrapping into a report.
#[derive(Debug, Clone, Default)]
pub struct EvalSummary {
    pub top1: f64,
    pub examples: usize,
    pub per_category: BTreeMap<usize, CategoryStat>,
    pub extras: BTreeMap<String, f64>,
}

fn tally(preds_labels: &[(usize, usize)]) -> EvalSummary {
    let mut per: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut hits = 0usize;
    for &(pred, label) in preds_labels {
        let e = per.entry(label).or_default();
        e.0 += 1;
        if pred == label {
            e.1 += 1;
            hits += 1;
        }
    }
    EvalSummary {
        top1: hits as f64 / preds_labels.len() as f64,
        examples: preds_labels.len(),
        per_category: per
            .into_iter()
            .map(|(id, (count, h))| {
                (id, CategoryStat { count, accuracy: h as f64 / count as f64 })
            })
            .collect(),
        extras: BTreeMap::new(),
    }
}

/// Step classification over every clip of a split.
pub fn eval_classification(
    bundle: &ModelBundle,
    table: &PhraseTable,
    corpus: &[CorpusRecord],
    split: Split,
) -> Result<EvalSummary> {
    let clips: Vec<(&ClipObservation, usize)> = corpus
        .iter()
        .filter(|r| r.split == split)
        .flat_map(|r| r.sequence.clips.iter().zip(r.sequence.phrase_ids.iter().copied()))
        .collect();
    if clips.is_empty() {
        return Err(Error::invalid_input("split has no clips"));
    }
    let preds: Result<Vec<(usize, usize)>> = clips
        .par_iter()
        .map(|(clip, label)| Ok((classify_clip(bundle, table, clip)?, *label)))
        .collect();
    let mut summary = tally(&preds?);
    summary.extras.insert("chance".into(), 1.0 / table.len() as f64);
    Ok(summary)
}

/// How forecasts are produced for a split evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ForecastMode {
    Approximate,
    Expectation { samples: usize },
    Oracle { k: usize },
}

impl ForecastMode {
    pub fn name(&self) -> &'static str {
        match self {
            ForecastMode::Approximate => "approximate",
            ForecastMode::Expectation { .. } => "expectation",
            ForecastMode::Oracle { .. } => "oracle",
        }
    }
}

/// One forecast example: the final step of a sequence given its prefix.
pub struct ForecastExample<'a> {
    pub task_id: usize,
    pub context: &'a [ClipObservation],
    pub target: usize,
}

pub fn forecast_examples(corpus: &[CorpusRecord], split: Split) -> Vec<ForecastExample<'_>> {
    corpus
        .iter()
        .filter(|r| r.split == split)
        .map(|r| {
            let n = r.sequence.len();
            let start = n.saturating_sub(1 + FORECAST_CONTEXT).max(0);
            ForecastExample {
                task_id: r.sequence.task_id,
                context: &r.sequence.clips[start..n - 1],
                target: r.sequence.phrase_ids[n - 1],
            }
        })
        .collect()
}

/// Step forecasting over a split: each sequence contributes one example,
/// predicting its final step from the preceding clips.
pub fn eval_forecast(
    bundle: &ModelBundle,
    table: &PhraseTable,
    corpus: &[CorpusRecord],
    split: Split,
    mode: ForecastMode,
    seed: u64,
) -> Result<EvalSummary> {
    let examples = forecast_examples(corpus, split);
    if examples.is_empty() {
        return Err(Error::invalid_input("split has no forecast examples"));
    }
    let preds: Result<Vec<(usize, usize, usize, Option<bool>)>> = examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut rng = derive_rng(seed, &[90, i as u64]);
            let (pred, oracle_hit) = match mode {
                ForecastMode::Approximate => {
                    (forecast_approximate(bundle, table, ex.context)?, None)
                }
                ForecastMode::Expectation { samples } => (
                    forecast_expectation(bundle, table, ex.context, samples, &mut rng)?.argmax(),
                    None,
                ),
                ForecastMode::Oracle { k } => {
                    let samples = stochastic_predictions(bundle, table, ex.context, k, &mut rng)?;
                    (samples[0], Some(samples.contains(&ex.target)))
                }
            };
            Ok((pred, ex.target, ex.task_id, oracle_hit))
        })
        .collect();
    let preds = preds?;

    let pairs: Vec<(usize, usize)> = preds.iter().map(|&(p, l, _, _)| (p, l)).collect();
    let mut summary = tally(&pairs);
    summary.extras.insert("chance".into(), 1.0 / table.len() as f64);

    // per-task accuracy
    let mut per_task: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for &(p, l, task, _) in &preds {
        let e = per_task.entry(task).or_default();
        e.0 += 1;
        if p == l {
            e.1 += 1;
        }
    }
    for (task, (count, hits)) in per_task {
        summary
            .extras
            .insert(format!("task{task}_top1"), hits as f64 / count as f64);
        summary.extras.insert(format!("task{task}_count"), count as f64);
    }

    if let ForecastMode::Oracle { k } = mode {
        let oracle_hits = preds.iter().filter(|(_, _, _, h)| h.unwrap_or(false)).count();
        summary
            .extras
            .insert(format!("oracle_{k}"), oracle_hits as f64 / preds.len() as f64);
        // first-sample accuracy doubles as the single-stochastic-sample top-1
        summary.extras.insert("single_sample_top1".into(), summary.top1);
    }
    if let ForecastMode::Expectation { samples } = mode {
        summary.extras.insert("samples".into(), samples as f64);
    }
    Ok(summary)
}

/// Activity classification over a split (requires an activity readout).
pub fn eval_activity(
    bundle: &ModelBundle,
    corpus: &[CorpusRecord],
    split: Split,
) -> Result<EvalSummary> {
    let seqs: Vec<&crate::types::ClipSequence> =
        corpus.iter().filter(|r| r.split == split).map(|r| &r.sequence).collect();
    if seqs.is_empty() {
        return Err(Error::invalid_input("split has no sequences"));
    }
    let tasks = bundle
        .activity
        .as_ref()
        .ok_or_else(|| Error::invalid_input("bundle has no activity readout"))?
        .head
        .classes();
    let preds: Result<Vec<(usize, usize)>> = seqs
        .par_iter()
        .map(|seq| {
            if seq.task_id >= tasks {
                return Err(Error::invalid_input(format!("unknown task id {}", seq.task_id)));
            }
            let mut obs = Mat::zeros(seq.len(), seq.clips[0].raw.len());
            for (r, clip) in seq.clips.iter().enumerate() {
                obs.row_mut(r).copy_from_slice(&clip.raw);
            }
            let emb = encode_rows(&bundle.encoder, &obs);
            Ok((crate::training::activity_predict(bundle, &emb)?, seq.task_id))
        })
        .collect();
    let mut summary = tally(&preds?);
    summary.extras.insert("chance".into(), 1.0 / tasks as f64);
    Ok(summary)
}

/// Report of one evaluation run, the unit the CLI serializes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub task: String,
    pub split: String,
    pub mode: String,
    pub top1: f64,
    pub examples: usize,
    pub per_category: BTreeMap<String, CategoryStat>,
    pub extras: BTreeMap<String, f64>,
    pub provenance: ReportProvenance,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generated_at: Option<String>,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportProvenance {
    pub bundle_hash: String,
    pub corpus_hash: String,
    pub config_hash: String,
    pub seed: u64,
    pub inference_mode: String,
}

impl EvalReport {
    pub fn from_summary(
        task: &str,
        split: Split,
        mode: &str,
        summary: &EvalSummary,
        provenance: ReportProvenance,
    ) -> Self {
        EvalReport {
            schema_version: REPORT_SCHEMA_VERSION,
            task: task.to_string(),
            split: split.as_str().to_string(),
            mode: mode.to_string(),
            top1: summary.top1,
            examples: summary.examples,
            per_category: summary
                .per_category
                .iter()
                .map(|(id, stat)| (id.to_string(), stat.clone()))
                .collect(),
            extras: summary.extras.clone(),
            provenance,
            generated_at: None,
        }
    }

    /// Hash of the report with volatile fields (timestamps) removed.
    pub fn canonical_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.generated_at = None;
        crate::hash::sha256_hex(&serde_json::to_vec(&canonical).expect("report serializes"))
    }
}
