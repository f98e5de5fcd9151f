//! Task grammars: canonical step orderings plus the individual-variation
//! model (adjacent swaps, step drops, distractor insertions) used to
//! synthesize how differently people perform the same activity.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::SeedRng;
use crate::types::{MAX_SEQ_LEN, MIN_SEQ_LEN};

/// One procedural activity: a distribution over canonical step orderings and
/// the rates of the three variation channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskGrammar {
    pub task_id: usize,
    /// `(step id sequence, probability)`; probabilities sum to 1.
    pub orderings: Vec<(Vec<usize>, f64)>,
    pub swap_rate: f64,
    pub drop_rate: f64,
    pub distractor_rate: f64,
}

impl TaskGrammar {
    /// Validate against a phrase pool of size `phrase_count`. Returns every
    /// violation found.
    pub fn validate(&self, phrase_count: usize) -> Vec<String> {
        let mut problems = Vec::new();
        let tag = format!("grammar {}", self.task_id);
        if self.orderings.is_empty() {
            problems.push(format!("{tag}: no orderings"));
        }
        let total: f64 = self.orderings.iter().map(|(_, p)| p).sum();
        if (total - 1.0).abs() > 1e-9 {
            problems.push(format!("{tag}: ordering probabilities sum to {total}"));
        }
        for (steps, p) in &self.orderings {
            if *p < 0.0 {
                problems.push(format!("{tag}: negative ordering probability {p}"));
            }
            if steps.len() > MAX_SEQ_LEN {
                problems.push(format!("{tag}: ordering length {} > {MAX_SEQ_LEN}", steps.len()));
            }
            if steps.len() < MIN_SEQ_LEN {
                problems.push(format!("{tag}: ordering length {} < {MIN_SEQ_LEN}", steps.len()));
            }
            for &s in steps {
                if s >= phrase_count {
                    problems.push(format!("{tag}: step id {s} outside phrase table"));
                }
            }
        }
        for (name, rate) in [
            ("swap_rate", self.swap_rate),
            ("drop_rate", self.drop_rate),
            ("distractor_rate", self.distractor_rate),
        ] {
            if !(0.0..=1.0).contains(&rate) {
                problems.push(format!("{tag}: {name} {rate} outside [0, 1]"));
            }
        }
        problems
    }

    /// The set of valid next-step ids after `prefix`, over all canonical
    /// orderings. Used as ground truth for branch-point evaluation.
    pub fn valid_continuations(&self, prefix: &[usize]) -> Vec<usize> {
        let mut next: Vec<usize> = Vec::new();
        for (steps, p) in &self.orderings {
            if *p > 0.0 && steps.len() > prefix.len() && steps[..prefix.len()] == *prefix {
                let n = steps[prefix.len()];
                if !next.contains(&n) {
                    next.push(n);
                }
            }
        }
        next.sort_unstable();
        next
    }
}

/// Draw one step-id sequence: pick a canonical ordering by probability, then
/// apply adjacent swaps, drops (never below length 2), and distractor
/// insertions (capped at length 9).
pub fn sample_step_sequence(grammar: &TaskGrammar, phrase_count: usize, rng: &mut SeedRng) -> Vec<usize> {
    let mut steps = pick_ordering(grammar, rng).to_vec();

    // adjacent swaps, one Bernoulli per adjacent pair, left to right
    if grammar.swap_rate > 0.0 {
        for i in 0..steps.len().saturating_sub(1) {
            if rng.gen::<f64>() < grammar.swap_rate {
                steps.swap(i, i + 1);
            }
        }
    }

    // drops: decide independently, then restore earliest-dropped steps if
    // fewer than MIN_SEQ_LEN survive
    if grammar.drop_rate > 0.0 {
        let mut keep: Vec<bool> =
            steps.iter().map(|_| rng.gen::<f64>() >= grammar.drop_rate).collect();
        let mut kept_count = keep.iter().filter(|&&k| k).count();
        let mut i = 0;
        while kept_count < MIN_SEQ_LEN {
            if !keep[i] {
                keep[i] = true;
                kept_count += 1;
            }
            i += 1;
        }
        steps = steps.iter().zip(&keep).filter(|(_, &k)| k).map(|(&s, _)| s).collect();
    }

    // distractor insertions, one Bernoulli per gap, respecting the length cap
    if grammar.distractor_rate > 0.0 {
        let mut with_distractors = Vec::with_capacity(steps.len() + 2);
        for (i, &s) in steps.iter().enumerate() {
            if with_distractors.len() + (steps.len() - i) < MAX_SEQ_LEN
                && rng.gen::<f64>() < grammar.distractor_rate
            {
                with_distractors.push(rng.gen_range(0..phrase_count));
            }
            with_distractors.push(s);
        }
        if with_distractors.len() < MAX_SEQ_LEN && rng.gen::<f64>() < grammar.distractor_rate {
            with_distractors.push(rng.gen_range(0..phrase_count));
        }
        steps = with_distractors;
    }

    steps
}

fn pick_ordering<'a>(grammar: &'a TaskGrammar, rng: &mut SeedRng) -> &'a [usize] {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (steps, p) in &grammar.orderings {
        acc += p;
        if u < acc {
            return steps;
        }
    }
    &grammar.orderings.last().expect("non-empty orderings").0
}
