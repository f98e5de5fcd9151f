//! Vector math shared by the corpus generator and the models.

use crate::error::{Error, Result};

/// Scale `v` to unit Euclidean norm.
///
/// Errors on the zero vector and on non-finite entries; the output is
/// positively proportional to the input.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid_input("l2_normalize: non-finite entry"));
    }
    let n = crate::mat::norm(v);
    if n == 0.0 {
        return Err(Error::invalid_input("l2_normalize: zero vector"));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Cosine similarity, bounded to `[-1, 1]`.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::invalid_input(format!(
            "cosine: length mismatch {} vs {}",
            u.len(),
            v.len()
        )));
    }
    if u.iter().chain(v.iter()).any(|x| !x.is_finite()) {
        return Err(Error::invalid_input("cosine: non-finite entry"));
    }
    let (nu, nv) = (crate::mat::norm(u), crate::mat::norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::invalid_input("cosine: zero vector"));
    }
    Ok((crate::mat::dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Numerically stable softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Numerically stable log-softmax.
pub fn log_softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln() + max;
    scores.iter().map(|s| s - lse).collect()
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
