//! Probability-vector helpers on plain slices.
//!
//! The training graph works on logits and fuses these computations with the
//! softmax; the functions here take probabilities directly and back the
//! metric code, tests and reports.

use super::graph::{softmax_row, LOG_FLOOR};
use crate::error::{Error, Result};

pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if logits.len() != mask.len() {
        return Err(Error::shape(
            "masked_softmax",
            &[logits.len()],
            &[mask.len()],
        ));
    }
    let mut out = vec![0.0; logits.len()];
    softmax_row(logits, mask, &mut out)?;
    Ok(out)
}

/// `-log dist[target]`, with the probability floored at [`LOG_FLOOR`].
pub fn cross_entropy(dist: &[f64], target: usize) -> Result<f64> {
    let p = *dist.get(target).ok_or(Error::IndexOutOfRange {
        index: target,
        len: dist.len(),
    })?;
    Ok(-p.max(LOG_FLOOR).ln())
}

/// `Σ p log(p/q)` with `0·log 0 = 0` and `q` floored at [`LOG_FLOOR`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape("kl_divergence", &[p.len()], &[q.len()]));
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a.ln() - b.max(LOG_FLOOR).ln()))
        .sum())
}

/// Mean binary cross-entropy of scores against 0/1 targets over valid
/// positions; scores are clamped to `[ε, 1-ε]`.
pub fn binary_cross_entropy(scores: &[f64], targets: &[f64], mask: &[bool]) -> Result<f64> {
    if scores.len() != targets.len() || scores.len() != mask.len() {
        return Err(Error::shape(
            "binary_cross_entropy",
            &[scores.len()],
            &[targets.len()],
        ));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for ((&h, &y), _) in scores.iter().zip(targets).zip(mask).filter(|(_, &m)| m) {
        let h = h.clamp(LOG_FLOOR, 1.0 - LOG_FLOOR);
        total -= y * h.ln() + (1.0 - y) * (1.0 - h).ln();
        count += 1;
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(total / count as f64)
}

pub fn argmax(xs: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in xs.iter().enumerate() {
        if best.is_none_or(|b| x > xs[b]) {
            best = Some(i);
        }
    }
    best
}
