//! Softmax over image-level class scores and the per-sample negative
//! log-likelihood.

use crate::aggregation::ClassScores;
use crate::error::{Error, Result};

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = scores.iter().map(|&s| (s - m).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    p
}

/// `p(k|I) = exp(s_k) / Σ_c exp(s_c)` over all planes, background included.
pub fn class_posteriors(scores: &ClassScores) -> Vec<f64> {
    softmax(scores.values())
}

fn check_label(scores: &ClassScores, label: usize) -> Result<()> {
    if label >= scores.len() {
        return Err(Error::invalid(format!(
            "class index {label} out of range for {} classes",
            scores.len()
        )));
    }
    Ok(())
}

/// `log Σ_c exp(s_c) − s_label`, i.e. `−log p(label|I)`.
pub fn nll_loss(scores: &ClassScores, label: usize) -> Result<f64> {
    check_label(scores, label)?;
    let s = scores.values();
    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let top = s.iter().position(|&v| v == m).unwrap_or(0);
    let rest: f64 = s
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, &v)| (v - m).exp())
        .sum();
    Ok(((m - s[label]) + rest.ln_1p()).max(0.0))
}

/// Gradient of [`nll_loss`] with respect to the class scores: `p − onehot`.
pub fn nll_loss_grad(scores: &ClassScores, label: usize) -> Result<Vec<f64>> {
    check_label(scores, label)?;
    let mut g = class_posteriors(scores);
    g[label] -= 1.0;
    Ok(g)
}
