//! Scalar reference forms of the training losses.
//!
//! The tape carries differentiable versions of the same formulas; these
//! functions evaluate them directly on plain numbers.

use crate::error::{Error, Result};
use crate::math::{dot, norm};

pub const PROB_CLAMP: f64 = super::tape::PROB_CLAMP;

fn clamp(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Mean over positives of `−log(e^{s⁺/τ} / (e^{s⁺/τ} + Σ e^{s⁻/τ}))`.
/// `negatives[i]` holds the negative scores competing with `positives[i]`.
pub fn sampled_softmax_loss(positives: &[f64], negatives: &[Vec<f64>], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if positives.len() != negatives.len() {
        return Err(Error::Shape("one negative list per positive".into()));
    }
    if positives.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (&s, negs) in positives.iter().zip(negatives) {
        let pos = s / tau;
        let max = negs.iter().map(|&x| x / tau).fold(pos, f64::max);
        let others: f64 = negs.iter().map(|&x| (x / tau - max).exp()).sum();
        total += if pos == max {
            others.ln_1p()
        } else {
            (max - pos) + ((pos - max).exp() + others).ln()
        };
    }
    Ok(total / positives.len() as f64)
}

/// Binary cross entropy with `p` clamped to `[1e-7, 1 − 1e-7]`.
pub fn bce_loss(p: f64, y: f64) -> f64 {
    let q = clamp(p);
    -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
}

/// Cross entropy between `y/Σy` and `p/Σp`; zero for a list with no positive.
pub fn list_ce_loss(p: &[f64], y: &[f64]) -> Result<f64> {
    if p.len() != y.len() || p.is_empty() {
        return Err(Error::Shape("list_ce needs equal, non-empty lists".into()));
    }
    let ysum: f64 = y.iter().sum();
    if ysum <= 0.0 {
        return Ok(0.0);
    }
    let psum: f64 = p.iter().map(|&v| clamp(v)).sum();
    Ok(p
        .iter()
        .zip(y)
        .filter(|(_, &yv)| yv > 0.0)
        .map(|(&pv, &yv)| -(yv / ysum) * (clamp(pv) / psum).ln())
        .sum())
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cosine of {}-d and {}-d vectors", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("cosine similarity of a zero vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}
