use ndarray::Array2;

use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside the log.
pub const PROB_CLAMP: f64 = 1e-7;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy over entries whose label is not NaN.
pub fn bce_masked(probs: &Array2<f64>, labels: &Array2<f64>) -> Result<f64> {
    if probs.dim() != labels.dim() {
        return Err(Error::Shape(format!(
            "probs {:?} vs labels {:?}",
            probs.dim(),
            labels.dim()
        )));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (&p, &y) in probs.iter().zip(labels) {
        if y.is_nan() {
            continue;
        }
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        sum -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        n += 1;
    }
    if n == 0 {
        return Err(Error::NoLabels);
    }
    Ok(sum / n as f64)
}
