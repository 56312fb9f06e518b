//! Elastic-net logistic regression on individual design-matrix rows.
//!
//! Objective: mean log-loss + λ(α‖w‖₁ + (1-α)·½‖w‖²), intercept unpenalized,
//! minimized by proximal gradient descent with backtracking.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::sigmoid;
use crate::preprocess::NormStats;

/// Risk-factor subset used by the 14-variable model.
pub const LR14_FEATURES: [&str; 14] = [
    "resp_rate",
    "heart_rate",
    "spo2",
    "fio2",
    "sf_ratio",
    "pco2",
    "ph",
    "hfnc",
    "age_years",
    "temperature",
    "sbp",
    "dbp",
    "wbc",
    "lactate",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-6,
            max_iterations: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElasticNetModel {
    /// `"lr14"` or `"full"`.
    pub subset: String,
    pub features: Vec<String>,
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Penalty {
    l1: f64,
    l2: f64,
}

impl Penalty {
    fn new(lambda: f64, alpha: f64) -> Self {
        Self {
            l1: lambda * alpha,
            l2: lambda * (1.0 - alpha),
        }
    }
}

/// Smooth part: mean log-loss plus the ridge share, with its gradient.
fn smooth(
    x: ArrayView2<f64>,
    y: &[f64],
    w: &Array1<f64>,
    b: f64,
    pen: Penalty,
) -> (f64, Array1<f64>, f64) {
    let z = x.dot(w) + b;
    let n = y.len() as f64;
    let mut loss = 0.0;
    let mut r = Array1::zeros(y.len());
    for (i, (&zi, &yi)) in z.iter().zip(y).enumerate() {
        // log(1 + e^z) - y·z, stable for both signs
        loss += zi.max(0.0) + (-zi.abs()).exp().ln_1p() - yi * zi;
        r[i] = (sigmoid(zi) - yi) / n;
    }
    let gw = x.t().dot(&r) + &(w * pen.l2);
    let gb = r.sum();
    (loss / n + 0.5 * pen.l2 * w.dot(w), gw, gb)
}

fn soft_threshold(v: f64, k: f64) -> f64 {
    v.signum() * (v.abs() - k).max(0.0)
}

/// Full objective, exposed for monotonicity checks.
pub fn objective(
    x: ArrayView2<f64>,
    y: &[f64],
    w: ArrayView1<f64>,
    b: f64,
    lambda: f64,
    alpha: f64,
) -> f64 {
    let pen = Penalty::new(lambda, alpha);
    let w = w.to_owned();
    smooth(x, y, &w, b, pen).0 + pen.l1 * w.iter().map(|v| v.abs()).sum::<f64>()
}

/// Fits on rows of `x` with binary labels `y` (NaN-labeled rows already removed).
/// `trace`, when given, receives the objective after every iteration.
pub fn fit_elasticnet(
    x: ArrayView2<f64>,
    y: &[f64],
    lambda: f64,
    alpha: f64,
    solver: SolverConfig,
    mut trace: Option<&mut Vec<f64>>,
) -> Result<(Array1<f64>, f64, usize, bool)> {
    if x.nrows() != y.len() {
        return Err(Error::Shape(format!(
            "{} rows, {} labels",
            x.nrows(),
            y.len()
        )));
    }
    if y.is_empty() {
        return Err(Error::NoLabels);
    }
    if !(lambda >= 0.0 && lambda.is_finite()) || !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Invalid(format!(
            "need λ ≥ 0 and α ∈ [0,1], got λ={lambda}, α={alpha}"
        )));
    }
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Invalid("labels must be 0 or 1".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("regression rows".into()));
    }
    let d = x.ncols();
    let rate = y.iter().sum::<f64>() / y.len() as f64;
    if rate == 0.0 || rate == 1.0 {
        log::warn!("single-class labels; fitting the intercept only");
        let p = rate.clamp(1e-7, 1.0 - 1e-7);
        return Ok((Array1::zeros(d), (p / (1.0 - p)).ln(), 0, true));
    }

    let pen = Penalty::new(lambda, alpha);
    let mut w = Array1::<f64>::zeros(d);
    let mut b = (rate / (1.0 - rate)).ln();
    let l1 = |w: &Array1<f64>| pen.l1 * w.iter().map(|v| v.abs()).sum::<f64>();
    let (mut f, mut gw, mut gb) = smooth(x, y, &w, b, pen);
    let mut step = 1.0;
    for it in 1..=solver.max_iterations {
        step *= 2.0;
        loop {
            let nw = (&w - &(&gw * step)).mapv(|v| soft_threshold(v, step * pen.l1));
            let nb = b - step * gb;
            let (nf, ngw, ngb) = smooth(x, y, &nw, nb, pen);
            let dw = &nw - &w;
            let db = nb - b;
            let sq = dw.dot(&dw) + db * db;
            let bound = f + gw.dot(&dw) + gb * db + sq / (2.0 * step);
            if nf <= bound + 1e-15 * f.abs() || step < 1e-20 {
                let mapping = sq.sqrt() / step;
                w = nw;
                b = nb;
                f = nf;
                gw = ngw;
                gb = ngb;
                if let Some(t) = trace.as_deref_mut() {
                    t.push(f + l1(&w));
                }
                if mapping <= solver.tolerance {
                    return Ok((w, b, it, true));
                }
                break;
            }
            step *= 0.5;
        }
    }
    log::warn!(
        "elastic-net solver stopped at {} iterations",
        solver.max_iterations
    );
    Ok((w, b, solver.max_iterations, false))
}

/// Column indices of `features` in `stats`; a missing feature is an error.
pub fn feature_columns(stats: &NormStats, features: &[String]) -> Result<Vec<usize>> {
    features
        .iter()
        .map(|f| {
            stats.index_of(f).ok_or_else(|| {
                Error::Invalid(format!(
                    "feature `{f}` is not in the normalized feature set"
                ))
            })
        })
        .collect()
}

/// Collects labeled rows restricted to `columns`.
pub fn stack_rows<'a>(
    items: impl IntoIterator<Item = (&'a Array2<f64>, &'a [f64])>,
    columns: &[usize],
) -> (Array2<f64>, Vec<f64>) {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (m, ys) in items {
        for (row, &y) in m.axis_iter(Axis(0)).zip(ys) {
            if y.is_nan() {
                continue;
            }
            data.extend(columns.iter().map(|&c| row[c]));
            labels.push(y);
        }
    }
    let n = labels.len();
    (
        Array2::from_shape_vec((n, columns.len()), data).expect("row width"),
        labels,
    )
}

impl ElasticNetModel {
    #[allow(clippy::too_many_arguments)]
    pub fn fit<'a>(
        subset: &str,
        features: Vec<String>,
        stats: &NormStats,
        training: impl IntoIterator<Item = (&'a Array2<f64>, &'a [f64])>,
        lambda: f64,
        alpha: f64,
        solver: SolverConfig,
    ) -> Result<Self> {
        let cols = feature_columns(stats, &features)?;
        let (x, y) = stack_rows(training, &cols);
        let (w, b, iterations, converged) =
            fit_elasticnet(x.view(), &y, lambda, alpha, solver, None)?;
        Ok(Self {
            subset: subset.into(),
            features,
            weights: w.to_vec(),
            intercept: b,
            lambda,
            alpha,
            iterations,
            converged,
        })
    }

    /// `σ(w·x + b)` for a row already restricted to the model's features.
    pub fn predict_row(&self, row: &[f64]) -> Result<f64> {
        if row.len() != self.weights.len() {
            return Err(Error::Shape(format!(
                "row has {} features, model {}",
                row.len(),
                self.weights.len()
            )));
        }
        let z: f64 = self
            .weights
            .iter()
            .zip(row)
            .map(|(w, x)| w * x)
            .sum::<f64>()
            + self.intercept;
        Ok(sigmoid(z))
    }

    /// One probability per design-matrix row.
    pub fn predict_matrix(&self, stats: &NormStats, values: &Array2<f64>) -> Result<Vec<f64>> {
        let cols = feature_columns(stats, &self.features)?;
        values
            .axis_iter(Axis(0))
            .map(|r| {
                let row: Vec<f64> = cols.iter().map(|&c| r[c]).collect();
                self.predict_row(&row)
            })
            .collect()
    }
}
