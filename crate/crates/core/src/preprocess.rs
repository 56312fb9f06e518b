//! Sparse chart → dense design matrix.
//!
//! Order of operations: range filter, aggregation, z-scoring, forward fill,
//! mean imputation. Physiologic, lab and demographic features are z-scored
//! with training statistics so the population mean imputes to exactly 0.
//! Drugs and interventions are scaled to [0, 1] by their therapy maximum and
//! read 0 wherever nothing was charted.

use std::collections::{BTreeMap, HashMap};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::catalog::{Catalog, ObservationRecord, VariableKind};
use crate::error::{Error, Result};

pub const NORM_STATS_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterReport {
    /// Out-of-range values dropped, per source variable.
    pub out_of_range: BTreeMap<String, usize>,
    /// Records of variables absent from the catalog (e.g. pruned therapies).
    pub not_in_catalog: usize,
}

impl FilterReport {
    pub fn dropped(&self) -> usize {
        self.out_of_range.values().sum::<usize>() + self.not_in_catalog
    }
}

/// Drops values outside `[valid_min, valid_max]` and renames aggregation
/// group members to their group feature.
pub fn aggregate_and_filter(
    records: &[ObservationRecord],
    catalog: &Catalog,
) -> (Vec<ObservationRecord>, FilterReport) {
    let specs: HashMap<&str, _> = catalog
        .variables()
        .iter()
        .map(|v| (v.name.as_str(), v))
        .collect();
    let mut report = FilterReport::default();
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let Some(spec) = specs.get(r.variable.as_str()) else {
            report.not_in_catalog += 1;
            continue;
        };
        if r.value < spec.valid_min || r.value > spec.valid_max {
            *report.out_of_range.entry(r.variable.clone()).or_default() += 1;
            continue;
        }
        let mut r = r.clone();
        if let Some(group) = &spec.aggregation_group {
            r.variable = group.clone();
        }
        out.push(r);
    }
    (out, report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Transform {
    ZScore { mean: f64, std: f64 },
    TherapyScale { max: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub name: String,
    pub kind: VariableKind,
    pub transform: Transform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedFeature {
    pub name: String,
    pub reason: String,
}

/// Training-set normalization statistics, one entry per model feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub version: u32,
    pub catalog_hash: String,
    pub features: Vec<FeatureStats>,
    pub dropped: Vec<DroppedFeature>,
}

impl NormStats {
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("stats serialize");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.features.iter().map(|f| f.name.clone()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn width(&self) -> usize {
        self.features.len()
    }
}

/// Feature list after aggregation, in catalog order.
pub fn catalog_features(catalog: &Catalog) -> Vec<(String, VariableKind, Option<f64>)> {
    let mut out: Vec<(String, VariableKind, Option<f64>)> = Vec::new();
    for v in catalog.variables() {
        let name = v.feature_name();
        match out.iter_mut().find(|(n, _, _)| n == name) {
            Some((_, _, max)) => {
                if let (Some(a), Some(b)) = (*max, v.therapy_max) {
                    *max = Some(a.max(b));
                }
            }
            None => out.push((name.to_string(), v.kind, v.therapy_max)),
        }
    }
    out
}

/// Fits per-feature statistics over filtered, aggregated training records.
///
/// Standard deviations use the population formula. Features never observed
/// in training, or with zero variance, are dropped and listed.
pub fn fit_normalization<'a>(
    training: impl IntoIterator<Item = &'a [ObservationRecord]>,
    catalog: &Catalog,
) -> Result<NormStats> {
    let feats = catalog_features(catalog);
    let index: HashMap<&str, usize> = feats
        .iter()
        .enumerate()
        .map(|(i, f)| (f.0.as_str(), i))
        .collect();
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); feats.len()];
    let mut sets = 0usize;
    for set in training {
        sets += 1;
        for r in set {
            if let Some(&i) = index.get(r.variable.as_str()) {
                values[i].push(r.value);
            }
        }
    }
    if sets == 0 {
        return Err(Error::Empty("training set"));
    }

    let mut features = Vec::new();
    let mut dropped = Vec::new();
    for ((name, kind, therapy_max), vals) in feats.into_iter().zip(values) {
        if kind.is_therapy() {
            let max =
                therapy_max.ok_or_else(|| Error::Invalid(format!("`{name}` lacks therapy_max")))?;
            features.push(FeatureStats {
                name,
                kind,
                transform: Transform::TherapyScale { max },
            });
            continue;
        }
        if vals.is_empty() {
            log::warn!("feature `{name}` never observed in training; dropped");
            dropped.push(DroppedFeature {
                name,
                reason: "never observed in training".into(),
            });
            continue;
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if !(std > 1e-12 * mean.abs().max(1.0)) {
            log::warn!("feature `{name}` has zero training variance; dropped");
            dropped.push(DroppedFeature {
                name,
                reason: "zero variance in training".into(),
            });
            continue;
        }
        features.push(FeatureStats {
            name,
            kind,
            transform: Transform::ZScore { mean, std },
        });
    }
    Ok(NormStats {
        version: NORM_STATS_VERSION,
        catalog_hash: catalog.hash(),
        features,
        dropped,
    })
}

/// Dense per-trial input; rows are charting times, columns are features.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub times: Vec<f64>,
    pub values: Array2<f64>,
    /// True where a measurement was charted at exactly that row's time.
    pub observed: Array2<bool>,
    pub stats_hash: String,
    /// Therapy cells above their maximum, clamped to 1.
    pub clamped: usize,
}

impl DesignMatrix {
    pub fn rows(&self) -> usize {
        self.values.nrows()
    }
}

/// Builds the design matrix for `times` from filtered, aggregated records
/// sorted by time. Cell `(t, v)` only uses records of `v` at times `≤ t`,
/// except demographics which hold the episode's first charted value.
pub fn build_design_matrix(
    records: &[ObservationRecord],
    times: &[f64],
    stats: &NormStats,
) -> Result<DesignMatrix> {
    if times.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Invalid(
            "design matrix times must be strictly ascending".into(),
        ));
    }
    if records.windows(2).any(|w| w[0].time > w[1].time) {
        return Err(Error::Invalid("records must be sorted by time".into()));
    }
    let width = stats.width();
    let index: HashMap<&str, usize> = stats
        .features
        .iter()
        .enumerate()
        .map(|(i, f)| (f.name.as_str(), i))
        .collect();

    let mut carried = vec![0.0f64; width];
    for (j, f) in stats.features.iter().enumerate() {
        if f.kind == VariableKind::Demographic {
            if let Some(r) = records.iter().find(|r| r.variable == f.name) {
                carried[j] = normalize(f, r.value).0;
            }
        }
    }

    let mut values = Array2::<f64>::zeros((times.len(), width));
    let mut observed = Array2::<bool>::from_elem((times.len(), width), false);
    let mut clamped = 0usize;
    let mut cursor = 0usize;
    let mut at_row: Vec<Option<f64>> = vec![None; width];

    for (row, &t) in times.iter().enumerate() {
        at_row.iter_mut().for_each(|c| *c = None);
        while cursor < records.len() && records[cursor].time <= t {
            let r = &records[cursor];
            cursor += 1;
            let Some(&j) = index.get(r.variable.as_str()) else {
                continue;
            };
            let f = &stats.features[j];
            let (v, was_clamped) = normalize(f, r.value);
            match f.kind {
                VariableKind::Demographic => {}
                k if k.is_therapy() => {}
                _ => carried[j] = v,
            }
            if r.time == t {
                clamped += usize::from(was_clamped);
                at_row[j] = Some(v);
            }
        }
        for (j, f) in stats.features.iter().enumerate() {
            values[[row, j]] = if f.kind.is_therapy() {
                at_row[j].unwrap_or(0.0)
            } else {
                carried[j]
            };
            observed[[row, j]] = at_row[j].is_some();
        }
    }
    if clamped > 0 {
        log::warn!("{clamped} therapy values above therapy_max clamped to 1");
    }
    Ok(DesignMatrix {
        times: times.to_vec(),
        values,
        observed,
        stats_hash: stats.hash(),
        clamped,
    })
}

fn normalize(f: &FeatureStats, raw: f64) -> (f64, bool) {
    match f.transform {
        Transform::ZScore { mean, std } => ((raw - mean) / std, false),
        Transform::TherapyScale { max } => {
            let s = raw / max;
            if s > 1.0 {
                (1.0, true)
            } else {
                (s.max(0.0), false)
            }
        }
    }
}

/// Repeats each row `k` consecutive times.
pub fn perseverate(matrix: &Array2<f64>, k: usize) -> Result<Array2<f64>> {
    if k == 0 {
        return Err(Error::Invalid(
            "perseveration factor must be at least 1".into(),
        ));
    }
    let (n, w) = matrix.dim();
    let mut out = Array2::<f64>::zeros((n * k, w));
    for (i, row) in matrix.rows().into_iter().enumerate() {
        for c in 0..k {
            out.row_mut(i * k + c).assign(&row);
        }
    }
    Ok(out)
}

/// Labels for a perseverated sequence: each original label sits on the last
/// of its `k` copies, earlier copies are NaN.
pub fn perseverate_labels(labels: &[f64], k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::Invalid(
            "perseveration factor must be at least 1".into(),
        ));
    }
    let mut out = vec![f64::NAN; labels.len() * k];
    for (i, &y) in labels.iter().enumerate() {
        out[i * k + k - 1] = y;
    }
    Ok(out)
}

/// Per-original-row outputs of a perseverated sequence (last copy of each row).
pub fn last_copies<T: Copy>(outputs: &[T], k: usize) -> Vec<T> {
    outputs.iter().skip(k - 1).step_by(k).copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::VariableSpec;
    use ndarray::array;

    fn var(name: &str, kind: VariableKind, min: f64, max: f64) -> VariableSpec {
        VariableSpec {
            name: name.into(),
            kind,
            unit: String::new(),
            valid_min: min,
            valid_max: max,
            therapy_max: kind.is_therapy().then_some(10.0),
            aggregation_group: None,
            support_modality: None,
        }
    }

    fn rec(t: f64, var: &str, v: f64) -> ObservationRecord {
        ObservationRecord {
            episode_id: "e".into(),
            time: t,
            variable: var.into(),
            value: v,
        }
    }

    fn catalog() -> Catalog {
        let mut sbp_a = var("sbp_invasive", VariableKind::Physiologic, 0.0, 300.0);
        sbp_a.aggregation_group = Some("sbp".into());
        let mut sbp_n = var("sbp_noninvasive", VariableKind::Physiologic, 0.0, 300.0);
        sbp_n.aggregation_group = Some("sbp".into());
        Catalog::new(vec![
            var("heart_rate", VariableKind::Physiologic, 0.0, 400.0),
            sbp_a,
            sbp_n,
            var("lactate", VariableKind::Lab, 0.0, 30.0),
            var("epi", VariableKind::Drug, 0.0, 100.0),
            var("age", VariableKind::Demographic, 0.0, 30.0),
        ])
    }

    #[test]
    fn aggregation_merges_groups() {
        let (out, rep) = aggregate_and_filter(
            &[
                rec(0.0, "sbp_invasive", 110.0),
                rec(5.0, "sbp_noninvasive", 112.0),
            ],
            &catalog(),
        );
        assert_eq!(
            out.iter().map(|r| r.variable.as_str()).collect::<Vec<_>>(),
            vec!["sbp", "sbp"]
        );
        assert_eq!(rep.dropped(), 0);
    }

    #[test]
    fn out_of_range_dropped() {
        let (out, rep) = aggregate_and_filter(
            &[rec(0.0, "heart_rate", 450.0), rec(1.0, "heart_rate", 140.0)],
            &catalog(),
        );
        assert_eq!(out, vec![rec(1.0, "heart_rate", 140.0)]);
        assert_eq!(rep.out_of_range["heart_rate"], 1);
    }

    #[test]
    fn two_point_stats_and_drops() {
        let train = vec![
            rec(0.0, "heart_rate", 0.0),
            rec(1.0, "heart_rate", 2.0),
            rec(0.0, "lactate", 3.0),
            rec(1.0, "lactate", 3.0),
        ];
        let stats = fit_normalization([train.as_slice()], &catalog()).unwrap();
        let hr = &stats.features[stats.index_of("heart_rate").unwrap()];
        assert_eq!(
            hr.transform,
            Transform::ZScore {
                mean: 1.0,
                std: 1.0
            }
        );
        let dropped: Vec<_> = stats.dropped.iter().map(|d| d.name.as_str()).collect();
        assert!(dropped.contains(&"lactate"), "constant feature dropped");
        assert!(
            dropped.contains(&"sbp") && dropped.contains(&"age"),
            "never-observed dropped"
        );
        let epi = &stats.features[stats.index_of("epi").unwrap()];
        assert_eq!(epi.transform, Transform::TherapyScale { max: 10.0 });
    }

    fn stats() -> NormStats {
        let train = vec![
            rec(0.0, "heart_rate", 100.0),
            rec(1.0, "heart_rate", 140.0),
            rec(0.0, "lactate", 1.0),
            rec(1.0, "lactate", 3.0),
            rec(0.0, "sbp", 90.0),
            rec(1.0, "sbp", 110.0),
            rec(0.0, "age", 1.0),
            rec(0.0, "age", 5.0),
        ];
        fit_normalization([train.as_slice()], &catalog()).unwrap()
    }

    #[test]
    fn forward_fill_and_mean_impute() {
        let s = stats();
        let lac = s.index_of("lactate").unwrap();
        let epi = s.index_of("epi").unwrap();
        let m = build_design_matrix(&[rec(60.0, "lactate", 3.0)], &[0.0, 60.0, 120.0], &s).unwrap();
        assert_eq!(m.values[[0, lac]], 0.0);
        assert_eq!(m.values[[1, lac]], 1.0);
        assert_eq!(m.values[[2, lac]], 1.0);
        assert!(m.observed[[1, lac]] && !m.observed[[2, lac]]);
        assert!(m.values.column(epi).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mean_value_normalizes_to_zero() {
        let s = stats();
        let hr = s.index_of("heart_rate").unwrap();
        let m = build_design_matrix(&[rec(0.0, "heart_rate", 120.0)], &[0.0], &s).unwrap();
        assert_eq!(m.values[[0, hr]], 0.0);
    }

    #[test]
    fn therapy_scaled_and_clamped() {
        let s = stats();
        let epi = s.index_of("epi").unwrap();
        let m = build_design_matrix(
            &[rec(0.0, "epi", 5.0), rec(10.0, "epi", 25.0)],
            &[0.0, 5.0, 10.0],
            &s,
        )
        .unwrap();
        assert_eq!(m.values.column(epi).to_vec(), vec![0.5, 0.0, 1.0]);
        assert_eq!(m.clamped, 1);
    }

    #[test]
    fn demographics_constant() {
        let s = stats();
        let age = s.index_of("age").unwrap();
        let m = build_design_matrix(&[rec(30.0, "age", 5.0)], &[0.0, 30.0, 90.0], &s).unwrap();
        assert!(m.values.column(age).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn non_ascending_times_rejected() {
        assert!(build_design_matrix(&[], &[5.0, 1.0], &stats()).is_err());
    }

    #[test]
    fn perseveration_shapes() {
        let m = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(perseverate(&m, 1).unwrap(), m);
        let p = perseverate(&m, 3).unwrap();
        assert_eq!(
            p,
            array![
                [1.0, 2.0],
                [1.0, 2.0],
                [1.0, 2.0],
                [3.0, 4.0],
                [3.0, 4.0],
                [3.0, 4.0]
            ]
        );
        assert!(perseverate(&m, 0).is_err());
        let l = perseverate_labels(&[0.0, 1.0], 3).unwrap();
        assert!(l[0].is_nan() && l[1].is_nan() && l[2] == 0.0 && l[5] == 1.0);
        assert_eq!(last_copies(&[9, 9, 1, 9, 9, 2], 3), vec![1, 2]);
    }
}
