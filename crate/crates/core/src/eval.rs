//! Time-anchored evaluation: AUROC sweeps over unresolved trials, ROC
//! curves, operating points and time-to-failure statistics.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trial::{HfncTrial, Outcome};

/// Sensitivity grid for operating-point tables.
pub const SENSITIVITY_TARGETS: [f64; 11] = [
    0.10, 0.20, 0.30, 0.40, 0.50, 0.60, 0.70, 0.80, 0.90, 0.95, 1.00,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSeries {
    pub trial_id: String,
    pub times: Vec<f64>,
    pub probs: Vec<f64>,
}

impl PredictionSeries {
    pub fn new(trial_id: impl Into<String>, times: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        let trial_id = trial_id.into();
        if times.len() != probs.len() {
            return Err(Error::Shape(format!(
                "{trial_id}: {} times, {} probabilities",
                times.len(),
                probs.len()
            )));
        }
        if times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Invalid(format!(
                "{trial_id}: prediction times not ascending"
            )));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Invalid(format!(
                "{trial_id}: probability outside [0, 1]"
            )));
        }
        Ok(Self {
            trial_id,
            times,
            probs,
        })
    }
}

/// Per-trial facts evaluation needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub trial_id: String,
    pub period_start: f64,
    pub resolution_time: f64,
    pub failure: bool,
    pub respiratory: bool,
}

impl TrialOutcome {
    pub fn from_trial(trial: &HfncTrial) -> Option<Self> {
        let failure = match trial.target.outcome {
            Outcome::Failure => true,
            Outcome::Success => false,
            Outcome::Censored => return None,
        };
        Some(Self {
            trial_id: trial.trial_id.clone(),
            period_start: trial.target.start,
            resolution_time: trial.target.resolution_time,
            failure,
            respiratory: trial.respiratory,
        })
    }

    /// Still unresolved `t` minutes into the period.
    pub fn eligible_at(&self, t: f64) -> bool {
        self.resolution_time - self.period_start > t
    }
}

pub fn eligible_trials_at(trials: &[TrialOutcome], t: f64) -> Vec<&TrialOutcome> {
    trials.iter().filter(|tr| tr.eligible_at(t)).collect()
}

/// Which prediction represents the model's opinion at an anchor time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum AnchorRule {
    #[default]
    LastAtOrBefore,
    /// Closest prediction within `window` minutes either side; ties go to the earlier one.
    Nearest { window: f64 },
}

pub fn score_at(
    series: &PredictionSeries,
    t: f64,
    period_start: f64,
    rule: AnchorRule,
) -> Option<f64> {
    let at = period_start + t;
    let after = series.times.partition_point(|&x| x <= at);
    match rule {
        AnchorRule::LastAtOrBefore => after.checked_sub(1).map(|i| series.probs[i]),
        AnchorRule::Nearest { window } => {
            let before = after.checked_sub(1).map(|i| (at - series.times[i], i));
            let next = series.times.get(after).map(|&x| (x - at, after));
            let best = match (before, next) {
                (Some(b), Some(n)) => Some(if n.0 < b.0 { n } else { b }),
                (b, n) => b.or(n),
            };
            best.filter(|&(d, _)| d <= window)
                .map(|(_, i)| series.probs[i])
        }
    }
}

/// Mann-Whitney AUROC, `P(s⁺ > s⁻) + ½P(tie)`; `None` unless both classes occur.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let (u2, pos, neg) = mann_whitney_u2(scores, labels)?;
    Some(u2 as f64 / (2 * pos * neg) as f64)
}

/// Twice the U statistic (an integer), with class counts.
fn mann_whitney_u2(scores: &[f64], labels: &[bool]) -> Option<(u64, u64, u64)> {
    assert_eq!(
        scores.len(),
        labels.len(),
        "scores and labels differ in length"
    );
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut u2, mut neg_below, mut pos_total) = (0u64, 0u64, 0u64);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let (mut p, mut n) = (0u64, 0u64);
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        u2 += 2 * p * neg_below + p * n;
        neg_below += n;
        pos_total += p;
        i = j;
    }
    (pos_total > 0 && neg_below > 0).then_some((u2, pos_total, neg_below))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// One point per distinct score (predict positive when `score ≥ threshold`),
/// preceded by `(0, 0)` at threshold `+∞`.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Option<Vec<RocPoint>> {
    let (_, pos, neg) = mann_whitney_u2(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < idx.len() {
        let thr = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == thr {
            if labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: thr,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Some(points)
}

pub fn trapezoid_area(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0)
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub target_sensitivity: f64,
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub ppv: Option<f64>,
    pub npv: Option<f64>,
}

/// For each target, the highest threshold whose sensitivity reaches it.
pub fn operating_points(
    scores: &[f64],
    labels: &[bool],
    targets: &[f64],
) -> Option<Vec<OperatingPoint>> {
    let (_, pos, neg) = mann_whitney_u2(scores, labels)?;
    let roc = roc_curve(scores, labels)?;
    let out = targets
        .iter()
        .map(|&target| {
            let need = (target * pos as f64 - 1e-9).ceil().max(0.0) as u64;
            let p = roc[1..]
                .iter()
                .find(|p| (p.tpr * pos as f64).round() as u64 >= need)
                .expect("the lowest threshold captures every positive");
            let tp = (p.tpr * pos as f64).round() as u64;
            let fp = (p.fpr * neg as f64).round() as u64;
            let (fn_, tn) = (pos - tp, neg - fp);
            OperatingPoint {
                target_sensitivity: target,
                threshold: p.threshold,
                sensitivity: tp as f64 / pos as f64,
                specificity: tn as f64 / neg as f64,
                ppv: (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64),
                npv: (tn + fn_ > 0).then(|| tn as f64 / (tn + fn_) as f64),
            }
        })
        .collect();
    Some(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CohortFilter {
    #[default]
    All,
    Respiratory,
}

impl CohortFilter {
    pub fn keeps(self, trial: &TrialOutcome) -> bool {
        match self {
            CohortFilter::All => true,
            CohortFilter::Respiratory => trial.respiratory,
        }
    }
}

/// Scores and labels of the trials eligible at `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub t_min: f64,
    pub trial_ids: Vec<String>,
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
    pub n_eligible: usize,
    pub n_fail: usize,
    /// Eligible trials without any prediction yet.
    pub n_dropped: usize,
}

pub fn anchor_set(
    trials: &[TrialOutcome],
    predictions: &BTreeMap<String, PredictionSeries>,
    t: f64,
    rule: AnchorRule,
) -> AnchorSet {
    let mut set = AnchorSet {
        t_min: t,
        trial_ids: Vec::new(),
        scores: Vec::new(),
        labels: Vec::new(),
        n_eligible: 0,
        n_fail: 0,
        n_dropped: 0,
    };
    for tr in eligible_trials_at(trials, t) {
        set.n_eligible += 1;
        set.n_fail += usize::from(tr.failure);
        match predictions
            .get(&tr.trial_id)
            .and_then(|s| score_at(s, t, tr.period_start, rule))
        {
            Some(p) => {
                set.trial_ids.push(tr.trial_id.clone());
                set.scores.push(p);
                set.labels.push(tr.failure);
            }
            None => set.n_dropped += 1,
        }
    }
    set
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub t_min: f64,
    pub n_eligible: usize,
    pub n_fail: usize,
    pub n_dropped: usize,
    pub auroc: Option<f64>,
}

/// Anchors `0, step, 2·step, …` up to and including `span` minutes.
pub fn anchor_grid(step: f64, span: f64) -> Vec<f64> {
    let n = (span / step + 1e-9).floor() as usize;
    (0..=n).map(|i| i as f64 * step).collect()
}

pub fn horizon_sweep(
    trials: &[TrialOutcome],
    predictions: &BTreeMap<String, PredictionSeries>,
    anchors: &[f64],
    rule: AnchorRule,
    cohort: CohortFilter,
) -> Vec<SweepRow> {
    let kept: Vec<TrialOutcome> = trials.iter().filter(|t| cohort.keeps(t)).cloned().collect();
    anchors
        .iter()
        .map(|&t| {
            let set = anchor_set(&kept, predictions, t, rule);
            SweepRow {
                t_min: t,
                n_eligible: set.n_eligible,
                n_fail: set.n_fail,
                n_dropped: set.n_dropped,
                auroc: auroc(&set.scores, &set.labels),
            }
        })
        .collect()
}

/// Mean AUROC over hourly anchors 0–14 h, skipping anchors where it is undefined.
pub fn validation_objective(
    trials: &[TrialOutcome],
    predictions: &BTreeMap<String, PredictionSeries>,
) -> Option<f64> {
    let rows = horizon_sweep(
        trials,
        predictions,
        &anchor_grid(60.0, 14.0 * 60.0),
        AnchorRule::LastAtOrBefore,
        CohortFilter::All,
    );
    let defined: Vec<f64> = rows.iter().filter_map(|r| r.auroc).collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Linear interpolation between order statistics at position `(n-1)q`.
pub fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtfBin {
    pub bin_start_h: f64,
    pub count: usize,
    pub cdf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TtfReport {
    pub n_failures: usize,
    pub bins: Vec<TtfBin>,
    pub median_h: Option<f64>,
    pub p80_h: Option<f64>,
}

/// Hours from period start to escalation for failed trials, binned hourly.
pub fn time_to_failure_stats(trials: &[TrialOutcome]) -> TtfReport {
    let mut hours: Vec<f64> = trials
        .iter()
        .filter(|t| t.failure)
        .map(|t| (t.resolution_time - t.period_start) / 60.0)
        .collect();
    ttf_from_hours(&mut hours)
}

pub fn ttf_from_hours(hours: &mut [f64]) -> TtfReport {
    if hours.is_empty() {
        return TtfReport::default();
    }
    hours.sort_by(f64::total_cmp);
    let n_bins = (hours[hours.len() - 1].floor() as usize + 1).max(24);
    let mut counts = vec![0usize; n_bins];
    for &h in hours.iter() {
        counts[(h.max(0.0).floor() as usize).min(n_bins - 1)] += 1;
    }
    let mut cum = 0;
    let bins = counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| {
            cum += count;
            TtfBin {
                bin_start_h: i as f64,
                count,
                cdf: cum as f64 / hours.len() as f64,
            }
        })
        .collect();
    TtfReport {
        n_failures: hours.len(),
        bins,
        median_h: quantile(hours, 0.5),
        p80_h: quantile(hours, 0.8),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_sweep_csv(w: impl Write, rows: &[SweepRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["t_min", "n_eligible", "n_fail", "n_dropped", "auroc"])?;
    for r in rows {
        out.write_record([
            r.t_min.to_string(),
            r.n_eligible.to_string(),
            r.n_fail.to_string(),
            r.n_dropped.to_string(),
            opt(r.auroc),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_roc_csv(w: impl Write, points: &[RocPoint]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["threshold", "fpr", "tpr"])?;
    for p in points {
        out.write_record([
            p.threshold.to_string(),
            p.fpr.to_string(),
            p.tpr.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_operating_csv(w: impl Write, rows: &[OperatingPoint]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["sens", "spec", "ppv", "npv", "target", "threshold"])?;
    for r in rows {
        out.write_record([
            r.sensitivity.to_string(),
            r.specificity.to_string(),
            opt(r.ppv),
            opt(r.npv),
            r.target_sensitivity.to_string(),
            r.threshold.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_ttf_csv(w: impl Write, report: &TtfReport) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["bin", "count", "cdf"])?;
    for b in &report.bins {
        out.write_record([
            b.bin_start_h.to_string(),
            b.count.to_string(),
            b.cdf.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct PredictionLine {
    trial_id: String,
    time: f64,
    probability: f64,
}

/// JSON lines, one `(trial_id, time, probability)` per row.
pub fn write_predictions(mut w: impl Write, series: &[PredictionSeries]) -> Result<()> {
    for s in series {
        for (&time, &probability) in s.times.iter().zip(&s.probs) {
            let line = PredictionLine {
                trial_id: s.trial_id.clone(),
                time,
                probability,
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(r: impl Read) -> Result<BTreeMap<String, PredictionSeries>> {
    let mut grouped: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for line in BufReader::new(r).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: PredictionLine = serde_json::from_str(&line)?;
        let e = grouped.entry(p.trial_id).or_default();
        e.0.push(p.time);
        e.1.push(p.probability);
    }
    grouped
        .into_iter()
        .map(|(id, (times, probs))| Ok((id.clone(), PredictionSeries::new(id, times, probs)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(id: &str, res_h: f64, failure: bool) -> TrialOutcome {
        TrialOutcome {
            trial_id: id.into(),
            period_start: 100.0,
            resolution_time: 100.0 + res_h * 60.0,
            failure,
            respiratory: id.starts_with('r'),
        }
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.9], &[false, true]), Some(1.0));
        assert_eq!(auroc(&[0.3; 4], &[false, true, false, true]), Some(0.5));
        assert_eq!(
            auroc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]),
            Some(0.75)
        );
        assert_eq!(auroc(&[0.1, 0.2], &[true, true]), None);
    }

    #[test]
    fn roc_separated() {
        let pts = roc_curve(&[0.2, 0.7], &[false, true]).unwrap();
        let xy: Vec<_> = pts.iter().map(|p| (p.fpr, p.tpr)).collect();
        assert_eq!(xy, vec![(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]);
    }

    #[test]
    fn eligibility_boundary() {
        let f = outcome("a", 4.5, true);
        assert!(!f.eligible_at(300.0));
        assert!(!f.eligible_at(270.0));
        assert!(f.eligible_at(240.0));
        assert!(outcome("b", 6.0, true).eligible_at(300.0));
        assert!(outcome("c", 0.01, false).eligible_at(0.0));
    }

    #[test]
    fn score_at_rules() {
        let s = PredictionSeries::new("x", vec![160.0, 214.0], vec![0.2, 0.6]).unwrap();
        assert_eq!(
            score_at(&s, 120.0, 100.0, AnchorRule::LastAtOrBefore),
            Some(0.6)
        );
        assert_eq!(score_at(&s, 0.0, 100.0, AnchorRule::LastAtOrBefore), None);
        assert_eq!(
            score_at(&s, 60.0, 100.0, AnchorRule::LastAtOrBefore),
            Some(0.2)
        );
        let near = AnchorRule::Nearest { window: 15.0 };
        assert_eq!(score_at(&s, 50.0, 100.0, near), Some(0.2));
        assert_eq!(score_at(&s, 30.0, 100.0, near), None);
    }

    #[test]
    fn operating_perfect_classifier() {
        let ops = operating_points(
            &[0.1, 0.2, 0.8, 0.9],
            &[false, false, true, true],
            &SENSITIVITY_TARGETS,
        )
        .unwrap();
        assert!(ops
            .iter()
            .all(|o| o.specificity == 1.0 && o.ppv == Some(1.0)));
        let full = ops.last().unwrap();
        assert_eq!((full.threshold, full.npv), (0.8, Some(1.0)));
    }

    #[test]
    fn ttf_quantiles() {
        let r = ttf_from_hours(&mut [2.0, 8.0]);
        assert_eq!(r.median_h, Some(5.0));
        assert_eq!(ttf_from_hours(&mut [3.0]).median_h, Some(3.0));
        assert_eq!(ttf_from_hours(&mut []).median_h, None);
        assert_eq!(r.bins.len(), 24);
        assert_eq!(r.bins[23].cdf, 1.0);
    }

    #[test]
    fn sweep_counts_non_increasing() {
        let trials: Vec<_> = (0..30)
            .map(|i| outcome(&format!("t{i}"), (i as f64 * 0.83) % 24.0 + 0.1, i % 3 == 0))
            .collect();
        let preds: BTreeMap<_, _> = trials
            .iter()
            .map(|t| {
                let s = PredictionSeries::new(t.trial_id.clone(), vec![100.0], vec![0.5]).unwrap();
                (t.trial_id.clone(), s)
            })
            .collect();
        let grid = anchor_grid(30.0, 1440.0);
        assert_eq!(grid.len(), 49);
        assert_eq!(anchor_grid(60.0, 840.0).len(), 15);
        let rows = horizon_sweep(
            &trials,
            &preds,
            &grid,
            AnchorRule::LastAtOrBefore,
            CohortFilter::All,
        );
        assert!(rows.windows(2).all(|w| w[0].n_eligible >= w[1].n_eligible));
        assert_eq!(rows[0].n_eligible, 30);
    }

    #[test]
    fn predictions_round_trip() {
        let s = vec![PredictionSeries::new("a", vec![1.5, 2.0], vec![0.1, 1.0 / 3.0]).unwrap()];
        let mut buf = Vec::new();
        write_predictions(&mut buf, &s).unwrap();
        let back = read_predictions(buf.as_slice()).unwrap();
        assert_eq!(back["a"], s[0]);
    }
}
