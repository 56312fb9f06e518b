//! HFNC periods, trials, outcomes, censoring and per-time-step labels.
//!
//! A period opens at an HFNC initiation when HFNC has been off for more than
//! 24 hours (or was never used) and at least 30 minutes have passed since the
//! last stop of BiPAP, NIMV or intubation. It lasts 24 hours or until
//! discharge. Each non-censored period yields one trial whose data slice runs
//! from admission to the end of that period.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{Disposition, Episode, Modality, SupportAction, TAG_APNEA};
use crate::error::{Error, Result};

pub const PERIOD_MINUTES: f64 = 1440.0;
pub const STEPDOWN_GUARD_MINUTES: f64 = 30.0;
pub const MAX_AGE_YEARS: f64 = 19.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Failure,
    Success,
    Censored,
}

impl Outcome {
    pub fn label(self) -> Option<f64> {
        match self {
            Outcome::Failure => Some(1.0),
            Outcome::Success => Some(0.0),
            Outcome::Censored => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentConfig {
    pub period_minutes: f64,
    pub stepdown_guard_minutes: f64,
    /// Outcome for a period cut short by in-window death.
    pub died_in_window: Outcome,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            period_minutes: PERIOD_MINUTES,
            stepdown_guard_minutes: STEPDOWN_GUARD_MINUTES,
            died_in_window: Outcome::Censored,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HfncPeriod {
    pub episode_id: String,
    pub start: f64,
    pub end: f64,
    pub outcome: Outcome,
    pub resolution_time: f64,
}

impl HfncPeriod {
    /// Minutes from period start to the event that settled the outcome.
    pub fn time_to_resolution(&self) -> f64 {
        self.resolution_time - self.start
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelSeries {
    pub times: Vec<f64>,
    /// 0, 1, or NaN for steps before the target period.
    pub labels: Vec<f64>,
}

impl LabelSeries {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn labeled(&self) -> usize {
        self.labels.iter().filter(|l| !l.is_nan()).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HfncTrial {
    pub episode_id: String,
    pub patient_id: String,
    pub trial_id: String,
    pub slice_end: f64,
    pub target: HfncPeriod,
    pub labels: LabelSeries,
    pub respiratory: bool,
}

/// HFNC periods of an episode, with outcomes assigned.
pub fn derive_periods(episode: &Episode, cfg: &SegmentConfig) -> Vec<HfncPeriod> {
    let discharge = episode.header.discharge_time;
    let mut last_hfnc_stop: Option<f64> = None;
    let mut last_stepdown: Option<f64> = None;
    let mut periods: Vec<HfncPeriod> = Vec::new();

    for ev in &episode.support_events {
        match (ev.modality, ev.action) {
            (Modality::Hfnc, SupportAction::Start) => {
                let hfnc_free = last_hfnc_stop.is_none_or(|s| ev.time - s > cfg.period_minutes);
                let prior_ended = periods
                    .last()
                    .is_none_or(|p| ev.time >= p.start + cfg.period_minutes);
                let guard_ok =
                    last_stepdown.is_none_or(|s| ev.time - s >= cfg.stepdown_guard_minutes);
                if hfnc_free && prior_ended && guard_ok && ev.time <= discharge {
                    periods.push(assign_outcome(ev.time, episode, cfg));
                }
            }
            (Modality::Hfnc, SupportAction::Stop) => last_hfnc_stop = Some(ev.time),
            (_, SupportAction::Stop) => last_stepdown = Some(ev.time),
            (_, SupportAction::Start) => {}
        }
    }
    periods
}

/// Outcome of the period opened at `start`: failure at the first escalation
/// inside the window; otherwise in-window discharge maps the disposition;
/// otherwise success at the end of the window.
pub fn assign_outcome(start: f64, episode: &Episode, cfg: &SegmentConfig) -> HfncPeriod {
    let discharge = episode.header.discharge_time;
    let nominal_end = start + cfg.period_minutes;
    let end = nominal_end.min(discharge);
    let escalation = episode.support_events.iter().find(|e| {
        e.action == SupportAction::Start
            && e.modality.is_escalation()
            && e.time >= start
            && e.time <= end
    });
    let (outcome, resolution_time) = match escalation {
        Some(e) => (Outcome::Failure, e.time),
        None if discharge < nominal_end => (
            disposition_outcome(episode.header.disposition, cfg),
            discharge,
        ),
        None => (Outcome::Success, nominal_end),
    };
    HfncPeriod {
        episode_id: episode.header.episode_id.clone(),
        start,
        end,
        outcome,
        resolution_time,
    }
}

fn disposition_outcome(d: Disposition, cfg: &SegmentConfig) -> Outcome {
    match d {
        Disposition::GeneralCareFloor | Disposition::Home | Disposition::StepDownUnit => {
            Outcome::Success
        }
        Disposition::OperatingRoom
        | Disposition::AnotherHospitalICU
        | Disposition::AnotherICUCurrentHospital
        | Disposition::StillAdmitted => Outcome::Censored,
        Disposition::Died => cfg.died_in_window,
    }
}

/// Charting times of the episode at or before `until`, deduplicated.
pub fn charting_times(episode: &Episode, until: f64) -> Vec<f64> {
    let mut times: Vec<f64> = episode
        .records
        .iter()
        .map(|r| r.time)
        .take_while(|&t| t <= until)
        .collect();
    times.dedup();
    times
}

/// NaN before the period, the outcome label from period start through
/// resolution, and nothing after resolution.
pub fn label_timesteps(target: &HfncPeriod, charting_times: &[f64]) -> LabelSeries {
    let y = target.outcome.label().unwrap_or(f64::NAN);
    let mut out = LabelSeries::default();
    for &t in charting_times {
        if t > target.resolution_time {
            break;
        }
        out.times.push(t);
        out.labels.push(if t < target.start { f64::NAN } else { y });
    }
    out
}

/// One trial per non-censored period.
pub fn build_trials(episode: &Episode, periods: &[HfncPeriod]) -> Vec<HfncTrial> {
    periods
        .iter()
        .enumerate()
        .filter(|(_, p)| p.outcome != Outcome::Censored)
        .map(|(i, p)| {
            let times = charting_times(episode, p.end);
            HfncTrial {
                episode_id: episode.id().to_string(),
                patient_id: episode.patient_id().to_string(),
                trial_id: format!("{}-t{}", episode.id(), i + 1),
                slice_end: p.end,
                target: p.clone(),
                labels: label_timesteps(p, &times),
                respiratory: episode.is_respiratory(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExclusionReason {
    #[serde(rename = "age>=19")]
    AgeAtLeast19,
    #[serde(rename = "apnea")]
    Apnea,
    #[serde(rename = "DNR/DNI")]
    DnrDni,
    #[serde(rename = "OR-truncated")]
    OrTruncated,
    #[serde(rename = "ambiguous-disposition")]
    AmbiguousDisposition,
    #[serde(rename = "no-HFNC")]
    NoHfnc,
}

impl ExclusionReason {
    pub fn as_str(self) -> &'static str {
        match self {
            ExclusionReason::AgeAtLeast19 => "age>=19",
            ExclusionReason::Apnea => "apnea",
            ExclusionReason::DnrDni => "DNR/DNI",
            ExclusionReason::OrTruncated => "OR-truncated",
            ExclusionReason::AmbiguousDisposition => "ambiguous-disposition",
            ExclusionReason::NoHfnc => "no-HFNC",
        }
    }
}

impl fmt::Display for ExclusionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionReport {
    pub episode_id: String,
    /// `None` means the episode is included.
    pub reason: Option<ExclusionReason>,
}

impl ExclusionReport {
    pub fn included(&self) -> bool {
        self.reason.is_none()
    }
}

/// First matching exclusion rule, in the fixed order of [`ExclusionReason`].
pub fn apply_exclusions(episode: &Episode, periods: &[HfncPeriod]) -> ExclusionReport {
    let h = &episode.header;
    let censored = |pred: fn(Disposition) -> bool| {
        periods
            .iter()
            .any(|p| p.outcome == Outcome::Censored && pred(h.disposition))
    };
    let reason = if h.age_at_admission >= MAX_AGE_YEARS {
        Some(ExclusionReason::AgeAtLeast19)
    } else if episode.has_tag(TAG_APNEA) {
        Some(ExclusionReason::Apnea)
    } else if !h.care_flags.is_empty() {
        Some(ExclusionReason::DnrDni)
    } else if censored(|d| d == Disposition::OperatingRoom) {
        Some(ExclusionReason::OrTruncated)
    } else if censored(|d| d != Disposition::OperatingRoom) {
        Some(ExclusionReason::AmbiguousDisposition)
    } else if periods.is_empty() {
        Some(ExclusionReason::NoHfnc)
    } else {
        None
    };
    ExclusionReport {
        episode_id: h.episode_id.clone(),
        reason,
    }
}

#[derive(Debug, Clone, Default)]
pub struct Segmentation {
    pub periods: BTreeMap<String, Vec<HfncPeriod>>,
    pub exclusions: Vec<ExclusionReport>,
    pub trials: Vec<HfncTrial>,
}

/// Runs period derivation, exclusions and trial construction over a cohort.
pub fn segment_cohort(episodes: &[Episode], cfg: &SegmentConfig) -> Segmentation {
    let mut out = Segmentation::default();
    for ep in episodes {
        let periods = derive_periods(ep, cfg);
        let report = apply_exclusions(ep, &periods);
        if report.included() {
            out.trials.extend(build_trials(ep, &periods));
        }
        out.exclusions.push(report);
        out.periods.insert(ep.id().to_string(), periods);
    }
    out
}

pub fn write_exclusions(writer: impl Write, reports: &[ExclusionReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["episode_id", "decision", "reason"])?;
    for r in reports {
        let (decision, reason) = match r.reason {
            None => ("included", ""),
            Some(x) => ("excluded", x.as_str()),
        };
        w.write_record([r.episode_id.as_str(), decision, reason])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Training,
    Validation,
    Test,
}

/// Patient-level three-way split.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CohortSplit {
    pub assignment: BTreeMap<String, Partition>,
}

impl CohortSplit {
    pub fn partition_of(&self, patient_id: &str) -> Option<Partition> {
        self.assignment.get(patient_id).copied()
    }

    pub fn count(&self, part: Partition) -> usize {
        self.assignment.values().filter(|&&p| p == part).count()
    }
}

/// Shuffles distinct patients with `seed` and cuts the list at the rounded
/// ratio boundaries. No stratification.
pub fn split_cohort(trials: &[HfncTrial], ratios: [f64; 3], seed: u64) -> Result<CohortSplit> {
    let patients: BTreeSet<&str> = trials.iter().map(|t| t.patient_id.as_str()).collect();
    split_patients(
        patients.into_iter().map(str::to_string).collect(),
        ratios,
        seed,
    )
}

pub fn split_patients(patients: Vec<String>, ratios: [f64; 3], seed: u64) -> Result<CohortSplit> {
    if patients.is_empty() {
        return Err(Error::Empty("cohort"));
    }
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    let mut ids: Vec<String> = patients
        .into_iter()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ids.len();
    let n_train = ((n as f64) * ratios[0]).round() as usize;
    let n_val = (((n as f64) * ratios[1]).round() as usize).min(n - n_train.min(n));
    let mut assignment = BTreeMap::new();
    for (i, id) in ids.into_iter().enumerate() {
        let part = if i < n_train {
            Partition::Training
        } else if i < n_train + n_val {
            Partition::Validation
        } else {
            Partition::Test
        };
        assignment.insert(id, part);
    }
    Ok(CohortSplit { assignment })
}

/// One line of the trial manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialManifestRow {
    pub episode_id: String,
    pub patient_id: String,
    pub trial_id: String,
    pub period_start: f64,
    pub period_end: f64,
    pub outcome: Outcome,
    pub resolution_time: f64,
    pub partition: Option<Partition>,
    pub respiratory: bool,
}

impl TrialManifestRow {
    pub fn new(trial: &HfncTrial, split: Option<&CohortSplit>) -> Self {
        Self {
            episode_id: trial.episode_id.clone(),
            patient_id: trial.patient_id.clone(),
            trial_id: trial.trial_id.clone(),
            period_start: trial.target.start,
            period_end: trial.target.end,
            outcome: trial.target.outcome,
            resolution_time: trial.target.resolution_time,
            partition: split.and_then(|s| s.partition_of(&trial.patient_id)),
            respiratory: trial.respiratory,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{EpisodeHeader, SupportEvent};
    use std::collections::BTreeSet;

    fn episode(
        events: &[(f64, Modality, SupportAction)],
        discharge: f64,
        disp: Disposition,
    ) -> Episode {
        Episode {
            header: EpisodeHeader {
                episode_id: "e1".into(),
                patient_id: "p1".into(),
                age_at_admission: 3.0,
                sex: "M".into(),
                diagnosis_tags: BTreeSet::new(),
                care_flags: BTreeSet::new(),
                disposition: disp,
                discharge_time: discharge,
            },
            records: vec![],
            support_events: events
                .iter()
                .map(|&(time, modality, action)| SupportEvent {
                    time,
                    modality,
                    action,
                })
                .collect(),
        }
    }

    use Modality::*;
    use SupportAction::*;

    #[test]
    fn restart_within_period_is_same_period() {
        let ep = episode(
            &[
                (0.0, Hfnc, Start),
                (120.0, Hfnc, Stop),
                (180.0, Hfnc, Start),
            ],
            5000.0,
            Disposition::Home,
        );
        let p = derive_periods(&ep, &SegmentConfig::default());
        assert_eq!(p.len(), 1);
        assert_eq!((p[0].start, p[0].end), (0.0, 1440.0));
    }

    #[test]
    fn restart_after_24h_off_opens_new_period() {
        let ep = episode(
            &[
                (0.0, Hfnc, Start),
                (120.0, Hfnc, Stop),
                (120.0 + 1441.0, Hfnc, Start),
            ],
            9000.0,
            Disposition::Home,
        );
        let p = derive_periods(&ep, &SegmentConfig::default());
        assert_eq!(
            p.iter().map(|p| p.start).collect::<Vec<_>>(),
            vec![0.0, 1561.0]
        );
    }

    #[test]
    fn stepdown_guard_blocks_initiation() {
        let ep = episode(
            &[
                (0.0, Intubation, Start),
                (100.0, Intubation, Stop),
                (110.0, Hfnc, Start),
            ],
            5000.0,
            Disposition::Home,
        );
        assert!(derive_periods(&ep, &SegmentConfig::default()).is_empty());
        let ok = episode(
            &[
                (0.0, Intubation, Start),
                (100.0, Intubation, Stop),
                (130.0, Hfnc, Start),
            ],
            5000.0,
            Disposition::Home,
        );
        assert_eq!(derive_periods(&ok, &SegmentConfig::default()).len(), 1);
    }

    #[test]
    fn escalation_is_failure() {
        let ep = episode(
            &[
                (100.0, Hfnc, Start),
                (460.0, Hfnc, Stop),
                (460.0, Bipap, Start),
            ],
            5000.0,
            Disposition::Home,
        );
        let p = derive_periods(&ep, &SegmentConfig::default());
        assert_eq!(p[0].outcome, Outcome::Failure);
        assert_eq!(p[0].resolution_time, 100.0 + 360.0);
    }

    #[test]
    fn in_window_discharge_maps_disposition() {
        let home = episode(&[(0.0, Hfnc, Start)], 600.0, Disposition::Home);
        let p = derive_periods(&home, &SegmentConfig::default());
        assert_eq!(
            (p[0].outcome, p[0].resolution_time, p[0].end),
            (Outcome::Success, 600.0, 600.0)
        );

        let or = episode(&[(0.0, Hfnc, Start)], 300.0, Disposition::OperatingRoom);
        let p = derive_periods(&or, &SegmentConfig::default());
        assert_eq!(p[0].outcome, Outcome::Censored);
        assert_eq!(
            apply_exclusions(&or, &p).reason,
            Some(ExclusionReason::OrTruncated)
        );
        assert!(build_trials(&or, &p).is_empty());

        let died = episode(&[(0.0, Hfnc, Start)], 300.0, Disposition::Died);
        let p = derive_periods(&died, &SegmentConfig::default());
        assert_eq!(p[0].outcome, Outcome::Censored);
        assert_eq!(
            apply_exclusions(&died, &p).reason,
            Some(ExclusionReason::AmbiguousDisposition)
        );
    }

    #[test]
    fn full_window_success() {
        let ep = episode(&[(0.0, Hfnc, Start)], 3000.0, Disposition::Died);
        let p = derive_periods(&ep, &SegmentConfig::default());
        assert_eq!(
            (p[0].outcome, p[0].resolution_time),
            (Outcome::Success, 1440.0)
        );
    }

    #[test]
    fn labels_follow_period() {
        let period = HfncPeriod {
            episode_id: "e".into(),
            start: 100.0,
            end: 1540.0,
            outcome: Outcome::Failure,
            resolution_time: 400.0,
        };
        let s = label_timesteps(&period, &[0.0, 50.0, 100.0, 300.0, 400.0, 500.0]);
        assert_eq!(s.times, vec![0.0, 50.0, 100.0, 300.0, 400.0]);
        assert!(s.labels[0].is_nan() && s.labels[1].is_nan());
        assert_eq!(&s.labels[2..], &[1.0, 1.0, 1.0]);

        let ok = HfncPeriod {
            outcome: Outcome::Success,
            resolution_time: 1540.0,
            ..period
        };
        let s = label_timesteps(&ok, &[200.0, 1540.0, 1600.0]);
        assert_eq!(s.labels, vec![0.0, 0.0]);
    }

    #[test]
    fn two_periods_two_trials() {
        let mut ep = episode(
            &[
                (10.0, Hfnc, Start),
                (200.0, Hfnc, Stop),
                (2000.0, Hfnc, Start),
            ],
            6000.0,
            Disposition::Home,
        );
        ep.records = [0.0, 10.0, 500.0, 1900.0, 2100.0, 3000.0, 3500.0]
            .iter()
            .map(|&t| crate::catalog::ObservationRecord {
                episode_id: "e1".into(),
                time: t,
                variable: "hr".into(),
                value: 1.0,
            })
            .collect();
        let periods = derive_periods(&ep, &SegmentConfig::default());
        let trials = build_trials(&ep, &periods);
        assert_eq!(trials.len(), 2);
        let t2 = &trials[1];
        assert_eq!(t2.slice_end, 3440.0);
        assert_eq!(
            t2.labels.times,
            vec![0.0, 10.0, 500.0, 1900.0, 2100.0, 3000.0]
        );
        // period 1 data is present but unlabeled
        assert!(t2.labels.labels[..4].iter().all(|l| l.is_nan()));
        assert_eq!(&t2.labels.labels[4..], &[0.0, 0.0]);
    }

    #[test]
    fn exclusion_order() {
        let mut ep = episode(&[(0.0, Hfnc, Start)], 3000.0, Disposition::Home);
        ep.header.age_at_admission = 19.0;
        ep.header.diagnosis_tags.insert(TAG_APNEA.into());
        let p = derive_periods(&ep, &SegmentConfig::default());
        assert_eq!(
            apply_exclusions(&ep, &p).reason,
            Some(ExclusionReason::AgeAtLeast19)
        );
        ep.header.age_at_admission = 18.5;
        assert_eq!(
            apply_exclusions(&ep, &p).reason,
            Some(ExclusionReason::Apnea)
        );
        ep.header.diagnosis_tags.clear();
        assert!(apply_exclusions(&ep, &p).included());
        assert_eq!(
            apply_exclusions(&ep, &[]).reason,
            Some(ExclusionReason::NoHfnc)
        );
    }

    fn trial_for(patient: &str, n: usize) -> HfncTrial {
        HfncTrial {
            episode_id: format!("{patient}-e{n}"),
            patient_id: patient.into(),
            trial_id: format!("{patient}-{n}"),
            slice_end: 0.0,
            target: HfncPeriod {
                episode_id: String::new(),
                start: 0.0,
                end: 0.0,
                outcome: Outcome::Success,
                resolution_time: 0.0,
            },
            labels: LabelSeries::default(),
            respiratory: false,
        }
    }

    #[test]
    fn split_counts_and_determinism() {
        let trials: Vec<_> = (0..637)
            .map(|i| trial_for(&format!("p{i:04}"), 0))
            .collect();
        let ratios = [341.0 / 637.0, 138.0 / 637.0, 158.0 / 637.0];
        let a = split_cohort(&trials, ratios, 7).unwrap();
        let b = split_cohort(&trials, ratios, 7).unwrap();
        assert_eq!(a, b);
        assert!((a.count(Partition::Training) as i64 - 341).abs() <= 1);
        assert!((a.count(Partition::Validation) as i64 - 138).abs() <= 1);
        assert!((a.count(Partition::Test) as i64 - 158).abs() <= 1);
        assert!(split_cohort(&[], ratios, 1).is_err());
    }
}
