//! Synthetic PICU cohorts with a tunable planted signal.
//!
//! Each HFNC period carries a latent severity. Failing periods drift the
//! observable vitals and labs in proportion to the signal strength `s`;
//! with `s = 0` every observation is independent of the outcome. Period
//! structure is planned explicitly and recorded in a manifest so the
//! segmentation engine can be checked against ground truth.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal as NormalDist};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::catalog::{
    assemble_episodes, write_headers, write_observations, CareFlag, Catalog, Disposition, Episode,
    EpisodeHeader, Modality, ObservationRecord, VariableKind, VariableSpec, TAG_APNEA,
    TAG_RESPIRATORY,
};
use crate::error::{Error, Result};
use crate::trial::{ExclusionReason, Outcome, PERIOD_MINUTES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Patients contributing at least one included trial.
    pub n_patients: usize,
    /// Included trials, exactly.
    pub trials_target: usize,
    pub failure_rate: f64,
    pub respiratory_fraction: f64,
    /// Share of single-period episodes whose HFNC is stopped and restarted inside the period.
    pub multi_initiation_fraction: f64,
    /// Share of successful single-period episodes discharged favorably inside the window.
    pub in_window_discharge_fraction: f64,
    /// Extra patients, relative to `n_patients`, whose episode is excluded.
    pub censoring_fraction: f64,
    pub charting_min_minutes: f64,
    pub charting_max_minutes: f64,
    pub ttf_median_hours: f64,
    pub ttf_p80_hours: f64,
    pub signal_strength: f64,
    pub mortality_rate: f64,
    pub artifact_rate: f64,
    pub rare_drug_prevalence: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 700,
            trials_target: 834,
            failure_rate: 0.21,
            respiratory_fraction: 0.706,
            multi_initiation_fraction: 0.1,
            in_window_discharge_fraction: 0.1,
            censoring_fraction: 0.08,
            charting_min_minutes: 1.0,
            charting_max_minutes: 240.0,
            ttf_median_hours: 7.6,
            ttf_p80_hours: 14.1,
            signal_strength: 0.5,
            mortality_rate: 0.06,
            artifact_rate: 0.005,
            rare_drug_prevalence: 0.005,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("failure_rate", self.failure_rate),
            ("respiratory_fraction", self.respiratory_fraction),
            ("multi_initiation_fraction", self.multi_initiation_fraction),
            (
                "in_window_discharge_fraction",
                self.in_window_discharge_fraction,
            ),
            ("censoring_fraction", self.censoring_fraction),
            ("signal_strength", self.signal_strength),
            ("mortality_rate", self.mortality_rate),
            ("artifact_rate", self.artifact_rate),
            ("rare_drug_prevalence", self.rare_drug_prevalence),
        ];
        for (name, v) in rates {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Invalid(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if self.n_patients == 0 {
            return Err(Error::Invalid("n_patients must be positive".into()));
        }
        if self.trials_target < self.n_patients {
            return Err(Error::Invalid(format!(
                "infeasible: {} trials cannot cover {} patients with at least one trial each",
                self.trials_target, self.n_patients
            )));
        }
        if !(self.charting_min_minutes >= 1.0
            && self.charting_max_minutes >= self.charting_min_minutes)
        {
            return Err(Error::Invalid(
                "charting interval bounds must satisfy 1 ≤ min ≤ max".into(),
            ));
        }
        if !(0.0 < self.ttf_median_hours
            && self.ttf_median_hours < self.ttf_p80_hours
            && self.ttf_p80_hours < 24.0)
        {
            return Err(Error::Invalid(
                "need 0 < ttf median < ttf p80 < 24 h".into(),
            ));
        }
        Ok(())
    }
}

/// Log-normal restricted to `(0, upper)` hours.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncatedLogNormal {
    pub mu: f64,
    pub sigma: f64,
    pub upper: f64,
}

impl TruncatedLogNormal {
    fn std() -> Normal {
        Normal::new(0.0, 1.0).expect("standard normal")
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        let n = Self::std();
        let top = n.cdf((self.upper.ln() - self.mu) / self.sigma);
        (n.cdf((x.ln() - self.mu) / self.sigma) / top).min(1.0)
    }

    /// Inverse CDF.
    pub fn quantile(&self, u: f64) -> f64 {
        let n = Self::std();
        let top = n.cdf((self.upper.ln() - self.mu) / self.sigma);
        (self.mu + self.sigma * n.inverse_cdf(u * top)).exp()
    }

    /// Fits `mu, sigma` so the truncated median and 80th percentile hit the targets.
    pub fn fit(median: f64, p80: f64, upper: f64) -> Result<Self> {
        let n = Self::std();
        let mu_for = |sigma: f64| {
            // truncated median falls as mu falls; bisect on mu
            let (mut lo, mut hi) = (median.ln() - 10.0 * sigma - 10.0, upper.ln() + 10.0 * sigma);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                let f = n.cdf((median.ln() - mid) / sigma) / n.cdf((upper.ln() - mid) / sigma);
                if f > 0.5 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        let p80_error = |sigma: f64| {
            let d = Self {
                mu: mu_for(sigma),
                sigma,
                upper,
            };
            d.cdf(p80) - 0.8
        };
        let (mut lo, mut hi) = (0.01, 10.0);
        if p80_error(lo).signum() == p80_error(hi).signum() {
            return Err(Error::Invalid(format!(
                "no truncated log-normal with median {median} and p80 {p80}"
            )));
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if p80_error(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let sigma = 0.5 * (lo + hi);
        Ok(Self {
            mu: mu_for(sigma),
            sigma,
            upper,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Plain,
    ReinitiationWithinPeriod,
    SecondPeriodAfterGap,
    StepdownGuarded,
    StepdownAfterGuard,
    InWindowDischarge,
    ExcludedAge,
    ExcludedApnea,
    ExcludedCareLimits,
    ExcludedOperatingRoom,
    ExcludedAmbiguous,
    ExcludedNoHfnc,
}

impl Scenario {
    pub const ALL: [Scenario; 12] = [
        Scenario::Plain,
        Scenario::ReinitiationWithinPeriod,
        Scenario::SecondPeriodAfterGap,
        Scenario::StepdownGuarded,
        Scenario::StepdownAfterGuard,
        Scenario::InWindowDischarge,
        Scenario::ExcludedAge,
        Scenario::ExcludedApnea,
        Scenario::ExcludedCareLimits,
        Scenario::ExcludedOperatingRoom,
        Scenario::ExcludedAmbiguous,
        Scenario::ExcludedNoHfnc,
    ];

    const EXCLUDED: [Scenario; 6] = [
        Scenario::ExcludedAge,
        Scenario::ExcludedApnea,
        Scenario::ExcludedCareLimits,
        Scenario::ExcludedOperatingRoom,
        Scenario::ExcludedAmbiguous,
        Scenario::ExcludedNoHfnc,
    ];

    fn exclusion(self) -> Option<ExclusionReason> {
        match self {
            Scenario::ExcludedAge => Some(ExclusionReason::AgeAtLeast19),
            Scenario::ExcludedApnea => Some(ExclusionReason::Apnea),
            Scenario::ExcludedCareLimits => Some(ExclusionReason::DnrDni),
            Scenario::ExcludedOperatingRoom => Some(ExclusionReason::OrTruncated),
            Scenario::ExcludedAmbiguous => Some(ExclusionReason::AmbiguousDisposition),
            Scenario::ExcludedNoHfnc => Some(ExclusionReason::NoHfnc),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestPeriod {
    pub start: f64,
    pub end: f64,
    pub outcome: Outcome,
    pub resolution_time: f64,
    pub severity: f64,
}

/// Ground truth for one generated episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEpisode {
    pub episode_id: String,
    pub patient_id: String,
    pub scenario: Scenario,
    pub exclusion: Option<ExclusionReason>,
    pub periods: Vec<ManifestPeriod>,
    pub died: bool,
}

#[derive(Debug, Clone)]
pub struct SynthCohort {
    pub config: SynthConfig,
    pub catalog: Catalog,
    pub headers: Vec<EpisodeHeader>,
    pub records: Vec<ObservationRecord>,
    pub manifest: Vec<ManifestEpisode>,
    pub coverage: BTreeMap<Scenario, usize>,
    pub ttf: TruncatedLogNormal,
}

impl SynthCohort {
    pub fn episodes(&self) -> Result<Vec<Episode>> {
        assemble_episodes(self.records.clone(), self.headers.clone(), &self.catalog)
    }

    pub fn missing_scenarios(&self) -> Vec<Scenario> {
        Scenario::ALL
            .into_iter()
            .filter(|s| !self.coverage.contains_key(s))
            .collect()
    }

    /// Writes `catalog.json`, `observations.csv`, `episodes.jsonl`,
    /// `ground_truth.jsonl` and `coverage.json`; returns the file names.
    pub fn write(&self, dir: &Path) -> Result<Vec<String>> {
        std::fs::create_dir_all(dir)?;
        self.catalog
            .to_json(BufWriter::new(File::create(dir.join("catalog.json"))?))?;
        write_observations(
            BufWriter::new(File::create(dir.join("observations.csv"))?),
            &self.records,
        )?;
        write_headers(
            BufWriter::new(File::create(dir.join("episodes.jsonl"))?),
            &self.headers,
        )?;
        let mut m = BufWriter::new(File::create(dir.join("ground_truth.jsonl"))?);
        for e in &self.manifest {
            serde_json::to_writer(&mut m, e)?;
            m.write_all(b"\n")?;
        }
        m.flush()?;
        let coverage: BTreeMap<String, usize> = self
            .coverage
            .iter()
            .map(|(k, v)| {
                (
                    serde_json::to_value(k)
                        .unwrap()
                        .as_str()
                        .unwrap()
                        .to_string(),
                    *v,
                )
            })
            .collect();
        serde_json::to_writer_pretty(File::create(dir.join("coverage.json"))?, &coverage)?;
        Ok([
            "catalog.json",
            "observations.csv",
            "episodes.jsonl",
            "ground_truth.jsonl",
            "coverage.json",
        ]
        .map(String::from)
        .to_vec())
    }
}

struct Signal {
    name: &'static str,
    kind: VariableKind,
    unit: &'static str,
    range: (f64, f64),
    mean: f64,
    sd: f64,
    weight: f64,
    group: Option<&'static str>,
}

const fn sig(
    name: &'static str,
    kind: VariableKind,
    unit: &'static str,
    range: (f64, f64),
    mean: f64,
    sd: f64,
    weight: f64,
    group: Option<&'static str>,
) -> Signal {
    Signal {
        name,
        kind,
        unit,
        range,
        mean,
        sd,
        weight,
        group,
    }
}

use VariableKind::{Demographic, Drug, Intervention, Lab, Physiologic};

const VITALS: [Signal; 9] = [
    sig(
        "heart_rate",
        Physiologic,
        "bpm",
        (20.0, 300.0),
        130.0,
        20.0,
        1.0,
        None,
    ),
    sig(
        "resp_rate",
        Physiologic,
        "/min",
        (4.0, 120.0),
        35.0,
        8.0,
        1.0,
        None,
    ),
    sig(
        "spo2",
        Physiologic,
        "%",
        (50.0, 100.0),
        94.0,
        2.5,
        -1.0,
        None,
    ),
    sig(
        "fio2",
        Physiologic,
        "fraction",
        (0.21, 1.0),
        0.45,
        0.1,
        1.0,
        None,
    ),
    sig(
        "temperature",
        Physiologic,
        "C",
        (30.0, 43.0),
        37.3,
        0.6,
        0.3,
        None,
    ),
    sig(
        "sbp_invasive",
        Physiologic,
        "mmHg",
        (30.0, 250.0),
        100.0,
        12.0,
        -0.3,
        Some("sbp"),
    ),
    sig(
        "sbp_noninvasive",
        Physiologic,
        "mmHg",
        (30.0, 250.0),
        100.0,
        12.0,
        -0.3,
        Some("sbp"),
    ),
    sig(
        "dbp_invasive",
        Physiologic,
        "mmHg",
        (15.0, 180.0),
        60.0,
        9.0,
        -0.3,
        Some("dbp"),
    ),
    sig(
        "dbp_noninvasive",
        Physiologic,
        "mmHg",
        (15.0, 180.0),
        60.0,
        9.0,
        -0.3,
        Some("dbp"),
    ),
];

const LABS: [Signal; 6] = [
    sig("pco2", Lab, "mmHg", (10.0, 150.0), 42.0, 7.0, 1.0, None),
    sig("ph", Lab, "", (6.5, 7.8), 7.38, 0.05, -1.0, None),
    sig("wbc", Lab, "10^3/uL", (0.1, 100.0), 11.0, 4.0, 0.3, None),
    sig("lactate", Lab, "mmol/L", (0.1, 30.0), 1.5, 0.6, 0.7, None),
    sig(
        "glucose",
        Lab,
        "mg/dL",
        (10.0, 1000.0),
        110.0,
        25.0,
        0.0,
        None,
    ),
    sig(
        "creatinine",
        Lab,
        "mg/dL",
        (0.05, 15.0),
        0.5,
        0.2,
        0.0,
        None,
    ),
];

const SF_RANGE: (f64, f64) = (40.0, 500.0);

/// (name, therapy max, episode prevalence, dose range)
const DRUGS: [(&str, f64, f64, (f64, f64)); 3] = [
    ("epinephrine", 1.0, 0.05, (0.02, 0.3)),
    ("furosemide", 4.0, 0.15, (0.5, 2.0)),
    ("albuterol", 20.0, 0.3, (2.5, 15.0)),
];

const RARE_DRUG: &str = "rare_drug";

/// (name, modality, therapy max, valid max)
const SUPPORT: [(&str, Modality, f64, f64); 4] = [
    ("hfnc", Modality::Hfnc, 60.0, 80.0),
    ("bipap", Modality::Bipap, 30.0, 40.0),
    ("nimv", Modality::Nimv, 30.0, 40.0),
    ("intubation", Modality::Intubation, 1.0, 1.0),
];

/// Catalog of every variable the generator emits.
pub fn default_catalog() -> Catalog {
    let mut v = Vec::new();
    let spec = |name: &str, kind, unit: &str, (lo, hi): (f64, f64)| VariableSpec {
        name: name.into(),
        kind,
        unit: unit.into(),
        valid_min: lo,
        valid_max: hi,
        therapy_max: None,
        aggregation_group: None,
        support_modality: None,
    };
    for s in VITALS.iter().chain(&LABS) {
        let mut x = spec(s.name, s.kind, s.unit, s.range);
        x.aggregation_group = s.group.map(String::from);
        v.push(x);
    }
    v.push(spec("sf_ratio", Physiologic, "", SF_RANGE));
    for (name, max, _, _) in DRUGS.iter().chain(&[(RARE_DRUG, 10.0, 0.0, (0.0, 0.0))]) {
        let mut x = spec(name, Drug, "", (0.0, max * 5.0));
        x.therapy_max = Some(*max);
        v.push(x);
    }
    for (name, m, max, valid) in SUPPORT {
        let mut x = spec(name, Intervention, "", (0.0, valid));
        x.therapy_max = Some(max);
        x.support_modality = Some(m);
        v.push(x);
    }
    v.push(spec("age_years", Demographic, "years", (0.0, 120.0)));
    v.push(spec("sex_female", Demographic, "", (0.0, 1.0)));
    Catalog::new(v)
}

#[derive(Debug, Clone)]
struct PeriodPlan {
    failure: bool,
    ttf: f64,
    severity: f64,
}

#[derive(Debug, Clone)]
struct EpisodePlan {
    patient: usize,
    scenario: Scenario,
    periods: Vec<PeriodPlan>,
}

/// One on-interval of a support modality (`off = None`: still on at discharge).
#[derive(Debug, Clone, Copy)]
struct Interval {
    var: usize,
    on: f64,
    off: Option<f64>,
}

/// Distress contribution of one planned period.
#[derive(Debug, Clone, Copy)]
struct Drift {
    start: f64,
    ttf: f64,
    severity: f64,
}

impl Drift {
    const LEAD_IN: f64 = 360.0;
    const RAMP: f64 = 1.5;
    const FADE: f64 = 720.0;

    fn at(&self, t: f64) -> f64 {
        let esc = self.start + self.ttf;
        if t < self.start - Self::LEAD_IN {
            0.0
        } else if t <= self.start {
            self.severity
        } else if t <= esc {
            self.severity + Self::RAMP * (t - self.start) / self.ttf
        } else {
            (self.severity + Self::RAMP) * (1.0 - (t - esc) / Self::FADE).max(0.0)
        }
    }
}

struct Timeline {
    intervals: Vec<Interval>,
    periods: Vec<ManifestPeriod>,
    drifts: Vec<Drift>,
    discharge: f64,
    disposition: Disposition,
    reinitiated: bool,
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    rng: ChaCha8Rng,
    ttf: TruncatedLogNormal,
    std: Normal,
}

fn minutes(x: f64) -> f64 {
    x.round()
}

impl Generator<'_> {
    fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            lo
        } else {
            self.rng.random_range(lo..hi)
        }
    }

    fn log_uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.uniform(lo.ln(), hi.ln()).exp()
    }

    fn gauss(&mut self, sd: f64) -> f64 {
        NormalDist::new(0.0, sd).expect("sd").sample(&mut self.rng)
    }

    fn failure_draw(&mut self) -> (f64, f64) {
        let u: f64 = self.rng.random_range(1e-9..1.0);
        let hours = self.ttf.quantile(u);
        let ttf = minutes(hours * 60.0).clamp(1.0, PERIOD_MINUTES - 1.0);
        // Gaussian copula: earlier failures are more severe
        let z = self.std.inverse_cdf(u);
        (ttf, (1.5 - 0.5 * z).max(0.5))
    }

    fn favorable(&mut self) -> Disposition {
        [
            Disposition::GeneralCareFloor,
            Disposition::Home,
            Disposition::StepDownUnit,
        ][self.rng.random_range(0..3)]
    }

    fn escalation(&mut self) -> usize {
        match self.rng.random_range(0..10) {
            0..=5 => 1,
            6 | 7 => 2,
            _ => 3,
        }
    }

    /// Builds support intervals, planned periods and discharge for an episode.
    fn timeline(&mut self, plan: &EpisodePlan) -> Timeline {
        let mut intervals = Vec::new();
        let mut starts = Vec::new();
        let mut cursor = minutes(self.uniform(30.0, 720.0));
        let in_window = matches!(
            plan.scenario,
            Scenario::InWindowDischarge
                | Scenario::ExcludedOperatingRoom
                | Scenario::ExcludedAmbiguous
        );

        match plan.scenario {
            Scenario::StepdownGuarded | Scenario::StepdownAfterGuard => {
                let off = minutes(self.uniform(120.0, 720.0));
                intervals.push(Interval {
                    var: 1,
                    on: 0.0,
                    off: Some(off),
                });
                if plan.scenario == Scenario::StepdownGuarded {
                    let on = off + minutes(self.uniform(5.0, 29.0));
                    let hfnc_off = on + minutes(self.uniform(120.0, 720.0));
                    intervals.push(Interval {
                        var: 0,
                        on,
                        off: Some(hfnc_off),
                    });
                    cursor = hfnc_off + PERIOD_MINUTES + minutes(self.uniform(60.0, 600.0));
                } else {
                    cursor = off + minutes(self.uniform(30.0, 180.0));
                }
            }
            Scenario::ExcludedNoHfnc => {
                if self.rng.random_bool(0.5) {
                    let off = minutes(self.uniform(120.0, 1440.0));
                    intervals.push(Interval {
                        var: 1,
                        on: 60.0,
                        off: Some(60.0 + off),
                    });
                }
                let discharge = minutes(self.uniform(1440.0, 4320.0));
                return Timeline {
                    intervals,
                    periods: Vec::new(),
                    drifts: Vec::new(),
                    discharge,
                    disposition: self.favorable(),
                    reinitiated: false,
                };
            }
            _ => {}
        }

        let mut periods = Vec::new();
        let mut drifts = Vec::new();
        let mut reinitiated = false;
        let mut last_end = 0.0f64;
        let n = plan.periods.len();
        for (i, p) in plan.periods.iter().enumerate() {
            let start = cursor;
            starts.push(start);
            let is_last = i + 1 == n;
            if p.failure {
                let esc = start + p.ttf;
                reinitiated |=
                    self.hfnc_interval(&mut intervals, plan.scenario, start, Some(esc), p.ttf);
                let var = self.escalation();
                let esc_off = esc + minutes(self.uniform(240.0, 1200.0));
                intervals.push(Interval {
                    var,
                    on: esc,
                    off: Some(esc_off),
                });
                last_end = last_end.max(esc_off);
                if is_last && self.rng.random_bool(0.5) {
                    // step back down to HFNC; too soon to open a new period
                    let on = esc_off + minutes(self.uniform(0.0, 120.0));
                    let off = on + minutes(self.uniform(120.0, 720.0));
                    intervals.push(Interval {
                        var: 0,
                        on,
                        off: Some(off),
                    });
                    last_end = last_end.max(off);
                }
                drifts.push(Drift {
                    start,
                    ttf: p.ttf,
                    severity: p.severity,
                });
                periods.push(ManifestPeriod {
                    start,
                    end: start + PERIOD_MINUTES,
                    outcome: Outcome::Failure,
                    resolution_time: esc,
                    severity: p.severity,
                });
                cursor = esc + minutes(self.uniform(60.0, 720.0));
            } else if in_window && is_last {
                let discharge = start + minutes(self.uniform(240.0, PERIOD_MINUTES - 60.0));
                reinitiated |= self.hfnc_interval(
                    &mut intervals,
                    plan.scenario,
                    start,
                    None,
                    discharge - start,
                );
                periods.push(ManifestPeriod {
                    start,
                    end: discharge,
                    outcome: match plan.scenario {
                        Scenario::InWindowDischarge => Outcome::Success,
                        _ => Outcome::Censored,
                    },
                    resolution_time: discharge,
                    severity: 0.0,
                });
                last_end = discharge;
                cursor = discharge;
            } else {
                let off = start + PERIOD_MINUTES + minutes(self.uniform(0.0, 720.0));
                reinitiated |= self.hfnc_interval(
                    &mut intervals,
                    plan.scenario,
                    start,
                    Some(off),
                    PERIOD_MINUTES,
                );
                periods.push(ManifestPeriod {
                    start,
                    end: start + PERIOD_MINUTES,
                    outcome: Outcome::Success,
                    resolution_time: start + PERIOD_MINUTES,
                    severity: 0.0,
                });
                last_end = last_end.max(off);
                cursor = off;
            }
            if !is_last {
                let hfnc_off = intervals
                    .iter()
                    .filter(|iv| iv.var == 0)
                    .filter_map(|iv| iv.off)
                    .fold(0.0, f64::max);
                cursor = (hfnc_off + PERIOD_MINUTES + minutes(self.uniform(60.0, 720.0)))
                    .max(last_end + 60.0);
            }
        }

        let (discharge, disposition) = if in_window {
            let d = match plan.scenario {
                Scenario::InWindowDischarge => self.favorable(),
                Scenario::ExcludedOperatingRoom => Disposition::OperatingRoom,
                _ => [
                    Disposition::StillAdmitted,
                    Disposition::AnotherICUCurrentHospital,
                    Disposition::AnotherHospitalICU,
                    Disposition::Died,
                ][self.rng.random_range(0..4)],
            };
            (last_end, d)
        } else {
            let last_start = *starts.last().unwrap();
            let floor = last_end.max(last_start + PERIOD_MINUTES);
            let d = if self.rng.random_bool(self.cfg.mortality_rate) {
                Disposition::Died
            } else {
                self.favorable()
            };
            (floor + minutes(self.uniform(60.0, 2880.0)), d)
        };
        Timeline {
            intervals,
            periods,
            drifts,
            discharge,
            disposition,
            reinitiated,
        }
    }

    /// HFNC from `start` to `off`, split by a brief stop for re-initiation scenarios.
    /// Returns whether the interval was split.
    fn hfnc_interval(
        &mut self,
        out: &mut Vec<Interval>,
        scenario: Scenario,
        start: f64,
        off: Option<f64>,
        span: f64,
    ) -> bool {
        if scenario == Scenario::ReinitiationWithinPeriod && span >= 10.0 {
            let a = minutes(self.uniform(0.2, 0.6) * span).max(1.0);
            let b = minutes(self.uniform(0.1, 0.3) * span).max(1.0);
            if a + b < span {
                out.push(Interval {
                    var: 0,
                    on: start,
                    off: Some(start + a),
                });
                out.push(Interval {
                    var: 0,
                    on: start + a + b,
                    off,
                });
                return true;
            }
        }
        out.push(Interval {
            var: 0,
            on: start,
            off,
        });
        false
    }

    fn charting_times(&mut self, discharge: f64, lo: f64, hi: f64) -> Vec<f64> {
        let mut t = 0.0;
        let mut out = Vec::new();
        while t <= discharge {
            out.push(t);
            t += minutes(self.log_uniform(lo, hi)).max(1.0);
        }
        out
    }

    fn value(&mut self, s: &Signal, baseline: f64, distress: f64) -> f64 {
        if self.rng.random_bool(self.cfg.artifact_rate) {
            return s.range.1 * 2.0 + 1.0;
        }
        let z = baseline + self.gauss(0.5) + s.weight * distress;
        (s.mean + s.sd * z).clamp(s.range.0, s.range.1)
    }

    fn episode(
        &mut self,
        id: &str,
        patient: &str,
        plan: &EpisodePlan,
    ) -> (EpisodeHeader, Vec<ObservationRecord>, ManifestEpisode) {
        let tl = self.timeline(plan);
        let died = tl.disposition == Disposition::Died;
        let scenario = match plan.scenario {
            Scenario::ReinitiationWithinPeriod if !tl.reinitiated => Scenario::Plain,
            s => s,
        };
        let age = if scenario == Scenario::ExcludedAge {
            self.uniform(19.0, 25.0)
        } else {
            self.uniform(0.05, 18.9)
        };
        let female = self.rng.random_bool(0.45);
        let mut tags = std::collections::BTreeSet::new();
        if self.rng.random_bool(self.cfg.respiratory_fraction) {
            tags.insert(TAG_RESPIRATORY.to_string());
        } else {
            tags.insert(
                ["cardiac", "neurologic", "infectious", "trauma"][self.rng.random_range(0..4)]
                    .to_string(),
            );
        }
        if scenario == Scenario::ExcludedApnea {
            tags.insert(TAG_APNEA.to_string());
        }
        let mut care_flags = std::collections::BTreeSet::new();
        if scenario == Scenario::ExcludedCareLimits {
            care_flags.insert(if self.rng.random_bool(0.5) {
                CareFlag::Dnr
            } else {
                CareFlag::Dni
            });
        }

        let s = self.cfg.signal_strength;
        let distress = |t: f64| {
            let d: f64 = tl.drifts.iter().map(|d| d.at(t)).sum();
            s * (d + if died { 1.0 } else { 0.0 })
        };
        let mut recs = Vec::new();
        let mut push = |var: &str, time: f64, value: f64| {
            recs.push(ObservationRecord {
                episode_id: id.to_string(),
                time,
                variable: var.to_string(),
                value,
            })
        };
        push("age_years", 0.0, (age * 100.0).round() / 100.0);
        push("sex_female", 0.0, f64::from(u8::from(female)));

        let (lo, hi) = (self.cfg.charting_min_minutes, self.cfg.charting_max_minutes);
        let vitals_at = self.charting_times(tl.discharge, lo, hi);
        let labs_at = self.charting_times(tl.discharge, (lo * 4.0).max(60.0), hi * 3.0);
        let invasive = self.rng.random_bool(0.3);
        let vital_base: Vec<f64> = (0..VITALS.len()).map(|_| self.gauss(0.5)).collect();
        let lab_base: Vec<f64> = (0..LABS.len()).map(|_| self.gauss(0.5)).collect();

        for &t in &vitals_at {
            let d = distress(t);
            let mut spo2 = None;
            let mut fio2 = None;
            for (k, sgn) in VITALS.iter().enumerate() {
                let bp_site = sgn.name.ends_with("_invasive");
                if sgn.group.is_some() && bp_site != invasive {
                    continue;
                }
                if sgn.name == "temperature" && !self.rng.random_bool(0.5) {
                    continue;
                }
                let v = self.value(sgn, vital_base[k], d);
                match sgn.name {
                    "spo2" => spo2 = Some(v),
                    "fio2" => fio2 = Some(v),
                    _ => {}
                }
                push(sgn.name, t, v);
            }
            if let (Some(a), Some(b)) = (spo2, fio2) {
                if a <= VITALS[2].range.1 && b <= VITALS[3].range.1 {
                    push("sf_ratio", t, (a / b).clamp(SF_RANGE.0, SF_RANGE.1));
                }
            }
        }
        for &t in &labs_at {
            let d = distress(t);
            for (k, sgn) in LABS.iter().enumerate() {
                if self.rng.random_bool(0.8) {
                    let v = self.value(sgn, lab_base[k], d);
                    push(sgn.name, t, v);
                }
            }
        }
        let rare = [(RARE_DRUG, 10.0, self.cfg.rare_drug_prevalence, (1.0, 5.0))];
        for &(name, _, prevalence, (dlo, dhi)) in DRUGS.iter().chain(&rare) {
            if self.rng.random_bool(prevalence) {
                let doses = self.rng.random_range(1..=4);
                for _ in 0..doses {
                    let t = vitals_at[self.rng.random_range(0..vitals_at.len())];
                    let dose = (self.uniform(dlo, dhi) * 100.0).round() / 100.0;
                    push(name, t, dose);
                }
            }
        }
        for iv in &tl.intervals {
            let (name, _, max, _) = SUPPORT[iv.var];
            let level = |g: &mut Self, t: f64| {
                if iv.var == 3 {
                    1.0
                } else {
                    let base = if iv.var == 0 { 15.0 } else { 12.0 };
                    (base + g.gauss(3.0) + 4.0 * distress(t))
                        .clamp(1.0, max * 1.1)
                        .round()
                }
            };
            let v = level(self, iv.on);
            push(name, iv.on, v);
            let end = iv.off.unwrap_or(f64::INFINITY);
            for &t in vitals_at.iter().filter(|&&t| t > iv.on && t < end) {
                let v = level(self, t);
                push(name, t, v);
            }
            if let Some(off) = iv.off {
                push(name, off, 0.0);
            }
        }
        // stable sort keeps support stop/start order at shared times
        recs.sort_by(|a, b| a.time.total_cmp(&b.time));

        let header = EpisodeHeader {
            episode_id: id.to_string(),
            patient_id: patient.to_string(),
            age_at_admission: age,
            sex: if female { "F" } else { "M" }.into(),
            diagnosis_tags: tags,
            care_flags,
            disposition: tl.disposition,
            discharge_time: tl.discharge,
        };
        let manifest = ManifestEpisode {
            episode_id: id.to_string(),
            patient_id: patient.to_string(),
            scenario,
            exclusion: scenario.exclusion(),
            periods: tl.periods,
            died,
        };
        (header, recs, manifest)
    }
}

/// Lays out episodes so that included trials total `trials_target` exactly.
fn plan_episodes(cfg: &SynthConfig, g: &mut Generator) -> Vec<EpisodePlan> {
    let p = cfg.n_patients;
    let mut eps: Vec<EpisodePlan> = (0..p)
        .map(|patient| EpisodePlan {
            patient,
            scenario: Scenario::Plain,
            periods: vec![],
        })
        .collect();
    let mut periods_per: Vec<usize> = vec![1; p];
    for k in 0..cfg.trials_target - p {
        let patient = k % p;
        if k % 2 == 0 && periods_per[patient] == 1 {
            periods_per[patient] = 2;
            eps[patient].scenario = Scenario::SecondPeriodAfterGap;
        } else {
            eps.push(EpisodePlan {
                patient,
                scenario: Scenario::Plain,
                periods: vec![],
            });
            periods_per.push(1);
        }
    }

    let total = cfg.trials_target;
    let n_fail = (cfg.failure_rate * total as f64).round() as usize;
    let mut slots: Vec<bool> = (0..total).map(|i| i < n_fail).collect();
    slots.shuffle(&mut g.rng);
    let mut slot = slots.into_iter();
    for (ep, &n) in eps.iter_mut().zip(&periods_per) {
        for _ in 0..n {
            let failure = slot.next().expect("slot per trial");
            let (ttf, severity) = if failure {
                g.failure_draw()
            } else {
                (0.0, 0.0)
            };
            ep.periods.push(PeriodPlan {
                failure,
                ttf,
                severity,
            });
        }
    }

    let forced = [
        Scenario::ReinitiationWithinPeriod,
        Scenario::StepdownGuarded,
        Scenario::StepdownAfterGuard,
    ];
    let mut forced = forced.iter();
    let mut in_window_done = false;
    for ep in eps.iter_mut().filter(|e| e.periods.len() == 1) {
        let success = !ep.periods[0].failure;
        if success {
            if !in_window_done {
                ep.scenario = Scenario::InWindowDischarge;
                in_window_done = true;
                continue;
            }
            if let Some(&s) = forced.next() {
                ep.scenario = s;
                continue;
            }
        }
        let r: f64 = g.rng.random();
        ep.scenario = if success && r < cfg.in_window_discharge_fraction {
            Scenario::InWindowDischarge
        } else if r < cfg.in_window_discharge_fraction + cfg.multi_initiation_fraction {
            Scenario::ReinitiationWithinPeriod
        } else if r < cfg.in_window_discharge_fraction + cfg.multi_initiation_fraction + 0.03 {
            Scenario::StepdownGuarded
        } else if r < cfg.in_window_discharge_fraction + cfg.multi_initiation_fraction + 0.08 {
            Scenario::StepdownAfterGuard
        } else {
            Scenario::Plain
        };
    }

    let n_excluded = (cfg.censoring_fraction * p as f64).round() as usize;
    for i in 0..n_excluded {
        let scenario = Scenario::EXCLUDED[i % Scenario::EXCLUDED.len()];
        let periods = match scenario {
            Scenario::ExcludedNoHfnc => vec![],
            Scenario::ExcludedOperatingRoom | Scenario::ExcludedAmbiguous => vec![PeriodPlan {
                failure: false,
                ttf: 0.0,
                severity: 0.0,
            }],
            _ => {
                let failure = g.rng.random_bool(cfg.failure_rate);
                let (ttf, severity) = if failure {
                    g.failure_draw()
                } else {
                    (0.0, 0.0)
                };
                vec![PeriodPlan {
                    failure,
                    ttf,
                    severity,
                }]
            }
        };
        eps.push(EpisodePlan {
            patient: p + i,
            scenario,
            periods,
        });
    }
    eps
}

pub fn generate_cohort(cfg: &SynthConfig) -> Result<SynthCohort> {
    cfg.validate()?;
    let ttf = TruncatedLogNormal::fit(cfg.ttf_median_hours, cfg.ttf_p80_hours, 24.0)?;
    let mut g = Generator {
        cfg,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        ttf,
        std: Normal::new(0.0, 1.0).expect("standard normal"),
    };
    let plans = plan_episodes(cfg, &mut g);
    let n_pat = plans.iter().map(|e| e.patient).max().unwrap_or(0) + 1;
    let pw = n_pat.to_string().len().max(4);
    let ew = plans.len().to_string().len().max(5);

    let mut headers = Vec::with_capacity(plans.len());
    let mut records = Vec::new();
    let mut manifest = Vec::with_capacity(plans.len());
    let mut coverage = BTreeMap::new();
    for (i, plan) in plans.iter().enumerate() {
        let id = format!("E{:0ew$}", i + 1);
        let patient = format!("P{:0pw$}", plan.patient + 1);
        let (h, r, m) = g.episode(&id, &patient, plan);
        *coverage.entry(m.scenario).or_insert(0) += 1;
        headers.push(h);
        records.extend(r);
        manifest.push(m);
    }
    Ok(SynthCohort {
        config: cfg.clone(),
        catalog: default_catalog(),
        headers,
        records,
        manifest,
        coverage,
        ttf,
    })
}
