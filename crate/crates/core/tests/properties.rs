use std::collections::BTreeSet;

use hfnc_core::catalog::{
    parse_observation_stream, write_observations, Catalog, ObservationRecord, VariableKind,
    VariableSpec,
};
use hfnc_core::eval::{auroc, roc_curve, score_at, trapezoid_area, AnchorRule, PredictionSeries};
use hfnc_core::neural::loss::bce_masked;
use hfnc_core::neural::lstm::LstmStack;
use hfnc_core::neural::optim::{RmsProp, RmsPropConfig};
use hfnc_core::neural::Parameters;
use hfnc_core::preprocess::{
    build_design_matrix, fit_normalization, last_copies, perseverate, perseverate_labels, Transform,
};
use hfnc_core::trial::{label_timesteps, split_patients, HfncPeriod, Outcome, Partition};
use ndarray::{array, Array2};
use proptest::prelude::*;

fn var(name: &str) -> VariableSpec {
    VariableSpec {
        name: name.into(),
        kind: VariableKind::Physiologic,
        unit: String::new(),
        valid_min: -1e6,
        valid_max: 1e6,
        therapy_max: None,
        aggregation_group: None,
        support_modality: None,
    }
}

fn catalog() -> Catalog {
    Catalog::new(vec![var("hr"), var("rr"), var("spo2")])
}

fn records() -> impl Strategy<Value = Vec<ObservationRecord>> {
    prop::collection::vec((0u32..3, 0u32..600, 0usize..3, -500.0f64..500.0), 1..60).prop_map(
        |rows| {
            let names = ["hr", "rr", "spo2"];
            let mut out: Vec<ObservationRecord> = rows
                .into_iter()
                .map(|(e, t, v, x)| ObservationRecord {
                    episode_id: format!("E{e}"),
                    time: t as f64 * 0.5,
                    variable: names[v].into(),
                    value: x,
                })
                .collect();
            out.sort_by(|a, b| a.time.total_cmp(&b.time));
            out
        },
    )
}

fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    prop::collection::vec((-20i32..20, any::<bool>()), 2..80)
        .prop_filter("both classes", |v| {
            v.iter().any(|x| x.1) && v.iter().any(|x| !x.1)
        })
        .prop_map(|v| {
            (
                v.iter().map(|x| x.0 as f64 / 4.0).collect(),
                v.iter().map(|x| x.1).collect(),
            )
        })
}

struct Flat(Vec<f64>);

impl Parameters for Flat {
    fn blocks(&self) -> Vec<&[f64]> {
        vec![&self.0]
    }
    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.0]
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn observation_csv_round_trip(recs in records()) {
        let mut buf = Vec::new();
        write_observations(&mut buf, &recs).unwrap();
        let parsed = parse_observation_stream(buf.as_slice(), &catalog()).unwrap();
        prop_assert!(parsed.rejected.is_empty());
        prop_assert_eq!(parsed.records, recs);
    }

    #[test]
    fn design_rows_ignore_later_records(recs in records(), cut in 0u32..600) {
        let cut = cut as f64 * 0.5;
        let recs: Vec<_> = recs.into_iter().filter(|r| r.episode_id == "E0").collect();
        prop_assume!(!recs.is_empty());
        let stats = fit_normalization([recs.as_slice()], &catalog()).unwrap();
        let times: Vec<f64> = (0..=60).map(|i| i as f64 * 5.0).collect();
        let full = build_design_matrix(&recs, &times, &stats).unwrap();
        let early: Vec<_> = recs.iter().filter(|r| r.time <= cut).cloned().collect();
        let truncated = build_design_matrix(&early, &times, &stats).unwrap();
        for (i, &t) in times.iter().enumerate() {
            if t <= cut {
                prop_assert_eq!(full.values.row(i), truncated.values.row(i), "row at t={}", t);
            }
        }
    }

    #[test]
    fn training_features_are_standardized(recs in records()) {
        let stats = fit_normalization([recs.as_slice()], &catalog()).unwrap();
        for f in &stats.features {
            let xs: Vec<f64> = recs.iter().filter(|r| r.variable == f.name).map(|r| r.value).collect();
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            let Transform::ZScore { mean: m, std } = f.transform else {
                return Err(TestCaseError::fail(format!("{} is not z-scored", f.name)));
            };
            prop_assert!((m - mean).abs() <= 1e-9 * (1.0 + mean.abs()));
            prop_assert!((std - sd).abs() <= 1e-9 * (1.0 + sd));
            let z: Vec<f64> = xs.iter().map(|x| (x - m) / std).collect();
            let zm = z.iter().sum::<f64>() / n;
            let zsd = (z.iter().map(|v| (v - zm).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(zm.abs() < 1e-9 && (zsd - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn labels_are_constant_within_period(
        start in 0u32..200, len in 1u32..400, fail in any::<bool>(),
        mut times in prop::collection::btree_set(0u32..800, 1..40),
    ) {
        times.insert(start);
        let period = HfncPeriod {
            episode_id: "E".into(),
            start: start as f64,
            end: (start + len) as f64,
            outcome: if fail { Outcome::Failure } else { Outcome::Success },
            resolution_time: (start + len) as f64,
        };
        let ts: Vec<f64> = times.iter().map(|&t| t as f64).collect();
        let lab = label_timesteps(&period, &ts);
        let y = if fail { 1.0 } else { 0.0 };
        prop_assert!(lab.times.iter().all(|&t| t <= period.resolution_time));
        prop_assert_eq!(lab.times.len(), ts.iter().filter(|&&t| t <= period.resolution_time).count());
        for (&t, &l) in lab.times.iter().zip(&lab.labels) {
            if t < period.start {
                prop_assert!(l.is_nan());
            } else {
                prop_assert_eq!(l, y);
            }
        }
    }

    #[test]
    fn split_is_a_partition(n in 3usize..200, seed in any::<u64>()) {
        let patients: Vec<String> = (0..n).map(|i| format!("P{i}")).collect();
        let ratios = [0.6, 0.2, 0.2];
        let a = split_patients(patients.clone(), ratios, seed).unwrap();
        let mut shuffled = patients.clone();
        shuffled.reverse();
        let b = split_patients(shuffled, ratios, seed).unwrap();
        let mut seen = BTreeSet::new();
        for p in &patients {
            let part = a.partition_of(p);
            prop_assert!(part.is_some());
            prop_assert_eq!(part, b.partition_of(p));
            seen.insert(p.clone());
        }
        let total: usize = [Partition::Training, Partition::Validation, Partition::Test]
            .iter()
            .map(|&q| a.count(q))
            .sum();
        prop_assert_eq!(total, n);
        prop_assert_eq!(seen.len(), n);
    }

    #[test]
    fn perseveration_round_trips(rows in 1usize..20, width in 1usize..5, k in 1usize..5, seed in any::<u32>()) {
        let m = Array2::from_shape_fn((rows, width), |(i, j)| (seed as f64 + i as f64 * 7.0 + j as f64).sin());
        let p = perseverate(&m, k).unwrap();
        prop_assert_eq!(p.nrows(), rows * k);
        for i in 0..rows * k {
            prop_assert_eq!(p.row(i), m.row(i / k));
        }
        let idx: Vec<usize> = (0..rows * k).collect();
        prop_assert_eq!(last_copies(&idx, k), (0..rows).map(|i| i * k + k - 1).collect::<Vec<_>>());
        let labels: Vec<f64> = (0..rows).map(|i| (i % 2) as f64).collect();
        let pl = perseverate_labels(&labels, k).unwrap();
        prop_assert_eq!(last_copies(&pl, k), labels);
        prop_assert_eq!(pl.iter().filter(|v| v.is_nan()).count(), rows * (k - 1));
    }

    #[test]
    fn auroc_ignores_monotone_transforms((scores, labels) in scored()) {
        let a = auroc(&scores, &labels).unwrap();
        let warped: Vec<f64> = scores.iter().map(|s| (s * 0.7).exp() + 3.0).collect();
        prop_assert!((auroc(&warped, &labels).unwrap() - a).abs() < 1e-12);
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((auroc(&neg, &labels).unwrap() - (1.0 - a)).abs() < 1e-12);
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        prop_assert!((auroc(&scores, &flipped).unwrap() - (1.0 - a)).abs() < 1e-12);
    }

    #[test]
    fn trapezoid_matches_rank_statistic((scores, labels) in scored()) {
        let a = auroc(&scores, &labels).unwrap();
        let roc = roc_curve(&scores, &labels).unwrap();
        prop_assert!((trapezoid_area(&roc) - a).abs() < 1e-12);
    }

    #[test]
    fn anchored_score_is_causal(
        n in 1usize..30, t in 0u32..300, tail in -1.0f64..2.0,
    ) {
        let times: Vec<f64> = (0..n).map(|i| i as f64 * 10.0).collect();
        let probs: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let t = t as f64;
        let a = PredictionSeries::new("x", times.clone(), probs.clone()).unwrap();
        let changed: Vec<f64> = times.iter().zip(&probs).map(|(&ti, &p)| if ti > t { tail.clamp(0.0, 1.0) } else { p }).collect();
        let b = PredictionSeries::new("x", times, changed).unwrap();
        prop_assert_eq!(
            score_at(&a, t, 0.0, AnchorRule::LastAtOrBefore),
            score_at(&b, t, 0.0, AnchorRule::LastAtOrBefore)
        );
    }

    #[test]
    fn lstm_outputs_are_causal(seed in 0u64..1000, steps in 2usize..12, cut in 0usize..11) {
        prop_assume!(cut < steps);
        let net = LstmStack::init(seed, 3, &[4, 3], 1.0).unwrap();
        let x = Array2::from_shape_fn((steps, 3), |(i, j)| ((i * 3 + j) as f64 + seed as f64).cos());
        let mut y = x.clone();
        for i in cut + 1..steps {
            y.row_mut(i).fill(5.0);
        }
        let px = net.predict(&x).unwrap();
        let py = net.predict(&y).unwrap();
        prop_assert_eq!(&px[..=cut], &py[..=cut]);
    }

    #[test]
    fn masked_loss_ignores_unlabeled(
        cells in prop::collection::vec((0.01f64..0.99, prop::option::of(any::<bool>()), 0.01f64..0.99), 1..30),
    ) {
        prop_assume!(cells.iter().any(|c| c.1.is_some()));
        let n = cells.len();
        let probs = Array2::from_shape_vec((1, n), cells.iter().map(|c| c.0).collect()).unwrap();
        let other = Array2::from_shape_vec(
            (1, n),
            cells.iter().map(|c| if c.1.is_some() { c.0 } else { c.2 }).collect(),
        )
        .unwrap();
        let labels = Array2::from_shape_vec(
            (1, n),
            cells.iter().map(|c| c.1.map(|b| b as u8 as f64).unwrap_or(f64::NAN)).collect(),
        )
        .unwrap();
        let a = bce_masked(&probs, &labels).unwrap();
        prop_assert_eq!(a, bce_masked(&other, &labels).unwrap());
        let labeled: Vec<(f64, f64)> = cells.iter().filter_map(|c| c.1.map(|b| (c.0, b as u8 as f64))).collect();
        let direct = -labeled.iter().map(|(p, y)| y * p.ln() + (1.0 - y) * (1.0 - p).ln()).sum::<f64>()
            / labeled.len() as f64;
        prop_assert!((a - direct).abs() < 1e-12);
    }

    #[test]
    fn rmsprop_matches_scalar_recursion(
        grads in prop::collection::vec(-10.0f64..10.0, 1..20), lr in 1e-4f64..1e-1, rho in 0.5f64..0.99,
    ) {
        let cfg = RmsPropConfig { rho, epsilon: 1e-7 };
        let mut p = Flat(vec![0.5]);
        let mut opt = RmsProp::new(cfg, &p);
        let (mut theta, mut v) = (0.5f64, 0.0f64);
        for &g in &grads {
            opt.step(&mut p, &Flat(vec![g]), lr).unwrap();
            v = rho * v + (1.0 - rho) * g * g;
            theta -= lr * g / (v.sqrt() + 1e-7);
            prop_assert!((p.0[0] - theta).abs() <= 1e-12 * (1.0 + theta.abs()));
        }
    }
}

#[test]
fn bce_skips_nan_labels() {
    let probs = array![[0.9, 0.5]];
    let labels = array![[f64::NAN, 1.0]];
    let loss = bce_masked(&probs, &labels).unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
}
