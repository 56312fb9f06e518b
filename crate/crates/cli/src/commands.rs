use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hfnc_core::config::RunConfig;
use hfnc_core::eval::{
    anchor_grid, anchor_set, auroc, horizon_sweep, operating_points, read_predictions, roc_curve,
    time_to_failure_stats, write_operating_csv, write_predictions, write_roc_csv, write_sweep_csv,
    write_ttf_csv, CohortFilter, PredictionSeries, SweepRow, TrialOutcome, SENSITIVITY_TARGETS,
};
use hfnc_core::synth::{generate_cohort, SynthConfig};
use hfnc_core::trainer::{prepare_dataset, sha256_hex, train_kind, ModelKind, Predictor};
use hfnc_core::trial::{
    segment_cohort, split_cohort, write_exclusions, Partition, TrialManifestRow,
};

use crate::data::{self, load_cohort, run_config, run_id, RunManifest, CONFIG_ECHO};
use crate::{CohortArg, PartitionArg, TrainTarget};

const SWEEP_STEP_MIN: f64 = 30.0;
const SWEEP_SPAN_MIN: f64 = 1440.0;

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_json_lines<T: serde::Serialize>(
    path: &Path,
    rows: impl IntoIterator<Item = T>,
) -> Result<()> {
    let mut w = create(path)?;
    for r in rows {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn write_pretty<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

fn anchor_label(minutes: f64) -> String {
    if minutes.fract() == 0.0 {
        format!("{}", minutes as i64)
    } else {
        format!("{minutes}").replace('.', "_")
    }
}

fn rel(base: &Path, path: &Path) -> String {
    path.strip_prefix(base)
        .unwrap_or(path)
        .to_string_lossy()
        .into_owned()
}

pub fn synth(
    out: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
    patients: Option<usize>,
    trials: Option<usize>,
    signal: Option<f64>,
) -> Result<()> {
    let mut cfg: SynthConfig = match config {
        Some(p) => serde_json::from_slice(&std::fs::read(p)?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => SynthConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = patients {
        cfg.n_patients = n;
    }
    if let Some(n) = trials {
        cfg.trials_target = n;
    }
    if let Some(s) = signal {
        cfg.signal_strength = s;
    }
    let cohort = generate_cohort(&cfg)?;
    let files = cohort.write(out)?;
    write_pretty(&out.join("synth_config.json"), &cfg)?;

    let mut m = RunManifest::new(sha256_hex(&serde_json::to_vec(&cfg)?));
    m.catalog_hash = Some(cohort.catalog.hash());
    m.seeds.insert("synth".into(), vec![cfg.seed]);
    m.artifacts.extend(files);
    m.artifacts.insert("synth_config.json".into());
    m.save_merged(out)?;
    let failures = cohort
        .manifest
        .iter()
        .flat_map(|e| &e.periods)
        .filter(|p| p.outcome == hfnc_core::trial::Outcome::Failure)
        .count();
    println!(
        "{} episodes, {} observations, {failures} failure periods -> {}",
        cohort.headers.len(),
        cohort.records.len(),
        out.display()
    );
    Ok(())
}

pub fn segment(data: &Path, out: &Path, config: Option<&Path>) -> Result<()> {
    let cfg = data::load_run_config(config)?;
    let cohort = load_cohort(data)?;
    let seg = segment_cohort(&cohort.episodes, &cfg.segment());
    let split = split_cohort(&seg.trials, cfg.split_ratios, cfg.split_seed)?;
    std::fs::create_dir_all(out)?;
    write_json_lines(
        &out.join("trials.jsonl"),
        seg.trials
            .iter()
            .map(|t| TrialManifestRow::new(t, Some(&split))),
    )?;
    let mut w = create(&out.join("exclusions.csv"))?;
    write_exclusions(&mut w, &seg.exclusions)?;
    w.flush()?;
    write_json_lines(&out.join("periods.jsonl"), seg.periods.values().flatten())?;
    write_pretty(&out.join("split.json"), &split)?;
    write_pretty(&out.join(CONFIG_ECHO), &cfg)?;

    let mut m = RunManifest::for_run(&cfg, &cohort.digest);
    m.catalog_hash = Some(cohort.catalog.hash());
    for a in [
        "trials.jsonl",
        "exclusions.csv",
        "periods.jsonl",
        "split.json",
        CONFIG_ECHO,
    ] {
        m.artifacts.insert(a.into());
    }
    m.save_merged(out)?;

    let excluded = seg.exclusions.iter().filter(|r| !r.included()).count();
    let failures = seg
        .trials
        .iter()
        .filter(|t| t.target.outcome == hfnc_core::trial::Outcome::Failure)
        .count();
    println!(
        "{} episodes ({excluded} excluded), {} trials ({failures} failures), patients train/val/test {}/{}/{}",
        cohort.episodes.len(),
        seg.trials.len(),
        split.count(Partition::Training),
        split.count(Partition::Validation),
        split.count(Partition::Test)
    );
    Ok(())
}

/// The run directory's canonical config: kind and worker count do not
/// affect the directory identity.
fn canonical(cfg: &RunConfig) -> RunConfig {
    RunConfig {
        kind: ModelKind::LstmPersTl,
        workers: 1,
        ..cfg.clone()
    }
}

fn checkpoint_path(run: &Path, kind: ModelKind) -> PathBuf {
    run.join("checkpoints")
        .join(format!("{}.json", kind.slug()))
}

fn predictions_path(run: &Path, kind: ModelKind) -> PathBuf {
    run.join("predictions")
        .join(format!("{}.jsonl", kind.slug()))
}

fn save_predictions(path: &Path, series: &[PredictionSeries]) -> Result<()> {
    let mut w = create(path)?;
    write_predictions(&mut w, series)?;
    w.flush()?;
    Ok(())
}

pub fn train(target: &TrainTarget, kind: Option<&str>) -> Result<()> {
    let mut cfg = data::load_run_config(target.config.as_deref())?;
    if let Some(w) = target.workers {
        if w == 0 {
            bail!("--workers must be at least 1");
        }
        cfg.workers = w;
    }
    let kind: ModelKind = match kind {
        Some(k) => k.parse()?,
        None => cfg.kind,
    };
    if kind == ModelKind::Pretext {
        bail!("pretext models are trained as part of the transfer-learning kinds");
    }
    cfg.kind = kind;
    let cohort = load_cohort(&target.data.data)?;
    let run = match &target.run_dir {
        Some(d) => d.clone(),
        None => target.runs.join(run_id(&cfg, &cohort.digest)),
    };
    std::fs::create_dir_all(&run)?;

    let ds = prepare_dataset(&cohort.episodes, &cohort.catalog, &cfg, None)?;
    log::info!(
        "{} trials, {} features, {} pretext episodes; training {kind}",
        ds.trials.len(),
        ds.stats.width(),
        ds.pretext.len()
    );
    let model = train_kind(&ds, kind, &cfg)?;
    let ckpt = checkpoint_path(&run, kind);
    std::fs::create_dir_all(ckpt.parent().unwrap())?;
    model.save(&ckpt)?;
    write_pretty(&run.join("norm_stats.json"), &ds.stats)?;
    write_pretty(&run.join(CONFIG_ECHO), &canonical(&cfg))?;
    let preds = predictions_path(&run, kind);
    save_predictions(&preds, &model.predict_trials(&ds.trials)?)?;

    let mut m = RunManifest::for_run(&cfg, &cohort.digest);
    m.catalog_hash = Some(ds.stats.catalog_hash.clone());
    m.artifacts.extend([
        rel(&run, &ckpt),
        rel(&run, &preds),
        "norm_stats.json".into(),
        CONFIG_ECHO.into(),
    ]);
    m.save_merged(&run)?;
    if let Predictor::Single(b) = &model {
        if let Some(e) = b.training.best_epoch {
            println!(
                "best epoch {e} of {}, objective {:?}",
                b.training.history.len(),
                b.training.best_objective
            );
        }
    }
    println!("{kind} -> {}", ckpt.display());
    Ok(())
}

pub fn predict(data: &Path, run: &Path, kind: &str, out: Option<&Path>) -> Result<()> {
    let kind: ModelKind = kind.parse()?;
    let cfg = run_config(run)?;
    let ckpt = checkpoint_path(run, kind);
    let model = Predictor::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let cohort = load_cohort(data)?;
    let ds = prepare_dataset(&cohort.episodes, &cohort.catalog, &cfg, Some(model.stats()))?;
    let series = model.predict_trials(&ds.trials)?;
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| predictions_path(run, kind));
    save_predictions(&path, &series)?;

    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let (base, manifest_cfg) = if path.starts_with(run) {
        (run, cfg.clone())
    } else {
        (dir, cfg.clone())
    };
    let digest = match RunManifest::load(base)? {
        Some(m) if base == run => m.data_digest.unwrap_or(cohort.digest.clone()),
        _ => cohort.digest.clone(),
    };
    if digest != cohort.digest {
        log::info!("predicting a dataset other than the one the run was trained on");
    }
    let mut m = RunManifest::for_run(&manifest_cfg, &digest);
    m.catalog_hash = Some(model.stats().catalog_hash.clone());
    m.artifacts.insert(rel(base, &path));
    m.save_merged(base)?;
    println!("{} series -> {}", series.len(), path.display());
    Ok(())
}

struct Outcomes {
    trials: Vec<(TrialOutcome, Partition)>,
    cfg: RunConfig,
}

fn outcomes(data: &Path, run: &Path) -> Result<Outcomes> {
    let cfg = run_config(run)?;
    let cohort = load_cohort(data)?;
    let seg = segment_cohort(&cohort.episodes, &cfg.segment());
    let split = split_cohort(&seg.trials, cfg.split_ratios, cfg.split_seed)?;
    let trials = seg
        .trials
        .iter()
        .filter_map(|t| {
            Some((
                TrialOutcome::from_trial(t)?,
                split.partition_of(&t.patient_id)?,
            ))
        })
        .collect();
    Ok(Outcomes { trials, cfg })
}

impl Outcomes {
    fn select(&self, partition: PartitionArg, cohort: CohortFilter) -> Vec<TrialOutcome> {
        self.trials
            .iter()
            .filter(|(t, p)| {
                let part_ok = match partition {
                    PartitionArg::All => true,
                    PartitionArg::Training => *p == Partition::Training,
                    PartitionArg::Validation => *p == Partition::Validation,
                    PartitionArg::Test => *p == Partition::Test,
                };
                part_ok && cohort.keeps(t)
            })
            .map(|(t, _)| t.clone())
            .collect()
    }
}

fn load_predictions(run: &Path, kind: ModelKind) -> Result<BTreeMap<String, PredictionSeries>> {
    let p = predictions_path(run, kind);
    if !p.exists() {
        bail!(
            "{} not found; run `hfnc predict --kind {kind}` first",
            p.display()
        );
    }
    Ok(read_predictions(std::io::BufReader::new(File::open(&p)?))?)
}

fn filter_of(c: CohortArg) -> CohortFilter {
    match c {
        CohortArg::All => CohortFilter::All,
        CohortArg::Respiratory => CohortFilter::Respiratory,
    }
}

fn partition_name(p: PartitionArg) -> &'static str {
    match p {
        PartitionArg::Training => "training",
        PartitionArg::Validation => "validation",
        PartitionArg::Test => "test",
        PartitionArg::All => "all",
    }
}

pub fn evaluate(
    data: &Path,
    run: &Path,
    kind: &str,
    anchor: f64,
    cohort: CohortArg,
    partition: PartitionArg,
) -> Result<()> {
    let kind: ModelKind = kind.parse()?;
    let oc = outcomes(data, run)?;
    let preds = load_predictions(run, kind)?;
    let filter = filter_of(cohort);
    let trials = oc.select(partition, filter);
    if trials.is_empty() {
        bail!(
            "no trials in the {} partition for this cohort",
            partition_name(partition)
        );
    }
    let rule = oc.cfg.anchor_rule;
    let out = run.join("reports").join(kind.slug()).join(format!(
        "{}_{}",
        partition_name(partition),
        match cohort {
            CohortArg::All => "all",
            CohortArg::Respiratory => "respiratory",
        }
    ));
    std::fs::create_dir_all(&out)?;

    let sweep = horizon_sweep(
        &trials,
        &preds,
        &anchor_grid(SWEEP_STEP_MIN, SWEEP_SPAN_MIN),
        rule,
        CohortFilter::All,
    );
    let mut files = vec![out.join("auroc_sweep.csv"), out.join("ttf.csv")];
    let mut w = create(&files[0])?;
    write_sweep_csv(&mut w, &sweep)?;
    w.flush()?;
    let mut w = create(&files[1])?;
    write_ttf_csv(&mut w, &time_to_failure_stats(&trials))?;
    w.flush()?;

    let set = anchor_set(&trials, &preds, anchor, rule);
    let label = anchor_label(anchor);
    let (Some(roc), Some(ops)) = (
        roc_curve(&set.scores, &set.labels),
        operating_points(&set.scores, &set.labels, &SENSITIVITY_TARGETS),
    ) else {
        bail!(
            "AUROC undefined at {label} min: {} eligible trials, {} failures",
            set.scores.len(),
            set.labels.iter().filter(|&&l| l).count()
        );
    };
    files.push(out.join(format!("roc_{label}.csv")));
    let mut w = create(&files[2])?;
    write_roc_csv(&mut w, &roc)?;
    w.flush()?;
    files.push(out.join(format!("operating_{label}.csv")));
    let mut w = create(&files[3])?;
    write_operating_csv(&mut w, &ops)?;
    w.flush()?;

    let manifest = RunManifest::load(run)?.context("run directory has no manifest")?;
    let mut m = RunManifest::for_run(&oc.cfg, manifest.data_digest.as_deref().unwrap_or_default());
    m.artifacts.extend(files.iter().map(|f| rel(run, f)));
    m.save_merged(run)?;
    println!(
        "{kind}: AUROC at {label} min = {:.4} ({} trials, {} failures) -> {}",
        auroc(&set.scores, &set.labels).unwrap_or(f64::NAN),
        set.scores.len(),
        set.labels.iter().filter(|&&l| l).count(),
        out.display()
    );
    Ok(())
}

fn write_wide_sweep(path: &Path, kinds: &[ModelKind], sweeps: &[Vec<SweepRow>]) -> Result<()> {
    let mut w = create(path)?;
    let names: Vec<&str> = kinds.iter().map(|k| k.name()).collect();
    writeln!(w, "t_h,n_eligible,n_fail,{}", names.join(","))?;
    for (i, row) in sweeps[0].iter().enumerate() {
        let cells: Vec<String> = sweeps
            .iter()
            .map(|s| s[i].auroc.map(|a| a.to_string()).unwrap_or_default())
            .collect();
        writeln!(
            w,
            "{},{},{},{}",
            row.t_min / 60.0,
            row.n_eligible,
            row.n_fail,
            cells.join(",")
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn report(data: &Path, run: &Path, anchor: f64) -> Result<()> {
    let oc = outcomes(data, run)?;
    let kinds: Vec<ModelKind> = ModelKind::HFNC
        .into_iter()
        .filter(|k| predictions_path(run, *k).exists())
        .collect();
    if kinds.is_empty() {
        bail!("{} holds no predictions", run.display());
    }
    let rule = oc.cfg.anchor_rule;
    let out = run.join("reports");
    std::fs::create_dir_all(&out)?;
    let grid = anchor_grid(SWEEP_STEP_MIN, SWEEP_SPAN_MIN);
    let label = anchor_label(anchor);
    let mut files = Vec::new();
    let mut summary = BTreeMap::new();

    let preds: Vec<_> = kinds
        .iter()
        .map(|k| load_predictions(run, *k))
        .collect::<Result<_>>()?;
    for cohort in [CohortArg::All, CohortArg::Respiratory] {
        let trials = oc.select(PartitionArg::Test, filter_of(cohort));
        let sweeps: Vec<Vec<SweepRow>> = preds
            .iter()
            .map(|p| horizon_sweep(&trials, p, &grid, rule, CohortFilter::All))
            .collect();
        let name = match cohort {
            CohortArg::All => "auroc_by_model.csv",
            CohortArg::Respiratory => "auroc_by_model_respiratory.csv",
        };
        write_wide_sweep(&out.join(name), &kinds, &sweeps)?;
        files.push(out.join(name));
    }

    let test = oc.select(PartitionArg::Test, CohortFilter::All);
    let mut ops_out = create(&out.join(format!("operating_by_model_{label}.csv")))?;
    writeln!(
        ops_out,
        "model,target,threshold,sensitivity,specificity,ppv,npv"
    )?;
    for (k, p) in kinds.iter().zip(&preds) {
        let set = anchor_set(&test, p, anchor, rule);
        summary.insert(k.name().to_string(), auroc(&set.scores, &set.labels));
        let Some(roc) = roc_curve(&set.scores, &set.labels) else {
            log::warn!("{k}: AUROC undefined at {label} min");
            continue;
        };
        let path = out.join(format!("roc_{}_{label}.csv", k.slug()));
        let mut w = create(&path)?;
        write_roc_csv(&mut w, &roc)?;
        w.flush()?;
        files.push(path);
        for op in
            operating_points(&set.scores, &set.labels, &SENSITIVITY_TARGETS).unwrap_or_default()
        {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            writeln!(
                ops_out,
                "{},{},{},{},{},{},{}",
                k.name(),
                op.target_sensitivity,
                op.threshold,
                op.sensitivity,
                op.specificity,
                opt(op.ppv),
                opt(op.npv)
            )?;
        }
    }
    ops_out.flush()?;
    files.push(out.join(format!("operating_by_model_{label}.csv")));

    let all: Vec<TrialOutcome> = oc.trials.iter().map(|(t, _)| t.clone()).collect();
    let mut w = create(&out.join("ttf.csv"))?;
    write_ttf_csv(&mut w, &time_to_failure_stats(&all))?;
    w.flush()?;
    files.push(out.join("ttf.csv"));
    write_pretty(
        &out.join("summary.json"),
        &serde_json::json!({ "anchor_min": anchor, "test_auroc": summary }),
    )?;
    files.push(out.join("summary.json"));

    let manifest = RunManifest::load(run)?.context("run directory has no manifest")?;
    let mut m = RunManifest::for_run(&oc.cfg, manifest.data_digest.as_deref().unwrap_or_default());
    m.artifacts.extend(files.iter().map(|f| rel(run, f)));
    m.save_merged(run)?;
    for (k, a) in &summary {
        println!(
            "{k:>16}: test AUROC at {label} min {}",
            a.map(|v| format!("{v:.4}")).unwrap_or("undefined".into())
        );
    }
    Ok(())
}
