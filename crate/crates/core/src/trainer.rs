//! Pretext training, first-layer transfer, HFNC fine-tuning, ensembles and
//! checkpoints.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{ElasticNetModel, SolverConfig};
use crate::catalog::{validate_catalog, Catalog, Disposition, Episode, TherapyPrevalence};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{validation_objective, PredictionSeries, TrialOutcome};
use crate::neural::{
    apply_l2, bce_masked, dropout_masks, LstmStack, PlateauConfig, PlateauSchedule, RmsProp,
    ScheduleEvent, SequenceBatch,
};
use crate::preprocess::{
    aggregate_and_filter, build_design_matrix, fit_normalization, last_copies, perseverate,
    perseverate_labels, DesignMatrix, FilterReport, NormStats,
};
use crate::trial::{segment_cohort, split_cohort, CohortSplit, HfncTrial, Partition, Segmentation};

pub const CHECKPOINT_FORMAT: &str = "hfnc-checkpoint";
pub const ENSEMBLE_FORMAT: &str = "hfnc-ensemble";
pub const CHECKPOINT_VERSION: u32 = 1;

const SHUFFLE_SALT: u64 = 0x005E_ED0F_5487_F1E5;
const PREDICT_BATCH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "LR-14")]
    Lr14,
    #[serde(rename = "LR-517")]
    Lr517,
    #[serde(rename = "LSTM")]
    Lstm,
    #[serde(rename = "LSTM+3xPers")]
    LstmPers,
    #[serde(rename = "LSTM+TL")]
    LstmTl,
    #[serde(rename = "LSTM+3xPers+TL")]
    LstmPersTl,
    #[serde(rename = "Simple-EN")]
    SimpleEnsemble,
    #[serde(rename = "Multi-EN")]
    MultiEnsemble,
    /// Mortality model whose first layer feeds the TL kinds.
    #[serde(rename = "pretext")]
    Pretext,
}

impl ModelKind {
    /// The eight HFNC model kinds.
    pub const HFNC: [ModelKind; 8] = [
        ModelKind::Lr14,
        ModelKind::Lr517,
        ModelKind::Lstm,
        ModelKind::LstmPers,
        ModelKind::LstmTl,
        ModelKind::LstmPersTl,
        ModelKind::SimpleEnsemble,
        ModelKind::MultiEnsemble,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Lr14 => "LR-14",
            ModelKind::Lr517 => "LR-517",
            ModelKind::Lstm => "LSTM",
            ModelKind::LstmPers => "LSTM+3xPers",
            ModelKind::LstmTl => "LSTM+TL",
            ModelKind::LstmPersTl => "LSTM+3xPers+TL",
            ModelKind::SimpleEnsemble => "Simple-EN",
            ModelKind::MultiEnsemble => "Multi-EN",
            ModelKind::Pretext => "pretext",
        }
    }

    /// File-system friendly name.
    pub fn slug(self) -> String {
        self.name().to_ascii_lowercase().replace(['+', '-'], "_")
    }

    pub fn is_ensemble(self) -> bool {
        matches!(self, ModelKind::SimpleEnsemble | ModelKind::MultiEnsemble)
    }

    pub fn uses_transfer(self) -> bool {
        matches!(
            self,
            ModelKind::LstmTl
                | ModelKind::LstmPersTl
                | ModelKind::SimpleEnsemble
                | ModelKind::MultiEnsemble
        )
    }

    pub fn perseverates(self) -> bool {
        matches!(
            self,
            ModelKind::LstmPers
                | ModelKind::LstmPersTl
                | ModelKind::SimpleEnsemble
                | ModelKind::MultiEnsemble
        )
    }

    pub fn perseveration(self, cfg: &RunConfig) -> usize {
        if self.perseverates() {
            cfg.perseveration
        } else {
            1
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        [
            ModelKind::Lr14,
            ModelKind::Lr517,
            ModelKind::Lstm,
            ModelKind::LstmPers,
            ModelKind::LstmTl,
            ModelKind::LstmPersTl,
            ModelKind::SimpleEnsemble,
            ModelKind::MultiEnsemble,
            ModelKind::Pretext,
        ]
        .into_iter()
        .find(|k| {
            let name: String = k
                .name()
                .chars()
                .filter(|c| c.is_ascii_alphanumeric())
                .collect();
            name.to_ascii_lowercase() == key
        })
        .or(match key.as_str() {
            "simple" => Some(ModelKind::SimpleEnsemble),
            "multi" => Some(ModelKind::MultiEnsemble),
            _ => None,
        })
        .ok_or_else(|| Error::Invalid(format!("unknown model kind `{s}`")))
    }
}

/// A trial ready for training or prediction.
#[derive(Debug, Clone)]
pub struct PreparedTrial {
    pub trial: HfncTrial,
    pub outcome: TrialOutcome,
    pub partition: Partition,
    pub design: DesignMatrix,
}

impl PreparedTrial {
    pub fn labels(&self) -> &[f64] {
        &self.trial.labels.labels
    }
}

/// Whole-episode sequence for the mortality task.
#[derive(Debug, Clone)]
pub struct PretextSequence {
    pub episode_id: String,
    pub design: DesignMatrix,
    pub died: bool,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    /// Catalog after rare-therapy pruning on the training partition.
    pub catalog: Catalog,
    pub removed_therapies: Vec<String>,
    pub stats: NormStats,
    pub segmentation: Segmentation,
    pub split: CohortSplit,
    pub trials: Vec<PreparedTrial>,
    pub pretext: Vec<PretextSequence>,
    pub filter: FilterReport,
}

impl Dataset {
    pub fn partition(&self, part: Partition) -> impl Iterator<Item = &PreparedTrial> {
        self.trials.iter().filter(move |t| t.partition == part)
    }

    pub fn outcomes(&self, part: Partition) -> Vec<TrialOutcome> {
        self.partition(part).map(|t| t.outcome.clone()).collect()
    }
}

/// Segments, splits, prunes the catalog, fits normalization on the training
/// partition and builds every design matrix. With `stats`, the given
/// statistics are reused instead of fitted.
pub fn prepare_dataset(
    episodes: &[Episode],
    catalog: &Catalog,
    cfg: &RunConfig,
    stats: Option<&NormStats>,
) -> Result<Dataset> {
    let segmentation = segment_cohort(episodes, &cfg.segment());
    if segmentation.trials.is_empty() {
        return Err(Error::Empty("trials"));
    }
    let split = split_cohort(&segmentation.trials, cfg.split_ratios, cfg.split_seed)?;
    for part in [Partition::Training, Partition::Validation, Partition::Test] {
        if cfg.split_ratios[part as usize] > 0.0 && split.count(part) == 0 {
            return Err(Error::Invalid(format!("{part:?} partition is empty")));
        }
    }
    let held_out = |ep: &Episode| {
        matches!(
            split.partition_of(ep.patient_id()),
            Some(Partition::Validation | Partition::Test)
        )
    };
    let training_eps: Vec<&Episode> = episodes
        .iter()
        .filter(|e| split.partition_of(e.patient_id()) == Some(Partition::Training))
        .collect();
    let validated = validate_catalog(
        catalog,
        Some(&TherapyPrevalence::from_episodes(
            training_eps.iter().copied(),
        )),
    )?;
    let catalog = validated.catalog;

    let mut filter = FilterReport::default();
    let mut filtered: BTreeMap<&str, Vec<_>> = BTreeMap::new();
    for ep in episodes {
        let (recs, report) = aggregate_and_filter(&ep.records, &catalog);
        filter.not_in_catalog += report.not_in_catalog;
        for (k, v) in report.out_of_range {
            *filter.out_of_range.entry(k).or_default() += v;
        }
        filtered.insert(ep.id(), recs);
    }

    let stats = match stats {
        Some(s) => {
            if s.catalog_hash != catalog.hash() {
                return Err(Error::StatsMismatch {
                    expected: s.catalog_hash.clone(),
                    found: catalog.hash(),
                });
            }
            s.clone()
        }
        None => fit_normalization(
            training_eps.iter().map(|e| filtered[e.id()].as_slice()),
            &catalog,
        )?,
    };

    let mut trials = Vec::with_capacity(segmentation.trials.len());
    for tr in &segmentation.trials {
        let Some(outcome) = TrialOutcome::from_trial(tr) else {
            continue;
        };
        let partition = split
            .partition_of(&tr.patient_id)
            .expect("every trial patient is assigned");
        let design =
            build_design_matrix(&filtered[tr.episode_id.as_str()], &tr.labels.times, &stats)?;
        trials.push(PreparedTrial {
            trial: tr.clone(),
            outcome,
            partition,
            design,
        });
    }

    let mut pretext = Vec::new();
    for ep in episodes.iter().filter(|e| !held_out(e)) {
        let recs = &filtered[ep.id()];
        let mut times: Vec<f64> = recs
            .iter()
            .map(|r| r.time)
            .take_while(|&t| t <= ep.header.discharge_time)
            .collect();
        times.dedup();
        if times.is_empty() {
            continue;
        }
        pretext.push(PretextSequence {
            episode_id: ep.id().to_string(),
            design: build_design_matrix(recs, &times, &stats)?,
            died: ep.header.disposition == Disposition::Died,
        });
    }

    Ok(Dataset {
        catalog,
        removed_therapies: validated.removed,
        stats,
        segmentation,
        split,
        trials,
        pretext,
        filter,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelParams {
    Lstm { stack: LstmStack },
    ElasticNet { model: ElasticNetModel },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SeedLineage {
    pub pretext: Option<u64>,
    pub finetune: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation objective; `None` when no hourly AUROC was defined.
    pub objective: Option<f64>,
    pub lr: f64,
    pub event: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    /// 1-based epoch of the kept parameters; `None` if no epoch ran.
    pub best_epoch: Option<usize>,
    pub best_objective: Option<f64>,
    pub history: Vec<EpochRecord>,
}

/// Self-describing model checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBundle {
    pub format: String,
    pub version: u32,
    pub kind: ModelKind,
    pub catalog_hash: String,
    pub stats_hash: String,
    pub stats: NormStats,
    pub perseveration: usize,
    pub seeds: SeedLineage,
    /// sha256 of the pretext checkpoint whose first layer was transferred.
    pub pretext_checkpoint: Option<String>,
    pub layer_shapes: Vec<(usize, usize)>,
    pub config: RunConfig,
    pub params: ModelParams,
    pub training: TrainingSummary,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl ModelBundle {
    fn new(
        kind: ModelKind,
        stats: &NormStats,
        perseveration: usize,
        seeds: SeedLineage,
        config: &RunConfig,
        params: ModelParams,
        training: TrainingSummary,
    ) -> Self {
        let layer_shapes = match &params {
            ModelParams::Lstm { stack } => stack.mask_shapes(),
            ModelParams::ElasticNet { model } => vec![(model.weights.len(), 1)],
        };
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            kind,
            catalog_hash: stats.catalog_hash.clone(),
            stats_hash: stats.hash(),
            stats: stats.clone(),
            perseveration,
            seeds,
            pretext_checkpoint: None,
            layer_shapes,
            config: config.clone(),
            params,
            training,
        }
    }

    pub fn lstm(&self) -> Option<&LstmStack> {
        match &self.params {
            ModelParams::Lstm { stack } => Some(stack),
            ModelParams::ElasticNet { .. } => None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("bundle serializes")
    }

    pub fn checksum(&self) -> String {
        sha256_hex(&self.to_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let b: Self = serde_json::from_slice(bytes)?;
        if b.format != CHECKPOINT_FORMAT || b.version != CHECKPOINT_VERSION {
            return Err(Error::Invalid(format!(
                "unsupported checkpoint {} v{}",
                b.format, b.version
            )));
        }
        if b.stats.hash() != b.stats_hash {
            return Err(Error::StatsMismatch {
                expected: b.stats_hash.clone(),
                found: b.stats.hash(),
            });
        }
        Ok(b)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Members averaged with equal weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    pub format: String,
    pub version: u32,
    pub kind: ModelKind,
    pub members: Vec<ModelBundle>,
}

impl EnsembleSpec {
    pub fn new(kind: ModelKind, members: Vec<ModelBundle>) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::Invalid(format!(
                "an ensemble needs at least 2 members, got {}",
                members.len()
            )));
        }
        if members
            .iter()
            .any(|m| m.stats_hash != members[0].stats_hash)
        {
            return Err(Error::Invalid(
                "ensemble members use different normalization".into(),
            ));
        }
        Ok(Self {
            format: ENSEMBLE_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            kind,
            members,
        })
    }

    pub fn stats(&self) -> &NormStats {
        &self.members[0].stats
    }
}

/// A trained single model or ensemble.
#[derive(Debug, Clone, PartialEq)]
pub enum Predictor {
    Single(ModelBundle),
    Ensemble(EnsembleSpec),
}

impl Predictor {
    pub fn kind(&self) -> ModelKind {
        match self {
            Predictor::Single(b) => b.kind,
            Predictor::Ensemble(e) => e.kind,
        }
    }

    pub fn stats(&self) -> &NormStats {
        match self {
            Predictor::Single(b) => &b.stats,
            Predictor::Ensemble(e) => e.stats(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            Predictor::Single(b) => b.to_bytes(),
            Predictor::Ensemble(e) => serde_json::to_vec(e).expect("ensemble serializes"),
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        #[derive(Deserialize)]
        struct Probe {
            format: String,
        }
        let probe: Probe = serde_json::from_slice(bytes)?;
        match probe.format.as_str() {
            CHECKPOINT_FORMAT => Ok(Predictor::Single(ModelBundle::from_bytes(bytes)?)),
            ENSEMBLE_FORMAT => {
                let e: EnsembleSpec = serde_json::from_slice(bytes)?;
                for m in &e.members {
                    ModelBundle::from_bytes(&m.to_bytes())?;
                }
                EnsembleSpec::new(e.kind, e.members).map(Predictor::Ensemble)
            }
            other => Err(Error::Invalid(format!(
                "unknown checkpoint format `{other}`"
            ))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// One probability per design-matrix row, per input.
    pub fn predict(&self, designs: &[&DesignMatrix]) -> Result<Vec<Vec<f64>>> {
        match self {
            Predictor::Single(b) => predict_designs(b, designs),
            Predictor::Ensemble(e) => {
                let mut sum: Option<Vec<Vec<f64>>> = None;
                for m in &e.members {
                    let p = predict_designs(m, designs)?;
                    match &mut sum {
                        None => sum = Some(p),
                        Some(s) => {
                            for (acc, row) in s.iter_mut().zip(p) {
                                for (a, v) in acc.iter_mut().zip(row) {
                                    *a += v;
                                }
                            }
                        }
                    }
                }
                let n = e.members.len() as f64;
                let mut out = sum.expect("ensembles have members");
                for v in out.iter_mut().flatten() {
                    *v /= n;
                }
                Ok(out)
            }
        }
    }

    pub fn predict_trials<'a>(
        &self,
        trials: impl IntoIterator<Item = &'a PreparedTrial>,
    ) -> Result<Vec<PredictionSeries>> {
        let trials: Vec<&PreparedTrial> = trials.into_iter().collect();
        let designs: Vec<&DesignMatrix> = trials.iter().map(|t| &t.design).collect();
        let probs = self.predict(&designs)?;
        trials
            .iter()
            .zip(probs)
            .map(|(t, p)| {
                PredictionSeries::new(t.trial.trial_id.clone(), t.design.times.clone(), p)
            })
            .collect()
    }
}

/// Probabilities per charting row for one bundle. Perseverated models report
/// the output at the last copy of each row.
pub fn predict_designs(bundle: &ModelBundle, designs: &[&DesignMatrix]) -> Result<Vec<Vec<f64>>> {
    for d in designs {
        if d.stats_hash != bundle.stats_hash {
            return Err(Error::StatsMismatch {
                expected: bundle.stats_hash.clone(),
                found: d.stats_hash.clone(),
            });
        }
    }
    match &bundle.params {
        ModelParams::ElasticNet { model } => designs
            .iter()
            .map(|d| model.predict_matrix(&bundle.stats, &d.values))
            .collect(),
        ModelParams::Lstm { stack } => {
            let k = bundle.perseveration;
            let inputs: Vec<Array2<f64>> = designs
                .iter()
                .map(|d| perseverate(&d.values, k))
                .collect::<Result<_>>()?;
            let refs: Vec<&Array2<f64>> = inputs.iter().collect();
            Ok(predict_lstm(stack, &refs)?
                .into_iter()
                .map(|p| last_copies(&p, k))
                .collect())
        }
    }
}

/// Evaluation-mode outputs, batched in fixed-size chunks of the input order.
pub fn predict_lstm(stack: &LstmStack, seqs: &[&Array2<f64>]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(PREDICT_BATCH) {
        if chunk.iter().all(|s| s.nrows() == 0) {
            out.extend(chunk.iter().map(|_| Vec::new()));
            continue;
        }
        let batch = SequenceBatch::from_sequences(chunk)?;
        let probs = stack.forward(&batch, None)?.probs;
        for (b, s) in chunk.iter().enumerate() {
            out.push(probs.column(b).iter().take(s.nrows()).copied().collect());
        }
    }
    Ok(out)
}

/// Copies layer 1 of `pretext` into `target` bit for bit.
pub fn transfer_first_layer(pretext: &LstmStack, target: &mut LstmStack) -> Result<()> {
    let (src, dst) = match (pretext.layers.first(), target.layers.first_mut()) {
        (Some(s), Some(d)) => (s, d),
        _ => {
            return Err(Error::Shape(
                "transfer needs at least one layer on both sides".into(),
            ))
        }
    };
    if src.input_dim() != dst.input_dim() || src.hidden() != dst.hidden() {
        return Err(Error::Shape(format!(
            "pretext layer 1 is {}→{}, target layer 1 is {}→{}",
            src.input_dim(),
            src.hidden(),
            dst.input_dim(),
            dst.hidden()
        )));
    }
    *dst = src.clone();
    Ok(())
}

struct TrainSeq {
    id: u64,
    inputs: Array2<f64>,
    labels: Vec<f64>,
}

struct EpochSetup<'a> {
    cfg: &'a RunConfig,
    seed: u64,
    frozen_first: bool,
}

/// One pass over `seqs` in a seed-determined order; returns the mean
/// penalized loss over labeled steps.
fn train_epoch(
    model: &mut LstmStack,
    opt: &mut RmsProp,
    seqs: &[TrainSeq],
    setup: &EpochSetup<'_>,
    epoch: usize,
    lr: f64,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed ^ SHUFFLE_SALT);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    let shapes = model.mask_shapes();
    let (mut total, mut weight) = (0.0, 0.0);
    for chunk in order.chunks(setup.cfg.batch_size) {
        let inputs: Vec<&Array2<f64>> = chunk.iter().map(|&i| &seqs[i].inputs).collect();
        let labels: Vec<&[f64]> = chunk.iter().map(|&i| seqs[i].labels.as_slice()).collect();
        let batch = SequenceBatch::from_sequences(&inputs)?;
        let y = batch.pad_labels(&labels)?;
        let labeled = y.iter().filter(|v| !v.is_nan()).count();
        if labeled == 0 {
            continue;
        }
        let ids: Vec<u64> = chunk.iter().map(|&i| seqs[i].id).collect();
        let masks = dropout_masks(
            setup.seed,
            epoch as u64,
            &ids,
            &shapes,
            setup.cfg.dropout_rates(),
        )?;
        let cache = model.forward(&batch, Some(&masks))?;
        let loss = bce_masked(&cache.probs, &y)?;
        let mut grads = model.backward(&cache, &y)?;
        let penalty = apply_l2(model, &mut grads, setup.cfg.l2);
        if setup.frozen_first {
            let g = &mut grads.layers[0];
            g.w_input.fill(0.0);
            g.w_recurrent.fill(0.0);
            g.bias.fill(0.0);
        }
        opt.step(model, &grads, lr)?;
        total += (loss + penalty) * labeled as f64;
        weight += labeled as f64;
    }
    if weight == 0.0 {
        return Err(Error::NoLabels);
    }
    Ok(total / weight)
}

/// Runs epochs under the plateau schedule and keeps the parameters of the
/// best epoch. `epoch_fn` trains one epoch at the given rate and returns the
/// training loss and the validation objective; an undefined objective falls
/// back to the negative training loss.
fn fit_loop<M: Clone>(
    plateau: PlateauConfig,
    max_epochs: usize,
    mut model: M,
    mut epoch_fn: impl FnMut(&mut M, usize, f64) -> Result<(f64, Option<f64>)>,
) -> Result<(M, TrainingSummary)> {
    let mut schedule = PlateauSchedule::new(plateau);
    let mut best = model.clone();
    let mut summary = TrainingSummary::default();
    for epoch in 0..max_epochs {
        let lr = schedule.lr();
        let (loss, objective) = epoch_fn(&mut model, epoch, lr)?;
        let score = objective.unwrap_or(-loss);
        let event = schedule.update(score);
        if event == ScheduleEvent::Improved {
            best = model.clone();
            summary.best_epoch = Some(epoch + 1);
            summary.best_objective = Some(score);
        }
        log::debug!(
            "epoch {} lr {lr:.3e} loss {loss:.5} objective {objective:?} {event:?}",
            epoch + 1
        );
        summary.history.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: loss,
            objective,
            lr,
            event: format!("{event:?}").to_ascii_lowercase(),
        });
        if event == ScheduleEvent::Stop {
            break;
        }
    }
    Ok((best, summary))
}

/// Mortality model on whole training-partition episodes, one label per step.
pub fn train_pretext(ds: &Dataset, cfg: &RunConfig, seed: u64) -> Result<ModelBundle> {
    if ds.pretext.is_empty() {
        return Err(Error::Empty("pretext episodes"));
    }
    let died = ds.pretext.iter().filter(|p| p.died).count();
    if died == 0 || died == ds.pretext.len() {
        return Err(Error::SingleClass("pretext mortality labels".into()));
    }
    let seqs: Vec<TrainSeq> = ds
        .pretext
        .iter()
        .enumerate()
        .map(|(i, p)| TrainSeq {
            id: i as u64,
            inputs: p.design.values.clone(),
            labels: vec![f64::from(u8::from(p.died)); p.design.rows()],
        })
        .collect();
    let model = LstmStack::init(seed, ds.stats.width(), &cfg.hidden_sizes, cfg.forget_bias)?;
    let mut opt = RmsProp::new(cfg.rmsprop(), &model);
    let setup = EpochSetup {
        cfg,
        seed,
        frozen_first: false,
    };
    let (best, summary) = fit_loop(cfg.plateau(), cfg.pretext_epochs, model, |m, epoch, lr| {
        Ok((train_epoch(m, &mut opt, &seqs, &setup, epoch, lr)?, None))
    })?;
    Ok(ModelBundle::new(
        ModelKind::Pretext,
        &ds.stats,
        1,
        SeedLineage {
            pretext: Some(seed),
            finetune: None,
        },
        cfg,
        ModelParams::Lstm { stack: best },
        summary,
    ))
}

fn check_pretext(ds: &Dataset, pretext: &ModelBundle) -> Result<()> {
    if pretext.kind != ModelKind::Pretext {
        return Err(Error::Invalid(format!(
            "transfer source is a {} model, not a pretext model",
            pretext.kind
        )));
    }
    if pretext.stats_hash != ds.stats.hash() {
        return Err(Error::StatsMismatch {
            expected: ds.stats.hash(),
            found: pretext.stats_hash.clone(),
        });
    }
    Ok(())
}

/// Initial parameters of an LSTM kind, with layer 1 transferred when a
/// pretext model is given.
pub fn initial_model(
    ds: &Dataset,
    cfg: &RunConfig,
    seed: u64,
    pretext: Option<&ModelBundle>,
) -> Result<LstmStack> {
    let mut model = LstmStack::init(seed, ds.stats.width(), &cfg.hidden_sizes, cfg.forget_bias)?;
    if let Some(p) = pretext {
        check_pretext(ds, p)?;
        let src = p
            .lstm()
            .ok_or_else(|| Error::Invalid("pretext checkpoint holds no LSTM".into()))?;
        transfer_first_layer(src, &mut model)?;
    }
    Ok(model)
}

/// Fine-tunes one LSTM kind on the training partition, selecting the epoch
/// with the best validation objective.
pub fn train_hfnc_model(
    ds: &Dataset,
    kind: ModelKind,
    cfg: &RunConfig,
    seed: u64,
    pretext: Option<&ModelBundle>,
) -> Result<ModelBundle> {
    if !matches!(
        kind,
        ModelKind::Lstm | ModelKind::LstmPers | ModelKind::LstmTl | ModelKind::LstmPersTl
    ) {
        return Err(Error::Invalid(format!("{kind} is not a single LSTM kind")));
    }
    if kind.uses_transfer() != pretext.is_some() {
        return Err(Error::Invalid(format!(
            "{kind} {} a pretext model",
            if kind.uses_transfer() {
                "requires"
            } else {
                "does not take"
            }
        )));
    }
    let k = kind.perseveration(cfg);
    let mut seqs = Vec::new();
    for (i, t) in ds.trials.iter().enumerate() {
        if t.partition == Partition::Training {
            seqs.push(TrainSeq {
                id: i as u64,
                inputs: perseverate(&t.design.values, k)?,
                labels: perseverate_labels(t.labels(), k)?,
            });
        }
    }
    if seqs.is_empty() {
        return Err(Error::Empty("training partition"));
    }
    let val: Vec<&PreparedTrial> = ds.partition(Partition::Validation).collect();
    if val.is_empty() {
        return Err(Error::Empty("validation partition"));
    }
    let val_outcomes: Vec<TrialOutcome> = val.iter().map(|t| t.outcome.clone()).collect();
    let val_inputs: Vec<Array2<f64>> = val
        .iter()
        .map(|t| perseverate(&t.design.values, k))
        .collect::<Result<_>>()?;
    let val_refs: Vec<&Array2<f64>> = val_inputs.iter().collect();

    let model = initial_model(ds, cfg, seed, pretext)?;
    let mut opt = RmsProp::new(cfg.rmsprop(), &model);
    let setup = EpochSetup {
        cfg,
        seed,
        frozen_first: cfg.freeze_transferred && pretext.is_some(),
    };
    let (best, summary) = fit_loop(cfg.plateau(), cfg.max_epochs, model, |m, epoch, lr| {
        let loss = train_epoch(m, &mut opt, &seqs, &setup, epoch, lr)?;
        let mut preds = BTreeMap::new();
        for (t, p) in val.iter().zip(predict_lstm(m, &val_refs)?) {
            let s = PredictionSeries::new(
                t.trial.trial_id.clone(),
                t.design.times.clone(),
                last_copies(&p, k),
            )?;
            preds.insert(s.trial_id.clone(), s);
        }
        Ok((loss, validation_objective(&val_outcomes, &preds)))
    })?;
    if summary.history.iter().all(|r| r.objective.is_none()) && !summary.history.is_empty() {
        log::warn!(
            "validation objective undefined at every hour; selected epochs by training loss"
        );
    }
    let mut bundle = ModelBundle::new(
        kind,
        &ds.stats,
        k,
        SeedLineage {
            pretext: pretext.and_then(|p| p.seeds.pretext),
            finetune: Some(seed),
        },
        cfg,
        ModelParams::Lstm { stack: best },
        summary,
    );
    bundle.pretext_checkpoint = pretext.map(ModelBundle::checksum);
    Ok(bundle)
}

/// Elastic-net model on training-partition rows.
pub fn train_logistic(ds: &Dataset, kind: ModelKind, cfg: &RunConfig) -> Result<ModelBundle> {
    let (subset, features, lambda, alpha) = match kind {
        ModelKind::Lr14 => (
            "lr14",
            cfg.lr14_features.clone(),
            cfg.lr14_lambda,
            cfg.lr14_alpha,
        ),
        ModelKind::Lr517 => (
            "full",
            ds.stats.feature_names(),
            cfg.lr517_lambda,
            cfg.lr517_alpha,
        ),
        other => return Err(Error::Invalid(format!("{other} is not a regression kind"))),
    };
    let training: Vec<(&Array2<f64>, &[f64])> = ds
        .partition(Partition::Training)
        .map(|t| (&t.design.values, t.labels()))
        .collect();
    if training.is_empty() {
        return Err(Error::Empty("training partition"));
    }
    let solver: SolverConfig = cfg.solver();
    let model = ElasticNetModel::fit(subset, features, &ds.stats, training, lambda, alpha, solver)?;
    Ok(ModelBundle::new(
        kind,
        &ds.stats,
        1,
        SeedLineage::default(),
        cfg,
        ModelParams::ElasticNet { model },
        TrainingSummary::default(),
    ))
}

/// Maps `f` over `items` on up to `workers` threads; output order follows input order.
fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let f = &f;
    let mut slots: Vec<Option<Result<R>>> = (0..items.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || {
                    items
                        .iter()
                        .enumerate()
                        .skip(w)
                        .step_by(workers)
                        .map(|(i, item)| (i, f(item)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker thread panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("every slot filled"))
        .collect()
}

fn check_seeds(name: &str, seeds: &[u64], allow_duplicates: bool) -> Result<()> {
    if seeds.is_empty() {
        return Err(Error::Invalid(format!("no {name} seeds")));
    }
    if !allow_duplicates && seeds.iter().collect::<BTreeSet<_>>().len() != seeds.len() {
        return Err(Error::Invalid(format!("duplicate {name} seeds {seeds:?}")));
    }
    Ok(())
}

/// Members are LSTM+3xPers+TL models fine-tuned with each seed from one pretext model.
pub fn build_simple_ensemble(
    ds: &Dataset,
    cfg: &RunConfig,
    pretext: &ModelBundle,
    finetune_seeds: &[u64],
    allow_duplicates: bool,
) -> Result<EnsembleSpec> {
    check_seeds("fine-tune", finetune_seeds, allow_duplicates)?;
    let members = parallel_map(finetune_seeds, cfg.workers, |&s| {
        train_hfnc_model(ds, ModelKind::LstmPersTl, cfg, s, Some(pretext))
    })?;
    EnsembleSpec::new(ModelKind::SimpleEnsemble, members)
}

/// Every pretext seed crossed with every fine-tune seed, averaged flat.
pub fn build_multi_ensemble(
    ds: &Dataset,
    cfg: &RunConfig,
    pretext_seeds: &[u64],
    finetune_seeds: &[u64],
    allow_duplicates: bool,
) -> Result<EnsembleSpec> {
    check_seeds("pretext", pretext_seeds, allow_duplicates)?;
    check_seeds("fine-tune", finetune_seeds, allow_duplicates)?;
    let pretexts = parallel_map(pretext_seeds, cfg.workers, |&s| train_pretext(ds, cfg, s))?;
    let jobs: Vec<(usize, u64)> = (0..pretexts.len())
        .flat_map(|p| finetune_seeds.iter().map(move |&s| (p, s)))
        .collect();
    let members = parallel_map(&jobs, cfg.workers, |&(p, s)| {
        train_hfnc_model(ds, ModelKind::LstmPersTl, cfg, s, Some(&pretexts[p]))
    })?;
    EnsembleSpec::new(ModelKind::MultiEnsemble, members)
}

/// The pretext model a TL kind transfers from: loaded from `tl_source` when
/// configured, otherwise trained with `pretext_seed`.
pub fn pretext_for(ds: &Dataset, cfg: &RunConfig) -> Result<ModelBundle> {
    match &cfg.tl_source {
        Some(path) => {
            let b = ModelBundle::load(Path::new(path))?;
            check_pretext(ds, &b)?;
            Ok(b)
        }
        None => train_pretext(ds, cfg, cfg.pretext_seed),
    }
}

/// Trains any of the eight HFNC kinds with the seeds in `cfg`.
pub fn train_kind(ds: &Dataset, kind: ModelKind, cfg: &RunConfig) -> Result<Predictor> {
    Ok(match kind {
        ModelKind::Lr14 | ModelKind::Lr517 => Predictor::Single(train_logistic(ds, kind, cfg)?),
        ModelKind::Lstm | ModelKind::LstmPers => {
            Predictor::Single(train_hfnc_model(ds, kind, cfg, cfg.seed, None)?)
        }
        ModelKind::LstmTl | ModelKind::LstmPersTl => {
            let pretext = pretext_for(ds, cfg)?;
            Predictor::Single(train_hfnc_model(ds, kind, cfg, cfg.seed, Some(&pretext))?)
        }
        ModelKind::SimpleEnsemble => {
            let pretext = pretext_for(ds, cfg)?;
            Predictor::Ensemble(build_simple_ensemble(
                ds,
                cfg,
                &pretext,
                &cfg.finetune_seeds,
                false,
            )?)
        }
        ModelKind::MultiEnsemble => Predictor::Ensemble(build_multi_ensemble(
            ds,
            cfg,
            &cfg.pretext_seeds,
            &cfg.finetune_seeds,
            false,
        )?),
        ModelKind::Pretext => Predictor::Single(train_pretext(ds, cfg, cfg.pretext_seed)?),
    })
}
