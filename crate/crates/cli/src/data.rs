//! Cohort directories, run directories and the run manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hfnc_core::catalog::{
    assemble_episodes, parse_observation_stream, read_headers, Catalog, Episode,
};
use hfnc_core::config::RunConfig;
use hfnc_core::trainer::{sha256_hex, ModelKind};
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG_ECHO: &str = "config.json";

pub struct Cohort {
    pub catalog: Catalog,
    pub episodes: Vec<Episode>,
    /// sha256 over the input files, in a fixed order.
    pub digest: String,
}

fn observations_path(dir: &Path) -> Result<PathBuf> {
    ["observations.csv", "observations.jsonl"]
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.exists())
        .with_context(|| {
            format!(
                "{}: no observations.csv or observations.jsonl",
                dir.display()
            )
        })
}

pub fn load_cohort(dir: &Path) -> Result<Cohort> {
    let catalog_path = dir.join("catalog.json");
    let headers_path = dir.join("episodes.jsonl");
    let obs_path = observations_path(dir)?;
    let mut digest_input = Vec::new();
    for p in [&catalog_path, &obs_path, &headers_path] {
        let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
        digest_input.extend(sha256_hex(&bytes).into_bytes());
    }
    let catalog = Catalog::from_json(BufReader::new(File::open(&catalog_path)?))?;
    let parsed = parse_observation_stream(BufReader::new(File::open(&obs_path)?), &catalog)?;
    if !parsed.rejected.is_empty() {
        log::warn!(
            "{} observation lines rejected (first at line {}: {})",
            parsed.rejected.len(),
            parsed.rejected[0].line,
            parsed.rejected[0].message
        );
    }
    let headers = read_headers(BufReader::new(File::open(&headers_path)?))?;
    let episodes = assemble_episodes(parsed.records, headers, &catalog)?;
    Ok(Cohort {
        catalog,
        episodes,
        digest: sha256_hex(&digest_input),
    })
}

pub fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(hfnc_core::config::load_config(p)?),
        None => Ok(RunConfig::default()),
    }
}

/// Run directory name: hash of the effective config (model kind excluded,
/// so all kinds trained under one config share a directory) and the data.
pub fn run_id(cfg: &RunConfig, data_digest: &str) -> String {
    let normalized = RunConfig {
        kind: ModelKind::LstmPersTl,
        workers: 1,
        ..cfg.clone()
    };
    sha256_hex(format!("{}{data_digest}", normalized.hash()).as_bytes())[..16].to_string()
}

/// One per output directory; lists every artifact written there.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub data_digest: Option<String>,
    pub catalog_hash: Option<String>,
    pub seeds: BTreeMap<String, Vec<u64>>,
    pub artifacts: BTreeSet<String>,
}

impl RunManifest {
    pub fn new(config_hash: String) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config_hash,
            ..Self::default()
        }
    }

    pub fn for_run(cfg: &RunConfig, data_digest: &str) -> Self {
        let mut m = Self::new(run_id(cfg, data_digest));
        m.data_digest = Some(data_digest.into());
        m.seeds.insert("split".into(), vec![cfg.split_seed]);
        m.seeds.insert("finetune".into(), vec![cfg.seed]);
        m.seeds.insert("pretext".into(), vec![cfg.pretext_seed]);
        m.seeds
            .insert("ensemble_pretext".into(), cfg.pretext_seeds.clone());
        m.seeds
            .insert("ensemble_finetune".into(), cfg.finetune_seeds.clone());
        m
    }

    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let p = dir.join(MANIFEST);
        if !p.exists() {
            return Ok(None);
        }
        let m = serde_json::from_slice(&std::fs::read(&p)?)
            .with_context(|| format!("parsing {}", p.display()))?;
        Ok(Some(m))
    }

    /// Merges with the manifest already in `dir`, which must describe the
    /// same config and data, then writes it.
    pub fn save_merged(mut self, dir: &Path) -> Result<()> {
        if let Some(old) = Self::load(dir)? {
            if old.config_hash != self.config_hash || old.data_digest != self.data_digest {
                bail!(
                    "{} holds outputs of a different config or dataset",
                    dir.display()
                );
            }
            self.artifacts.extend(old.artifacts);
            if self.catalog_hash.is_none() {
                self.catalog_hash = old.catalog_hash;
            }
        }
        for a in &self.artifacts {
            if !dir.join(a).exists() {
                bail!("manifest artifact {a} is missing");
            }
        }
        let mut bytes = serde_json::to_vec_pretty(&self)?;
        bytes.push(b'\n');
        std::fs::write(dir.join(MANIFEST), bytes)?;
        Ok(())
    }
}

/// Reads the config echoed into a run directory.
pub fn run_config(run: &Path) -> Result<RunConfig> {
    let p = run.join(CONFIG_ECHO);
    hfnc_core::config::load_config(&p).with_context(|| format!("loading {}", p.display()))
}

/// Parses `2h`, `90m`, `90min` or a bare number of minutes.
pub fn parse_minutes(s: &str) -> Result<f64, String> {
    let s = s.trim();
    let (num, scale) = if let Some(v) = s.strip_suffix('h') {
        (v, 60.0)
    } else if let Some(v) = s.strip_suffix("min").or_else(|| s.strip_suffix('m')) {
        (v, 1.0)
    } else {
        (s, 1.0)
    };
    let v: f64 = num
        .trim()
        .parse()
        .map_err(|_| format!("cannot read `{s}` as a duration"))?;
    if !(v >= 0.0 && v.is_finite()) {
        return Err(format!("duration `{s}` must be non-negative"));
    }
    Ok(v * scale)
}
