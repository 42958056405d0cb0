//! Experiment configuration: one TOML file, every section optional.
//!
//! ```toml
//! version = 1
//! seeds = [1, 2, 3, 4, 5]
//! output_dir = "runs/default"
//!
//! [generator]
//! foi_prevalence = 0.1
//! redundancy = 0.7
//!
//! [training.server]
//! epochs = 60
//! modality_dropout = 0.2
//! ```
//!
//! Individual keys can be overridden with dotted `key=value` pairs, and the
//! output directory with `NEARSENSE_OUT_DIR`. The config hash covers every
//! field except `output_dir`.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::GenConfig;
use crate::edgecompact::{edge_pair_specs, EdgeOptions};
use crate::energymodel::EnergyConfig;
use crate::error::{ensure, Error, Result};
use crate::foslabeler::{FosMode, FosPolicy};
use crate::fusionmodel::FusionSpec;
use crate::nearsensor::check_grid;
use crate::nncore::{HyperGrid, MlpSpec, TrainConfig};
use crate::seed::sub_seed;

pub const CONFIG_VERSION: u32 = 1;
pub const OUT_DIR_ENV: &str = "NEARSENSE_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub generator: GenConfig,
    pub server: ServerShape,
    pub near_sensor: NearSensorSection,
    pub edge: EdgeSection,
    pub training: TrainingSection,
    pub fos: FosSection,
    pub tradeoff: TradeoffSection,
    pub energy: EnergySection,
}

/// Late-fusion server shape; every modality gets the same extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerShape {
    pub extractor_hidden: Vec<usize>,
    pub embedding_width: usize,
    pub head_hidden: Vec<usize>,
}

impl Default for ServerShape {
    fn default() -> Self {
        Self {
            extractor_hidden: vec![64],
            embedding_width: 32,
            head_hidden: vec![32],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NearSensorSection {
    pub hidden: Vec<usize>,
    /// Deployed τ per modality; empty means 0.5 everywhere.
    pub send_thresholds: Vec<f64>,
}

impl Default for NearSensorSection {
    fn default() -> Self {
        Self {
            hidden: vec![16],
            send_thresholds: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdgeSection {
    /// Ratio of the pair trained by `train-all`.
    pub size_ratio: f64,
    /// Ratios swept by `compact`.
    pub compact_ratios: Vec<f64>,
    pub options: EdgeOptions,
    /// Joules attributed to one server-model inference on the edge device;
    /// fixes the parameter-to-energy coefficient.
    pub reference_server_energy: f64,
}

impl Default for EdgeSection {
    fn default() -> Self {
        Self {
            size_ratio: 0.25,
            compact_ratios: vec![0.5, 0.25, 0.1, 0.05],
            options: EdgeOptions::default(),
            reference_server_energy: 1.0e-3,
        }
    }
}

/// Per-tier optimizer settings. A tier's `seed` is mixed into each run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub server: TrainConfig,
    pub near_sensor: TrainConfig,
    pub edge: TrainConfig,
    /// Search batch size and learning rate for the filter tiers.
    pub grid_search: bool,
    pub grid: HyperGrid,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            server: TrainConfig {
                modality_dropout: 0.2,
                ..TrainConfig::default()
            },
            near_sensor: TrainConfig::default(),
            edge: TrainConfig {
                batch_size: 8,
                ..TrainConfig::default()
            },
            grid_search: false,
            grid: HyperGrid::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tier {
    Server,
    NearSensor,
    Edge,
}

impl Tier {
    pub fn name(self) -> &'static str {
        match self {
            Tier::Server => "server",
            Tier::NearSensor => "near_sensor",
            Tier::Edge => "edge",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct FosSection {
    pub mode: FosMode,
    /// Empty means depth, rgb, then the rest.
    pub keep_priority: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TradeoffSection {
    pub grid: Vec<f64>,
    /// Data-efficiency levels compared in the summary.
    pub efficiency_levels: Vec<f64>,
}

impl Default for TradeoffSection {
    fn default() -> Self {
        Self {
            grid: (0..=200).map(|i| f64::from(i) / 200.0).collect(),
            efficiency_levels: vec![0.1, 0.2, 0.3, 0.5, 0.7, 0.8, 0.9, 0.95],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergySection {
    pub config: EnergyConfig,
    pub prevalences: Vec<f64>,
    pub n_frames: usize,
}

impl Default for EnergySection {
    fn default() -> Self {
        Self {
            config: EnergyConfig::reference(),
            prevalences: vec![0.01, 0.05, 0.10],
            n_frames: 20_000,
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seeds: vec![1, 2, 3, 4, 5],
            output_dir: PathBuf::from("runs/default"),
            generator: GenConfig::default(),
            server: ServerShape::default(),
            near_sensor: NearSensorSection::default(),
            edge: EdgeSection::default(),
            training: TrainingSection::default(),
            fos: FosSection::default(),
            tradeoff: TradeoffSection::default(),
            energy: EnergySection::default(),
        }
    }
}

fn set_key(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    ensure!(!key.is_empty(), Usage, "override `{assignment}` has an empty key");
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let (last, path) = parts.split_last().expect("split yields at least one part");
    let mut node = root;
    for p in path {
        node = node
            .as_table_mut()
            .and_then(|t| t.get_mut(*p))
            .ok_or_else(|| Error::Config(format!("unknown config section `{p}` in `{key}`")))?;
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("`{key}` does not name a table entry")))?;
    table.insert((*last).to_string(), value);
    Ok(())
}

/// Overlays `top` onto `base`, descending into tables present in both.
fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl ExperimentConfig {
    /// Reads `path` (or starts from the defaults), applies overrides and the
    /// output-directory environment variable, then validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut tree = toml::Value::try_from(Self::default())
            .map_err(|e| Error::Config(format!("default config does not serialize: {e}")))?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            let file = toml::from_str::<toml::Table>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            merge(&mut tree, toml::Value::Table(file));
        }
        for o in overrides {
            set_key(&mut tree, o)?;
        }
        let origin = path.map_or_else(|| "<defaults>".to_string(), |p| p.display().to_string());
        let mut cfg: Self = tree
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{origin}: {}", e.message())))?;
        if let Some(dir) = std::env::var_os(OUT_DIR_ENV).filter(|d| !d.is_empty()) {
            cfg.output_dir = PathBuf::from(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("config does not serialize: {e}")))
    }

    /// First 16 hex digits of SHA-256 over the config with `output_dir`
    /// blanked.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn n_modalities(&self) -> usize {
        self.generator.n_modalities
    }

    pub fn server_spec(&self) -> FusionSpec {
        let g = &self.generator;
        FusionSpec::from_widths(
            g.n_modalities,
            g.feature_width,
            g.n_labels,
            &self.server.extractor_hidden,
            self.server.embedding_width,
            &self.server.head_hidden,
            0,
        )
    }

    pub fn near_spec(&self) -> MlpSpec {
        let mut w = vec![self.generator.feature_width];
        w.extend_from_slice(&self.near_sensor.hidden);
        w.push(1);
        MlpSpec::new(w)
    }

    pub fn send_thresholds(&self) -> Vec<f64> {
        if self.near_sensor.send_thresholds.is_empty() {
            vec![0.5; self.n_modalities()]
        } else {
            self.near_sensor.send_thresholds.clone()
        }
    }

    pub fn fos_policy(&self) -> FosPolicy {
        let mut p = FosPolicy::default_for(self.n_modalities());
        p.mode = self.fos.mode;
        if !self.fos.keep_priority.is_empty() {
            p.keep_priority = self.fos.keep_priority.clone();
        }
        p
    }

    pub fn generator_for(&self, seed: u64) -> GenConfig {
        GenConfig {
            seed,
            ..self.generator.clone()
        }
    }

    /// Optimizer settings for `tier` in the replicate with run seed `seed`.
    pub fn train_config(&self, tier: Tier, seed: u64) -> TrainConfig {
        let base = match tier {
            Tier::Server => &self.training.server,
            Tier::NearSensor => &self.training.near_sensor,
            Tier::Edge => &self.training.edge,
        };
        TrainConfig {
            seed: sub_seed(seed.wrapping_add(base.seed), tier.name()),
            ..base.clone()
        }
    }

    pub fn hyper_grid(&self) -> Option<&HyperGrid> {
        self.training.grid_search.then_some(&self.training.grid)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.version == CONFIG_VERSION,
            Config,
            "config version {} is not supported (expected {CONFIG_VERSION})",
            self.version
        );
        ensure!(!self.seeds.is_empty(), Config, "seed list is empty");
        let unique: HashSet<u64> = self.seeds.iter().copied().collect();
        ensure!(unique.len() == self.seeds.len(), Config, "seed list has duplicates");
        self.generator.validate()?;
        let n = self.n_modalities();
        self.server_spec().validate()?;
        self.near_spec().validate()?;
        let taus = self.send_thresholds();
        ensure!(
            taus.len() == n && taus.iter().all(|t| (0.0..=1.0).contains(t)),
            Config,
            "near_sensor.send_thresholds needs {n} values in [0, 1]"
        );
        let ratio_ok = |r: &f64| *r > 0.0 && *r <= 1.0;
        ensure!(ratio_ok(&self.edge.size_ratio), Config, "edge.size_ratio must be in (0, 1]");
        ensure!(
            !self.edge.compact_ratios.is_empty() && self.edge.compact_ratios.iter().all(ratio_ok),
            Config,
            "edge.compact_ratios must be nonempty with values in (0, 1]"
        );
        // fail before training if a pair cannot be parameter-matched
        for &r in std::iter::once(&self.edge.size_ratio).chain(&self.edge.compact_ratios) {
            edge_pair_specs(&self.server_spec(), r)?;
        }
        ensure!(
            self.edge.reference_server_energy > 0.0,
            Config,
            "edge.reference_server_energy must be positive"
        );
        for tier in [Tier::Server, Tier::NearSensor, Tier::Edge] {
            self.train_config(tier, 0)
                .validate()
                .map_err(|e| Error::Config(format!("training.{}: {e}", tier.name())))?;
        }
        if self.training.grid_search {
            let g = &self.training.grid;
            ensure!(
                !g.batch_sizes.is_empty() && !g.learning_rates.is_empty(),
                Config,
                "training.grid is empty"
            );
        }
        self.fos_policy().validate(n)?;
        check_grid(&self.tradeoff.grid).map_err(|e| Error::Config(format!("tradeoff.grid: {e}")))?;
        ensure!(
            self.tradeoff.efficiency_levels.iter().all(|e| (0.0..=1.0).contains(e)),
            Config,
            "tradeoff.efficiency_levels must lie in [0, 1]"
        );
        self.energy.config.validate()?;
        ensure!(
            self.energy.config.n_modalities() == n,
            Config,
            "energy.config describes {} modalities, generator {n}",
            self.energy.config.n_modalities()
        );
        ensure!(!self.energy.prevalences.is_empty(), Config, "energy.prevalences is empty");
        ensure!(
            self.energy.prevalences.iter().all(|p| *p > 0.0 && *p < 1.0),
            Config,
            "energy.prevalences must lie in (0, 1)"
        );
        ensure!(self.energy.n_frames >= 2, Config, "energy.n_frames must be >= 2");
        Ok(())
    }
}
