//! Per-frame energy accounting for four sensing pipelines:
//!
//! * `conventional`: sense everything, transmit every byte, run the server
//!   on every frame.
//! * `compression`: as conventional, plus per-modality compression compute,
//!   transmitting `bytes × compression_ratio`.
//! * `unimodal_filter` / `fusionsense`: sense everything, run every
//!   near-sensor filter on every frame, transmit only the modalities the
//!   filters pass, and run the server only when at least one arrives. The
//!   two differ only in which filters produced the decisions.
//!
//! Constants are calibration values, not measurements.

use serde::{Deserialize, Serialize};

use crate::datagen::{self, GenConfig};
use crate::error::{ensure, Result};
use crate::nearsensor::{self, NearSensorModel};
use crate::par::{self, Exec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyConfig {
    pub bytes_per_frame: Vec<u64>,
    pub e_sense: Vec<f64>,
    pub e_nearsensor_infer: Vec<f64>,
    pub e_compress: Vec<f64>,
    pub compression_ratio: f64,
    pub e_tx_per_byte: f64,
    pub e_server_infer: f64,
    pub foi_prevalence: f64,
}

impl EnergyConfig {
    /// Reference calibration for two modalities: a 224×224 RGB frame
    /// (3 bytes/pixel) and a 224×224 8-bit depth map, an Edge-TPU-class
    /// near-sensor filter, a Wi-Fi-class uplink and a GPU server.
    pub fn reference() -> Self {
        Self {
            bytes_per_frame: vec![150_528, 50_176],
            e_sense: vec![1.5e-4, 1.0e-4],
            e_nearsensor_infer: vec![5.0e-5, 5.0e-5],
            e_compress: vec![1.2e-3, 4.0e-4],
            compression_ratio: 0.5,
            e_tx_per_byte: 2.0e-7,
            e_server_infer: 5.0e-3,
            foi_prevalence: 0.01,
        }
    }

    pub fn n_modalities(&self) -> usize {
        self.bytes_per_frame.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_modalities();
        ensure!(n >= 1, Config, "energy config needs at least one modality");
        ensure!(
            self.e_sense.len() == n && self.e_nearsensor_infer.len() == n && self.e_compress.len() == n,
            Config,
            "per-modality energy vectors must all have {n} entries"
        );
        let all = self
            .e_sense
            .iter()
            .chain(&self.e_nearsensor_infer)
            .chain(&self.e_compress)
            .chain([&self.e_tx_per_byte, &self.e_server_infer]);
        for &e in all {
            ensure!(e >= 0.0 && e.is_finite(), Config, "energies must be finite and >= 0, got {e}");
        }
        ensure!(
            self.compression_ratio > 0.0 && self.compression_ratio <= 1.0,
            Config,
            "compression_ratio must be in (0, 1], got {}",
            self.compression_ratio
        );
        ensure!(
            self.foi_prevalence > 0.0 && self.foi_prevalence < 1.0,
            Config,
            "foi_prevalence must be in (0, 1), got {}",
            self.foi_prevalence
        );
        Ok(())
    }

    /// Every energy constant multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        let s = |v: &[f64]| v.iter().map(|x| x * k).collect();
        Self {
            e_sense: s(&self.e_sense),
            e_nearsensor_infer: s(&self.e_nearsensor_infer),
            e_compress: s(&self.e_compress),
            e_tx_per_byte: self.e_tx_per_byte * k,
            e_server_infer: self.e_server_infer * k,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    Conventional,
    Compression,
    UnimodalFilter,
    Fusionsense,
}

impl Pipeline {
    pub const ALL: [Pipeline; 4] = [
        Pipeline::Conventional,
        Pipeline::Compression,
        Pipeline::UnimodalFilter,
        Pipeline::Fusionsense,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Pipeline::Conventional => "conventional",
            Pipeline::Compression => "compression",
            Pipeline::UnimodalFilter => "unimodal_filter",
            Pipeline::Fusionsense => "fusionsense",
        }
    }

    pub fn is_filter(self) -> bool {
        matches!(self, Pipeline::UnimodalFilter | Pipeline::Fusionsense)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Components {
    pub sensing: f64,
    pub near_compute: f64,
    pub compression: f64,
    pub communication: f64,
    pub server_compute: f64,
}

impl Components {
    pub fn total(&self) -> f64 {
        self.sensing + self.near_compute + self.compression + self.communication + self.server_compute
    }

    pub fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("sensing", self.sensing),
            ("near_compute", self.near_compute),
            ("compression", self.compression),
            ("communication", self.communication),
            ("server_compute", self.server_compute),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub pipeline: Pipeline,
    pub components: Components,
    pub total: f64,
    /// Total divided by the conventional total of the same scenario; set by
    /// [`normalize`].
    pub normalized_total: f64,
}

impl EnergyBreakdown {
    fn new(pipeline: Pipeline, components: Components) -> Self {
        Self {
            pipeline,
            total: components.total(),
            components,
            normalized_total: f64::NAN,
        }
    }
}

/// Accounts `n_frames` frames through `pipeline`. Filter pipelines need one
/// send-vector per frame.
pub fn account_pipeline(
    pipeline: Pipeline,
    decisions: Option<&[Vec<bool>]>,
    config: &EnergyConfig,
    n_frames: usize,
) -> Result<EnergyBreakdown> {
    config.validate()?;
    let n = n_frames as f64;
    let sense_all: f64 = config.e_sense.iter().sum();
    let bytes_all: u64 = config.bytes_per_frame.iter().sum();
    let mut c = Components {
        sensing: n * sense_all,
        ..Default::default()
    };
    match pipeline {
        Pipeline::Conventional => {
            c.communication = config.e_tx_per_byte * (bytes_all * n_frames as u64) as f64;
            c.server_compute = n * config.e_server_infer;
        }
        Pipeline::Compression => {
            c.compression = n * config.e_compress.iter().sum::<f64>();
            c.communication =
                config.e_tx_per_byte * config.compression_ratio * (bytes_all * n_frames as u64) as f64;
            c.server_compute = n * config.e_server_infer;
        }
        Pipeline::UnimodalFilter | Pipeline::Fusionsense => {
            let decisions = decisions.ok_or_else(|| {
                crate::error::Error::Usage(format!("pipeline {} needs filter decisions", pipeline.name()))
            })?;
            ensure!(
                decisions.len() == n_frames,
                Data,
                "{} decisions for {n_frames} frames",
                decisions.len()
            );
            let mut sent_bytes: u64 = 0;
            let mut served: u64 = 0;
            for (i, d) in decisions.iter().enumerate() {
                ensure!(
                    d.len() == config.n_modalities(),
                    Data,
                    "frame {i}: {} send bits for {} modalities",
                    d.len(),
                    config.n_modalities()
                );
                sent_bytes += d
                    .iter()
                    .zip(&config.bytes_per_frame)
                    .filter(|(&s, _)| s)
                    .map(|(_, &b)| b)
                    .sum::<u64>();
                served += u64::from(d.iter().any(|&s| s));
            }
            c.near_compute = n * config.e_nearsensor_infer.iter().sum::<f64>();
            c.communication = config.e_tx_per_byte * sent_bytes as f64;
            c.server_compute = served as f64 * config.e_server_infer;
        }
    }
    Ok(EnergyBreakdown::new(pipeline, c))
}

/// Fills `normalized_total` relative to the conventional entry.
pub fn normalize(breakdowns: &mut [EnergyBreakdown]) -> Result<()> {
    let conv = breakdowns
        .iter()
        .find(|b| b.pipeline == Pipeline::Conventional)
        .map(|b| b.total)
        .ok_or_else(|| crate::error::Error::Usage("normalization needs a conventional breakdown".into()))?;
    ensure!(conv > 0.0, Data, "conventional total is zero");
    for b in breakdowns.iter_mut() {
        b.normalized_total = b.total / conv;
    }
    Ok(())
}

/// The two filter sets deployed in a scenario, plus the generator used to
/// synthesize fresh streams for them.
pub struct FilterSystem<'a> {
    pub generator: &'a GenConfig,
    pub fusion_aware: &'a [NearSensorModel],
    pub unimodal: &'a [NearSensorModel],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRecord {
    pub foi_prevalence: f64,
    pub n_frames: usize,
    pub breakdown: EnergyBreakdown,
    /// Conventional total divided by this pipeline's total.
    pub savings_ratio: f64,
}

/// Stream index used for energy scenarios, distinct from the training
/// stream.
pub const ENERGY_STREAM: u64 = 1;

pub fn scenario_sweep(
    template: &EnergyConfig,
    prevalences: &[f64],
    system: &FilterSystem<'_>,
    n_frames: usize,
) -> Result<Vec<ScenarioRecord>> {
    scenario_sweep_with(Exec::default(), template, prevalences, system, n_frames)
}

/// For each prevalence, regenerates a stream with the system's templates,
/// runs both filter sets and accounts all four pipelines.
pub fn scenario_sweep_with(
    exec: Exec,
    template: &EnergyConfig,
    prevalences: &[f64],
    system: &FilterSystem<'_>,
    n_frames: usize,
) -> Result<Vec<ScenarioRecord>> {
    ensure!(!prevalences.is_empty(), Usage, "no prevalences to sweep");
    ensure!(n_frames >= 2, Config, "scenario needs at least 2 frames");
    for &p in prevalences {
        ensure!(p > 0.0 && p < 1.0, Config, "prevalence must be in (0, 1), got {p}");
    }
    template.validate()?;
    ensure!(
        template.n_modalities() == system.generator.n_modalities,
        Config,
        "energy config has {} modalities, generator {}",
        template.n_modalities(),
        system.generator.n_modalities
    );
    let per_p = par::try_map(exec, prevalences, |&p| {
        let cfg = GenConfig {
            foi_prevalence: p,
            n_frames,
            stream: ENERGY_STREAM,
            ..system.generator.clone()
        };
        let frames = datagen::generate_frames(&cfg)?;
        let sends = |models: &[NearSensorModel]| -> Result<Vec<Vec<bool>>> {
            frames
                .iter()
                .map(|f| Ok(nearsensor::decide(models, &f.features)?.send))
                .collect()
        };
        let uni = sends(system.unimodal)?;
        let fus = sends(system.fusion_aware)?;
        let energy = EnergyConfig {
            foi_prevalence: p,
            ..template.clone()
        };
        let mut rows = vec![
            account_pipeline(Pipeline::Conventional, None, &energy, n_frames)?,
            account_pipeline(Pipeline::Compression, None, &energy, n_frames)?,
            account_pipeline(Pipeline::UnimodalFilter, Some(&uni), &energy, n_frames)?,
            account_pipeline(Pipeline::Fusionsense, Some(&fus), &energy, n_frames)?,
        ];
        normalize(&mut rows)?;
        let conv = rows[0].total;
        Ok(rows
            .into_iter()
            .map(|b| ScenarioRecord {
                foi_prevalence: p,
                n_frames,
                savings_ratio: conv / b.total,
                breakdown: b,
            })
            .collect::<Vec<_>>())
    })?;
    Ok(per_p.into_iter().flatten().collect())
}
