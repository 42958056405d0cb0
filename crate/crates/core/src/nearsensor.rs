//! Per-modality binary filters that decide, from one sensor's data alone,
//! whether that modality's frame is transmitted.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, Frame};
use crate::error::{ensure, Error, Result};
use crate::foslabeler::FosRecord;
use crate::nncore::{self, Example, HyperGrid, MlpModel, MlpSpec, TrainConfig, TrainLog};
use crate::par::{self, Exec};
use crate::seed::sub_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct NearSensorModel {
    pub modality: usize,
    pub model: MlpModel,
    pub send_threshold: f64,
}

/// Default near-sensor shape `[F, 16, 1]`.
pub fn default_spec(feature_width: usize) -> MlpSpec {
    MlpSpec::new(vec![feature_width, 16, 1])
}

impl NearSensorModel {
    pub fn score(&self, features: &[f64]) -> Result<f64> {
        Ok(self.model.forward(features)?[0])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.model.save(path)
    }

    pub fn load(path: &Path, modality: usize, send_threshold: f64) -> Result<Self> {
        let model = MlpModel::load(path)?;
        ensure!(
            model.spec().output_width() == 1,
            Data,
            "{}: near-sensor model must have one output",
            path.display()
        );
        Ok(Self {
            modality,
            model,
            send_threshold,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub send: Vec<bool>,
    pub scores: Vec<f64>,
}

impl FilterDecision {
    pub fn from_scores(scores: Vec<f64>, thresholds: impl IntoIterator<Item = f64>) -> Self {
        let send = scores.iter().zip(thresholds).map(|(&s, t)| s >= t).collect();
        Self { send, scores }
    }

    pub fn any_sent(&self) -> bool {
        self.send.iter().any(|&s| s)
    }
}

fn check_spec(spec: &MlpSpec, dataset: &Dataset, modality: usize) -> Result<()> {
    spec.validate()?;
    ensure!(
        modality < dataset.config.n_modalities,
        Config,
        "modality {modality} out of range"
    );
    ensure!(
        spec.input_width() == dataset.config.feature_width && spec.output_width() == 1,
        Config,
        "near-sensor spec {:?} must map width {} to 1",
        spec.layer_widths,
        dataset.config.feature_width
    );
    Ok(())
}

fn train_filter(
    examples: Vec<Example>,
    modality: usize,
    spec: &MlpSpec,
    tc: &TrainConfig,
    tier: &str,
    grid: Option<&HyperGrid>,
) -> Result<(NearSensorModel, TrainLog)> {
    let init = MlpModel::init(spec.clone(), sub_seed(tc.seed, &format!("{tier}-init/{modality}")))?;
    let (model, log) = match grid {
        None => nncore::train(init, &examples, tc)?,
        Some(g) => {
            let (model, log, _) = nncore::grid_search(&init, &examples, tc, g)?;
            (model, log)
        }
    };
    Ok((
        NearSensorModel {
            modality,
            model,
            send_threshold: 0.5,
        },
        log,
    ))
}

/// Fits `modality`'s filter to the augmented send labels.
pub fn train_near_sensor(
    records: &[FosRecord],
    dataset: &Dataset,
    modality: usize,
    spec: &MlpSpec,
    tc: &TrainConfig,
) -> Result<(NearSensorModel, TrainLog)> {
    train_near_sensor_with(records, dataset, modality, spec, tc, None)
}

/// [`train_near_sensor`], optionally picking batch size and learning rate
/// from `grid` by validation loss.
pub fn train_near_sensor_with(
    records: &[FosRecord],
    dataset: &Dataset,
    modality: usize,
    spec: &MlpSpec,
    tc: &TrainConfig,
    grid: Option<&HyperGrid>,
) -> Result<(NearSensorModel, TrainLog)> {
    check_spec(spec, dataset, modality)?;
    let by_id: HashMap<u64, &FosRecord> = records.iter().map(|r| (r.frame_id, r)).collect();
    let examples = dataset
        .train
        .iter()
        .map(|f| {
            let r = by_id
                .get(&f.frame_id)
                .ok_or_else(|| Error::Data(format!("no FoS record for training frame {}", f.frame_id)))?;
            ensure!(
                r.send_label.len() == dataset.config.n_modalities,
                Data,
                "FoS record {} has {} send labels",
                r.frame_id,
                r.send_label.len()
            );
            Ok(Example {
                input: f.features[modality].clone(),
                target: vec![f64::from(u8::from(r.send_label[modality]))],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    train_filter(examples, modality, spec, tc, "near", grid)
}

/// Prior-work filter: same architecture, trained to send on every frame of
/// interest regardless of what the other modalities carry.
pub fn train_unimodal_filter(
    dataset: &Dataset,
    modality: usize,
    spec: &MlpSpec,
    tc: &TrainConfig,
) -> Result<(NearSensorModel, TrainLog)> {
    train_unimodal_filter_with(dataset, modality, spec, tc, None)
}

pub fn train_unimodal_filter_with(
    dataset: &Dataset,
    modality: usize,
    spec: &MlpSpec,
    tc: &TrainConfig,
    grid: Option<&HyperGrid>,
) -> Result<(NearSensorModel, TrainLog)> {
    check_spec(spec, dataset, modality)?;
    let examples = dataset
        .train
        .iter()
        .map(|f| Example {
            input: f.features[modality].clone(),
            target: vec![f64::from(u8::from(f.foi))],
        })
        .collect();
    train_filter(examples, modality, spec, tc, "unimodal", grid)
}

fn check_models(models: &[NearSensorModel], features: &[Vec<f64>]) -> Result<()> {
    ensure!(
        models.len() == features.len(),
        Shape,
        "{} filters for {} modalities",
        models.len(),
        features.len()
    );
    for (m, model) in models.iter().enumerate() {
        ensure!(model.modality == m, Shape, "filter {m} is bound to modality {}", model.modality);
    }
    Ok(())
}

/// Per-modality scores; filter `m` reads only `features[m]`.
pub fn filter_scores(models: &[NearSensorModel], features: &[Vec<f64>]) -> Result<Vec<f64>> {
    check_models(models, features)?;
    models.iter().map(|m| m.score(&features[m.modality])).collect()
}

/// Run-time gate: each modality is thresholded independently at its own τ.
pub fn decide(models: &[NearSensorModel], features: &[Vec<f64>]) -> Result<FilterDecision> {
    let scores = filter_scores(models, features)?;
    Ok(FilterDecision::from_scores(scores, models.iter().map(|m| m.send_threshold)))
}

/// Scores for every frame, computed once and reusable across thresholds.
pub fn score_frames(exec: Exec, models: &[NearSensorModel], frames: &[Frame]) -> Result<Vec<Vec<f64>>> {
    par::try_map(exec, frames, |f| filter_scores(models, &f.features))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau: f64,
    pub send_rate: Vec<f64>,
}

pub(crate) fn check_grid(grid: &[f64]) -> Result<()> {
    ensure!(!grid.is_empty(), Usage, "empty threshold grid");
    ensure!(
        grid.iter().all(|t| (0.0..=1.0).contains(t)),
        Usage,
        "threshold grid values must lie in [0, 1]"
    );
    Ok(())
}

pub fn sweep_thresholds(models: &[NearSensorModel], frames: &[Frame], grid: &[f64]) -> Result<Vec<SweepRow>> {
    sweep_thresholds_with(Exec::default(), models, frames, grid)
}

/// Applies each shared τ to every modality and reports per-modality send
/// rates.
pub fn sweep_thresholds_with(
    exec: Exec,
    models: &[NearSensorModel],
    frames: &[Frame],
    grid: &[f64],
) -> Result<Vec<SweepRow>> {
    check_grid(grid)?;
    ensure!(!frames.is_empty(), Usage, "threshold sweep over no frames");
    let scores = score_frames(exec, models, frames)?;
    let n = frames.len() as f64;
    Ok(par::map(exec, grid, |&tau| {
        let send_rate = (0..models.len())
            .map(|m| scores.iter().filter(|s| s[m] >= tau).count() as f64 / n)
            .collect();
        SweepRow { tau, send_rate }
    }))
}
