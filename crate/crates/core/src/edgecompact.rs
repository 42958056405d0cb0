//! Training step 3: a reduced late-fusion model for the edge that also reads
//! the near-sensor scores at its fusion head, against a parameter-matched
//! baseline without scores.
//!
//! Shrinking: every hidden and embedding width of the server spec is scaled
//! by `s` (starting at `sqrt(ratio)` and lowered until the target is
//! reachable), then the head's first hidden width is trimmed so the
//! score-injected model lands as close as possible to `ratio × server
//! params`. The baseline shares the extractors and gets the head width that
//! best matches the score-injected total.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, Frame};
use crate::error::{ensure, Error, Result};
use crate::fusionmodel::{train_fusion, FusionModel, FusionSample, FusionSpec};
use crate::metrics::macro_f1;
use crate::nearsensor::{self, NearSensorModel};
use crate::nncore::{MlpSpec, TrainConfig, TrainLog};
use crate::seed::{self, sub_seed};

/// Maximum relative parameter mismatch tolerated within a pair.
pub const PARAM_MATCH_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ScoreSource {
    #[default]
    NearSensor,
    /// Uniform noise in (0, 1) in place of every score; ablation control.
    WhiteNoise { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EdgeOptions {
    /// When false, a filtered modality's score slot is zero.
    pub score_when_filtered: bool,
    pub score_source: ScoreSource,
}

impl Default for EdgeOptions {
    fn default() -> Self {
        Self {
            score_when_filtered: true,
            score_source: ScoreSource::NearSensor,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeFusionModel {
    pub model: FusionModel,
    pub uses_scores: bool,
    /// Actual parameter count divided by the server's.
    pub size_ratio: f64,
    /// The ratio the pair was built for.
    pub target_ratio: f64,
}

fn scale(w: usize, s: f64) -> usize {
    ((w as f64 * s).round() as usize).max(1)
}

fn shrunk(server: &FusionSpec, s: f64, head_first: Option<usize>, score_slots: usize) -> FusionSpec {
    let extractors: Vec<MlpSpec> = server
        .extractors
        .iter()
        .map(|e| {
            let mut w = e.layer_widths.clone();
            let last = w.len() - 1;
            for x in &mut w[1..=last] {
                *x = scale(*x, s);
            }
            MlpSpec { layer_widths: w, ..e.clone() }
        })
        .collect();
    let emb: usize = extractors.iter().map(MlpSpec::output_width).sum();
    let mut head = server.head.layer_widths.clone();
    let out = head.len() - 1;
    head[0] = emb + score_slots;
    for x in &mut head[1..out] {
        *x = scale(*x, s);
    }
    if let (Some(h), true) = (head_first, out > 1) {
        head[1] = h;
    }
    FusionSpec {
        extractors,
        head: MlpSpec {
            layer_widths: head,
            ..server.head.clone()
        },
        score_slots,
        decision_threshold: server.decision_threshold,
    }
}

/// Head width in `1..=limit` whose total parameter count is nearest `target`.
fn best_head_width(build: impl Fn(usize) -> FusionSpec, target: f64, limit: usize) -> FusionSpec {
    (1..=limit)
        .map(&build)
        .min_by(|a, b| {
            let da = (a.param_count() as f64 - target).abs();
            let db = (b.param_count() as f64 - target).abs();
            da.total_cmp(&db)
        })
        .expect("limit >= 1")
}

/// Specs for a (score-injected, baseline) pair at `ratio` of the server size.
pub fn edge_pair_specs(server: &FusionSpec, ratio: f64) -> Result<(FusionSpec, FusionSpec)> {
    server.validate()?;
    ensure!(ratio > 0.0 && ratio <= 1.0, Config, "size ratio must be in (0, 1], got {ratio}");
    let n = server.n_modalities();
    let target = ratio * server.param_count() as f64;
    let has_hidden_head = server.head.layer_widths.len() > 2;

    let mut s = ratio.sqrt();
    while s > 1e-3 && (shrunk(server, s, None, n).param_count() as f64) > target {
        s *= 0.98;
    }
    let limit = 4 * server.head.layer_widths.iter().max().copied().unwrap_or(1) + 64;
    // score-injected candidates, nearest the target first
    let mut candidates: Vec<FusionSpec> = if has_hidden_head {
        (1..=limit).map(|h| shrunk(server, s, Some(h), n)).collect()
    } else {
        vec![shrunk(server, s, None, n)]
    };
    candidates.sort_by(|a, b| {
        let da = (a.param_count() as f64 - target).abs();
        let db = (b.param_count() as f64 - target).abs();
        da.total_cmp(&db)
    });
    let off = |spec: &FusionSpec, matched: f64| (spec.param_count() as f64 - matched).abs() / matched;
    let baseline_for = |with_scores: &FusionSpec| -> FusionSpec {
        let matched = with_scores.param_count() as f64;
        let build = |sb: f64| {
            if has_hidden_head {
                best_head_width(|h| shrunk(server, sb, Some(h), 0), matched, limit)
            } else {
                shrunk(server, sb, None, 0)
            }
        };
        let shared = build(s);
        if off(&shared, matched) <= PARAM_MATCH_TOLERANCE {
            return shared;
        }
        // one head unit can exceed 1% of a small budget; step the
        // baseline's extractor scale by as little as possible
        (1..=15)
            .flat_map(|k| [k, -k])
            .map(|k| build((s * 0.98f64.powi(k)).min(1.0)))
            .find(|b| off(b, matched) <= PARAM_MATCH_TOLERANCE)
            .unwrap_or(shared)
    };
    // only the few nearest candidates stay close enough to the target
    for with_scores in candidates.iter().take(8) {
        let baseline = baseline_for(with_scores);
        if off(&baseline, with_scores.param_count() as f64) <= PARAM_MATCH_TOLERANCE {
            return Ok((with_scores.clone(), baseline));
        }
    }
    let best = &candidates[0];
    Err(Error::Config(format!(
        "cannot match baseline to score-injected model within 1% at ratio {ratio}: {} vs {} params",
        baseline_for(best).param_count(),
        best.param_count()
    )))
}

fn noise_scores(seed: u64, frame_id: u64, n: usize) -> Vec<f64> {
    let mut rng = seed::rng_for(seed, &format!("score-noise/{frame_id}"));
    (0..n).map(|_| rng.gen_range(f64::EPSILON..1.0)).collect()
}

/// What the edge model sees for one frame: features zero-filled where the
/// near-sensor filters dropped them, and the score slots.
pub fn edge_inputs(
    frame: &Frame,
    near_models: &[NearSensorModel],
    uses_scores: bool,
    opts: &EdgeOptions,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let decision = nearsensor::decide(near_models, &frame.features)?;
    let features = frame
        .features
        .iter()
        .zip(&decision.send)
        .map(|(f, &sent)| if sent { f.clone() } else { vec![0.0; f.len()] })
        .collect();
    let scores = if !uses_scores {
        Vec::new()
    } else {
        let raw = match opts.score_source {
            ScoreSource::NearSensor => decision.scores.clone(),
            ScoreSource::WhiteNoise { seed } => noise_scores(seed, frame.frame_id, decision.scores.len()),
        };
        raw.iter()
            .zip(&decision.send)
            .map(|(&s, &sent)| if sent || opts.score_when_filtered { s } else { 0.0 })
            .collect()
    };
    Ok((features, scores))
}

/// Trains one edge model on filtered training frames. Near-sensor models are
/// only read.
#[allow(clippy::too_many_arguments)]
pub fn train_edge_fusion(
    dataset: &Dataset,
    near_models: &[NearSensorModel],
    spec: &FusionSpec,
    tc: &TrainConfig,
    uses_scores: bool,
    opts: &EdgeOptions,
    server_params: usize,
    target_ratio: f64,
) -> Result<(EdgeFusionModel, TrainLog)> {
    let want_slots = if uses_scores { near_models.len() } else { 0 };
    ensure!(
        spec.score_slots == want_slots,
        Config,
        "edge spec has {} score slots, expected {want_slots}",
        spec.score_slots
    );
    ensure!(server_params > 0, Config, "server parameter count must be positive");
    let samples = dataset
        .train
        .iter()
        .map(|f| {
            let (features, scores) = edge_inputs(f, near_models, uses_scores, opts)?;
            Ok(FusionSample {
                features,
                scores,
                target: f.label_targets(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    // shared init seed: extractors start identical across a pair
    let (model, log) = train_fusion(spec.clone(), &samples, tc, sub_seed(tc.seed, "edge-init"))?;
    let size_ratio = model.param_count() as f64 / server_params as f64;
    Ok((
        EdgeFusionModel {
            model,
            uses_scores,
            size_ratio,
            target_ratio,
        },
        log,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgePair {
    pub with_scores: EdgeFusionModel,
    pub baseline: EdgeFusionModel,
}

pub fn train_edge_pair(
    dataset: &Dataset,
    near_models: &[NearSensorModel],
    server_spec: &FusionSpec,
    ratio: f64,
    tc: &TrainConfig,
    opts: &EdgeOptions,
) -> Result<EdgePair> {
    let (with_spec, base_spec) = edge_pair_specs(server_spec, ratio)?;
    let server_params = server_spec.param_count();
    let (with_scores, _) = train_edge_fusion(dataset, near_models, &with_spec, tc, true, opts, server_params, ratio)?;
    let (baseline, _) = train_edge_fusion(dataset, near_models, &base_spec, tc, false, opts, server_params, ratio)?;
    Ok(EdgePair { with_scores, baseline })
}

/// Macro-F1 of an edge model on filtered frames.
pub fn evaluate_edge(
    edge: &EdgeFusionModel,
    near_models: &[NearSensorModel],
    frames: &[Frame],
    opts: &EdgeOptions,
) -> Result<f64> {
    let keep = vec![true; edge.model.n_modalities()];
    let preds = frames
        .iter()
        .map(|f| {
            let (features, scores) = edge_inputs(f, near_models, edge.uses_scores, opts)?;
            Ok(edge.model.decide(&edge.model.scores_with(&features, &keep, &scores)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<Vec<bool>> = frames.iter().map(|f| f.labels.clone()).collect();
    macro_f1(&preds, &labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEvaluation {
    pub target_ratio: f64,
    pub seed: u64,
    pub params_with_scores: usize,
    pub params_baseline: usize,
    pub f1_server: f64,
    pub f1_with_scores: f64,
    pub f1_baseline: f64,
}

impl PairEvaluation {
    pub fn quality_loss_with(&self) -> f64 {
        (self.f1_server - self.f1_with_scores) / self.f1_server
    }

    pub fn quality_loss_baseline(&self) -> f64 {
        (self.f1_server - self.f1_baseline) / self.f1_server
    }
}

pub fn evaluate_pair(
    pair: &EdgePair,
    near_models: &[NearSensorModel],
    server: &FusionModel,
    test: &[Frame],
    seed: u64,
    opts: &EdgeOptions,
) -> Result<PairEvaluation> {
    let keep = vec![true; server.n_modalities()];
    let preds = test
        .iter()
        .map(|f| server.predict_frame(f, &keep))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<Vec<bool>> = test.iter().map(|f| f.labels.clone()).collect();
    let f1_server = macro_f1(&preds, &labels)?;
    ensure!(f1_server > 0.0, Data, "server macro-F1 is 0; quality loss undefined");
    Ok(PairEvaluation {
        target_ratio: pair.with_scores.target_ratio,
        seed,
        params_with_scores: pair.with_scores.model.param_count(),
        params_baseline: pair.baseline.model.param_count(),
        f1_server,
        f1_with_scores: evaluate_edge(&pair.with_scores, near_models, test, opts)?,
        f1_baseline: evaluate_edge(&pair.baseline, near_models, test, opts)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyPerParamMap {
    pub joules_per_parameter: f64,
    pub reference_server_energy: f64,
}

impl EnergyPerParamMap {
    /// Coefficient chosen so the server model maps to `reference_server_energy`.
    pub fn calibrated(server_params: usize, reference_server_energy: f64) -> Result<Self> {
        ensure!(server_params > 0, Config, "server parameter count must be positive");
        ensure!(reference_server_energy > 0.0, Config, "reference energy must be positive");
        Ok(Self {
            joules_per_parameter: reference_server_energy / server_params as f64,
            reference_server_energy,
        })
    }
}

pub fn params_to_energy(count: usize, map: &EnergyPerParamMap) -> f64 {
    count as f64 * map.joules_per_parameter
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompactRow {
    pub size_ratio: f64,
    pub params: usize,
    pub energy_joules: f64,
    pub f1_with_scores: f64,
    pub f1_baseline: f64,
    pub quality_loss_with: f64,
    pub quality_loss_baseline: f64,
    pub quality_loss_with_std: f64,
    pub quality_loss_baseline_std: f64,
    pub seed_count: usize,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aggregates per-seed pair evaluations into one row per target ratio
/// (ascending), with mean and sample standard deviation over seeds.
pub fn quality_loss_curve(evals: &[PairEvaluation], map: &EnergyPerParamMap) -> Result<Vec<CompactRow>> {
    let mut ratios: Vec<f64> = evals.iter().map(|e| e.target_ratio).collect();
    ratios.sort_by(f64::total_cmp);
    ratios.dedup();
    ensure!(!ratios.is_empty(), Usage, "no pair evaluations");
    ratios
        .into_iter()
        .map(|r| {
            let group: Vec<&PairEvaluation> = evals.iter().filter(|e| e.target_ratio == r).collect();
            if group.len() < 2 {
                return Err(Error::Usage(format!(
                    "ratio {r}: {} seed(s); at least 2 are needed for a spread",
                    group.len()
                )));
            }
            let col = |f: fn(&PairEvaluation) -> f64| group.iter().map(|e| f(e)).collect::<Vec<_>>();
            let (ql_w, ql_w_sd) = mean_std(&col(PairEvaluation::quality_loss_with));
            let (ql_b, ql_b_sd) = mean_std(&col(PairEvaluation::quality_loss_baseline));
            let params = group[0].params_with_scores;
            Ok(CompactRow {
                size_ratio: r,
                params,
                energy_joules: params_to_energy(params, map),
                f1_with_scores: mean_std(&col(|e| e.f1_with_scores)).0,
                f1_baseline: mean_std(&col(|e| e.f1_baseline)).0,
                quality_loss_with: ql_w,
                quality_loss_baseline: ql_b,
                quality_loss_with_std: ql_w_sd,
                quality_loss_baseline_std: ql_b_sd,
                seed_count: group.len(),
            })
        })
        .collect()
}
