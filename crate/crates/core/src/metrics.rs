//! Task-quality and data-volume metrics.
//!
//! Per-label F1 is `2TP / (2TP + FP + FN)`; a label with no positives in
//! either predictions or ground truth scores 1.0. Macro-F1 is the
//! unweighted mean over labels.

use serde::{Deserialize, Serialize};

use crate::datagen::Frame;
use crate::error::{ensure, Error, Result};
use crate::fusionmodel::FusionModel;
use crate::nearsensor::{self, check_grid, FilterDecision, NearSensorModel};
use crate::par::{self, Exec};

pub fn macro_f1(predictions: &[Vec<bool>], labels: &[Vec<bool>]) -> Result<f64> {
    ensure!(
        predictions.len() == labels.len(),
        Shape,
        "{} prediction rows vs {} label rows",
        predictions.len(),
        labels.len()
    );
    let n_labels = labels.first().or(predictions.first()).map_or(0, Vec::len);
    ensure!(n_labels > 0, Shape, "macro_f1 needs at least one label column");
    let mut counts = vec![(0usize, 0usize, 0usize); n_labels];
    for (row, (p, y)) in predictions.iter().zip(labels).enumerate() {
        ensure!(
            p.len() == n_labels && y.len() == n_labels,
            Shape,
            "row {row}: widths {} / {} differ from {n_labels}",
            p.len(),
            y.len()
        );
        for ((&pi, &yi), c) in p.iter().zip(y).zip(counts.iter_mut()) {
            match (pi, yi) {
                (true, true) => c.0 += 1,
                (true, false) => c.1 += 1,
                (false, true) => c.2 += 1,
                (false, false) => {}
            }
        }
    }
    let sum: f64 = counts
        .iter()
        .map(|&(tp, fp, fn_)| {
            let denom = 2 * tp + fp + fn_;
            if denom == 0 {
                1.0
            } else {
                (2 * tp) as f64 / denom as f64
            }
        })
        .sum();
    Ok(sum / n_labels as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    /// Fraction of all bytes that were not transmitted.
    pub data_efficiency: f64,
    /// `(F1_full - F1_filtered) / F1_full`; negative if filtering helped.
    pub quality_loss: f64,
    pub sent_fraction: Vec<f64>,
    pub f1_full: f64,
    pub f1_filtered: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub tau: f64,
    #[serde(flatten)]
    pub outcome: FilterOutcome,
}

/// Server decisions for every frame under every keep-mask, so that many
/// filter settings can be scored without re-running the server.
pub struct FilterEvaluator<'a> {
    frames: &'a [Frame],
    bytes: Vec<u64>,
    labels: Vec<Vec<bool>>,
    /// `[frame][mask bits]`, bit `m` set = modality `m` kept.
    decisions: Vec<Vec<Vec<bool>>>,
    f1_full: f64,
}

const MAX_MASKED_MODALITIES: usize = 8;

impl<'a> FilterEvaluator<'a> {
    pub fn new(exec: Exec, server: &FusionModel, frames: &'a [Frame], bytes_per_modality: &[u64]) -> Result<Self> {
        let n = server.n_modalities();
        ensure!(
            bytes_per_modality.len() == n,
            Config,
            "{} byte sizes for {n} modalities",
            bytes_per_modality.len()
        );
        ensure!(
            bytes_per_modality.iter().any(|&b| b > 0),
            Config,
            "total bytes per frame must be positive"
        );
        ensure!(!frames.is_empty(), Usage, "no frames to evaluate");
        ensure!(n <= MAX_MASKED_MODALITIES, Config, "too many modalities to enumerate masks");
        let decisions = par::try_map(exec, frames, |f| {
            (0..1usize << n)
                .map(|bits| {
                    let mask: Vec<bool> = (0..n).map(|m| bits >> m & 1 == 1).collect();
                    server.predict_frame(f, &mask)
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let labels: Vec<Vec<bool>> = frames.iter().map(|f| f.labels.clone()).collect();
        let full = (1usize << n) - 1;
        let full_preds: Vec<Vec<bool>> = decisions.iter().map(|d| d[full].clone()).collect();
        let f1_full = macro_f1(&full_preds, &labels)?;
        Ok(Self {
            frames,
            bytes: bytes_per_modality.to_vec(),
            labels,
            decisions,
            f1_full,
        })
    }

    pub fn f1_full(&self) -> f64 {
        self.f1_full
    }

    pub fn evaluate(&self, sends: &[Vec<bool>]) -> Result<FilterOutcome> {
        ensure!(
            sends.len() == self.frames.len(),
            Data,
            "{} decisions for {} frames",
            sends.len(),
            self.frames.len()
        );
        let n = self.bytes.len();
        ensure!(
            self.f1_full > 0.0,
            Data,
            "server macro-F1 on full inputs is 0; quality loss undefined"
        );
        let mut sent_bytes: u64 = 0;
        let mut sent_count = vec![0usize; n];
        let mut preds = Vec::with_capacity(sends.len());
        for (i, s) in sends.iter().enumerate() {
            ensure!(s.len() == n, Data, "frame {i}: {} send bits for {n} modalities", s.len());
            let mut bits = 0usize;
            for (m, &keep) in s.iter().enumerate() {
                if keep {
                    bits |= 1 << m;
                    sent_bytes += self.bytes[m];
                    sent_count[m] += 1;
                }
            }
            preds.push(self.decisions[i][bits].clone());
        }
        let total: u64 = self.bytes.iter().sum::<u64>() * self.frames.len() as u64;
        let f1_filtered = macro_f1(&preds, &self.labels)?;
        Ok(FilterOutcome {
            data_efficiency: (total - sent_bytes) as f64 / total as f64,
            quality_loss: (self.f1_full - f1_filtered) / self.f1_full,
            sent_fraction: sent_count.iter().map(|&c| c as f64 / self.frames.len() as f64).collect(),
            f1_full: self.f1_full,
            f1_filtered,
        })
    }
}

/// Dropped modalities are zero-filled before the server sees the frame.
pub fn evaluate_filtered(
    server: &FusionModel,
    frames: &[Frame],
    decisions: &[FilterDecision],
    bytes_per_modality: &[u64],
) -> Result<FilterOutcome> {
    ensure!(
        decisions.len() == frames.len(),
        Data,
        "{} decisions for {} frames",
        decisions.len(),
        frames.len()
    );
    let eval = FilterEvaluator::new(Exec::default(), server, frames, bytes_per_modality)?;
    let sends: Vec<Vec<bool>> = decisions.iter().map(|d| d.send.clone()).collect();
    eval.evaluate(&sends)
}

pub fn build_tradeoff_curve(
    server: &FusionModel,
    filters: &[NearSensorModel],
    frames: &[Frame],
    grid: &[f64],
    bytes_per_modality: &[u64],
) -> Result<Vec<TradeoffRow>> {
    let eval = FilterEvaluator::new(Exec::default(), server, frames, bytes_per_modality)?;
    tradeoff_curve_with(Exec::default(), &eval, filters, frames, grid)
}

/// One row per τ, with τ applied to every modality's filter.
pub fn tradeoff_curve_with(
    exec: Exec,
    eval: &FilterEvaluator<'_>,
    filters: &[NearSensorModel],
    frames: &[Frame],
    grid: &[f64],
) -> Result<Vec<TradeoffRow>> {
    check_grid(grid)?;
    let scores = nearsensor::score_frames(exec, filters, frames)?;
    par::try_map(exec, grid, |&tau| {
        let sends: Vec<Vec<bool>> = scores.iter().map(|s| s.iter().map(|&x| x >= tau).collect()).collect();
        Ok(TradeoffRow {
            tau,
            outcome: eval.evaluate(&sends)?,
        })
    })
}

/// Quality loss at `efficiency`, linearly interpolated between the first
/// pair of rows (ordered by data efficiency) that brackets it. `None` when
/// the curve never reaches that efficiency.
pub fn interpolate_quality_loss(rows: &[TradeoffRow], efficiency: f64) -> Option<f64> {
    let mut pts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (r.outcome.data_efficiency, r.outcome.quality_loss))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    pts.windows(2).find_map(|w| {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if efficiency < x0 || efficiency > x1 {
            return None;
        }
        if x1 == x0 {
            return Some(y0);
        }
        Some(y0 + (y1 - y0) * (efficiency - x0) / (x1 - x0))
    })
}

/// Mean of several curves evaluated on the same grid, row by row.
pub fn mean_curve(curves: &[Vec<TradeoffRow>]) -> Result<Vec<TradeoffRow>> {
    ensure!(!curves.is_empty(), Usage, "no curves to average");
    let len = curves[0].len();
    ensure!(
        curves.iter().all(|c| c.len() == len),
        Data,
        "curves have different grid lengths"
    );
    let k = curves.len() as f64;
    (0..len)
        .map(|i| {
            let rows: Vec<&TradeoffRow> = curves.iter().map(|c| &c[i]).collect();
            let tau = rows[0].tau;
            if rows.iter().any(|r| r.tau != tau) {
                return Err(Error::Data("curves use different grids".into()));
            }
            let mean = |f: &dyn Fn(&TradeoffRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / k;
            let n_mod = rows[0].outcome.sent_fraction.len();
            Ok(TradeoffRow {
                tau,
                outcome: FilterOutcome {
                    data_efficiency: mean(&|r| r.outcome.data_efficiency),
                    quality_loss: mean(&|r| r.outcome.quality_loss),
                    sent_fraction: (0..n_mod).map(|m| mean(&|r| r.outcome.sent_fraction[m])).collect(),
                    f1_full: mean(&|r| r.outcome.f1_full),
                    f1_filtered: mean(&|r| r.outcome.f1_filtered),
                },
            })
        })
        .collect()
}
