//! Report commands. Each computes its result from the trained replicates,
//! writes CSV (and JSONL where noted) under `<output_dir>/reports/`, and
//! records the files in the run manifest. Every row starts with the config
//! hash.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::datagen::modality_name;
use crate::edgecompact::{self, CompactRow, EdgePair, EnergyPerParamMap, PairEvaluation};
use crate::energymodel::{self, Components, FilterSystem, Pipeline, ScenarioRecord};
use crate::error::{Error, Result};
use crate::metrics::{self, FilterEvaluator, TradeoffRow};
use crate::par::{self, Exec};

use super::config::{ExperimentConfig, Tier};
use super::manifest::ReportRecord;
use super::pipeline::{load_trained, trained_manifest, TrainedSeed};

pub const REPORTS_DIR: &str = "reports";

fn fmt(x: f64) -> String {
    format!("{x}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt).unwrap_or_default()
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e))?;
    w.write_record(header).map_err(|e| Error::parse(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| Error::parse(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn reports_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.output_dir.join(REPORTS_DIR);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn record_report(cfg: &ExperimentConfig, command: &str, files: &[PathBuf], started: Instant) -> Result<()> {
    let root = cfg.output_dir.as_path();
    let mut manifest = trained_manifest(cfg)?;
    manifest.upsert_report(ReportRecord {
        command: command.to_string(),
        files: files
            .iter()
            .map(|f| f.strip_prefix(root).map(Path::to_path_buf).unwrap_or_else(|_| f.clone()))
            .collect(),
        wall_clock_s: started.elapsed().as_secs_f64(),
    });
    manifest.save(root)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TradeoffSummaryRow {
    pub data_efficiency: f64,
    /// Mean over seeds of the interpolated quality loss; `None` when some
    /// seed's curve never reaches this efficiency.
    pub quality_loss_fusion_aware: Option<f64>,
    pub quality_loss_unimodal: Option<f64>,
    /// Fusion-aware over uni-modal quality loss.
    pub ratio: Option<f64>,
    pub seeds: usize,
}

#[derive(Debug, Clone)]
pub struct TradeoffReport {
    pub fusion_aware: Vec<(u64, Vec<TradeoffRow>)>,
    pub unimodal: Vec<(u64, Vec<TradeoffRow>)>,
    pub summary: Vec<TradeoffSummaryRow>,
}

fn mean_interpolated(curves: &[Vec<TradeoffRow>], efficiency: f64) -> Option<f64> {
    let vals: Option<Vec<f64>> = curves
        .iter()
        .map(|c| metrics::interpolate_quality_loss(c, efficiency))
        .collect();
    vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

/// Per-level comparison of two curve families on matched data efficiency.
pub fn summarize_tradeoff(
    fusion_aware: &[Vec<TradeoffRow>],
    unimodal: &[Vec<TradeoffRow>],
    levels: &[f64],
) -> Vec<TradeoffSummaryRow> {
    levels
        .iter()
        .map(|&eff| {
            let f = mean_interpolated(fusion_aware, eff);
            let u = mean_interpolated(unimodal, eff);
            let ratio = match (f, u) {
                (Some(f), Some(u)) if u != 0.0 => Some(f / u),
                _ => None,
            };
            TradeoffSummaryRow {
                data_efficiency: eff,
                quality_loss_fusion_aware: f,
                quality_loss_unimodal: u,
                ratio,
                seeds: fusion_aware.len(),
            }
        })
        .collect()
}

/// Both filter families swept over the configured τ grid on each seed's
/// test split.
pub fn tradeoff_report(cfg: &ExperimentConfig, trained: &[TrainedSeed], exec: Exec) -> Result<TradeoffReport> {
    let bytes = &cfg.energy.config.bytes_per_frame;
    let grid = &cfg.tradeoff.grid;
    let per_seed = par::try_map(exec, trained, |t| {
        let eval = FilterEvaluator::new(exec, &t.server, &t.dataset.test, bytes)?;
        let fa = metrics::tradeoff_curve_with(exec, &eval, &t.near, &t.dataset.test, grid)?;
        let uni = metrics::tradeoff_curve_with(exec, &eval, &t.unimodal, &t.dataset.test, grid)?;
        Ok((t.seed, fa, uni))
    })?;
    let fa: Vec<Vec<TradeoffRow>> = per_seed.iter().map(|(_, f, _)| f.clone()).collect();
    let uni: Vec<Vec<TradeoffRow>> = per_seed.iter().map(|(_, _, u)| u.clone()).collect();
    let summary = summarize_tradeoff(&fa, &uni, &cfg.tradeoff.efficiency_levels);
    Ok(TradeoffReport {
        fusion_aware: per_seed.iter().map(|(s, f, _)| (*s, f.clone())).collect(),
        unimodal: per_seed.into_iter().map(|(s, _, u)| (s, u)).collect(),
        summary,
    })
}

fn curve_rows(hash: &str, curves: &[(u64, Vec<TradeoffRow>)]) -> Vec<Vec<String>> {
    curves
        .iter()
        .flat_map(|(seed, rows)| {
            rows.iter().map(move |r| {
                let o = &r.outcome;
                let mut row = vec![
                    hash.to_string(),
                    seed.to_string(),
                    fmt(r.tau),
                    fmt(o.data_efficiency),
                    fmt(o.quality_loss),
                ];
                row.extend(o.sent_fraction.iter().map(|&x| fmt(x)));
                row.push(fmt(o.f1_full));
                row.push(fmt(o.f1_filtered));
                row
            })
        })
        .collect()
}

pub fn cmd_tradeoff(cfg: &ExperimentConfig, exec: Exec) -> Result<TradeoffReport> {
    let started = Instant::now();
    let trained = load_trained(cfg, exec)?;
    let report = tradeoff_report(cfg, &trained, exec)?;
    let hash = cfg.hash();
    let dir = reports_dir(cfg)?;

    let mut header: Vec<String> = ["config_hash", "seed", "tau", "data_efficiency", "quality_loss"]
        .map(String::from)
        .to_vec();
    header.extend((0..cfg.n_modalities()).map(|m| format!("sent_{}", modality_name(m))));
    header.extend(["f1_full", "f1_filtered"].map(String::from));
    let fa_path = dir.join("tradeoff_fusion_aware.csv");
    let uni_path = dir.join("tradeoff_unimodal.csv");
    write_csv(&fa_path, &header, &curve_rows(&hash, &report.fusion_aware))?;
    write_csv(&uni_path, &header, &curve_rows(&hash, &report.unimodal))?;

    let summary_path = dir.join("tradeoff_summary.csv");
    let header: Vec<String> = [
        "config_hash",
        "data_efficiency",
        "quality_loss_fusion_aware",
        "quality_loss_unimodal",
        "ratio",
        "seeds",
    ]
    .map(String::from)
    .to_vec();
    let rows: Vec<Vec<String>> = report
        .summary
        .iter()
        .map(|r| {
            vec![
                hash.clone(),
                fmt(r.data_efficiency),
                fmt_opt(r.quality_loss_fusion_aware),
                fmt_opt(r.quality_loss_unimodal),
                fmt_opt(r.ratio),
                r.seeds.to_string(),
            ]
        })
        .collect();
    write_csv(&summary_path, &header, &rows)?;
    record_report(cfg, "tradeoff", &[fa_path, uni_path, summary_path], started)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergySummaryRow {
    pub foi_prevalence: f64,
    pub pipeline: Pipeline,
    pub components: Components,
    pub total: f64,
    pub savings_ratio: f64,
}

impl EnergySummaryRow {
    /// Component shares of the total, for pie charts.
    pub fn fractions(&self) -> Vec<(&'static str, f64)> {
        self.components
            .named()
            .iter()
            .map(|&(name, v)| (name, if self.total > 0.0 { v / self.total } else { 0.0 }))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct EnergyReport {
    pub records: Vec<(u64, ScenarioRecord)>,
    /// Seed means per (prevalence, pipeline), in sweep order.
    pub summary: Vec<EnergySummaryRow>,
}

pub fn energy_report(cfg: &ExperimentConfig, trained: &[TrainedSeed], exec: Exec) -> Result<EnergyReport> {
    let per_seed = par::try_map(exec, trained, |t| {
        let generator = cfg.generator_for(t.seed);
        let system = FilterSystem {
            generator: &generator,
            fusion_aware: &t.near,
            unimodal: &t.unimodal,
        };
        let recs = energymodel::scenario_sweep_with(
            exec,
            &cfg.energy.config,
            &cfg.energy.prevalences,
            &system,
            cfg.energy.n_frames,
        )?;
        Ok(recs.into_iter().map(|r| (t.seed, r)).collect::<Vec<_>>())
    })?;
    let records: Vec<(u64, ScenarioRecord)> = per_seed.into_iter().flatten().collect();
    let k = trained.len() as f64;
    let mut summary = Vec::new();
    for &p in &cfg.energy.prevalences {
        for pipeline in Pipeline::ALL {
            let group: Vec<&ScenarioRecord> = records
                .iter()
                .map(|(_, r)| r)
                .filter(|r| r.foi_prevalence == p && r.breakdown.pipeline == pipeline)
                .collect();
            let mean = |f: &dyn Fn(&ScenarioRecord) -> f64| group.iter().map(|r| f(r)).sum::<f64>() / k;
            let components = Components {
                sensing: mean(&|r| r.breakdown.components.sensing),
                near_compute: mean(&|r| r.breakdown.components.near_compute),
                compression: mean(&|r| r.breakdown.components.compression),
                communication: mean(&|r| r.breakdown.components.communication),
                server_compute: mean(&|r| r.breakdown.components.server_compute),
            };
            summary.push(EnergySummaryRow {
                foi_prevalence: p,
                pipeline,
                components,
                total: mean(&|r| r.breakdown.total),
                savings_ratio: mean(&|r| r.savings_ratio),
            });
        }
    }
    Ok(EnergyReport { records, summary })
}

pub fn cmd_energy(cfg: &ExperimentConfig, exec: Exec) -> Result<EnergyReport> {
    let started = Instant::now();
    let trained = load_trained(cfg, exec)?;
    let report = energy_report(cfg, &trained, exec)?;
    let hash = cfg.hash();
    let dir = reports_dir(cfg)?;
    let component_names = Components::default().named().map(|(n, _)| n.to_string());

    let mut header: Vec<String> = ["config_hash", "seed", "foi_prevalence", "pipeline", "n_frames"]
        .map(String::from)
        .to_vec();
    header.extend(component_names.iter().cloned());
    header.extend(["total", "normalized_total", "savings_ratio"].map(String::from));
    let rows: Vec<Vec<String>> = report
        .records
        .iter()
        .map(|(seed, r)| {
            let b = &r.breakdown;
            let mut row = vec![
                hash.clone(),
                seed.to_string(),
                fmt(r.foi_prevalence),
                b.pipeline.name().to_string(),
                r.n_frames.to_string(),
            ];
            row.extend(b.components.named().iter().map(|&(_, v)| fmt(v)));
            row.extend([fmt(b.total), fmt(b.normalized_total), fmt(r.savings_ratio)]);
            row
        })
        .collect();
    let energy_path = dir.join("energy.csv");
    write_csv(&energy_path, &header, &rows)?;

    let mut header: Vec<String> = ["config_hash", "foi_prevalence", "pipeline"].map(String::from).to_vec();
    header.extend(component_names.iter().cloned());
    header.extend(["total", "savings_ratio"].map(String::from));
    let rows: Vec<Vec<String>> = report
        .summary
        .iter()
        .map(|s| {
            let mut row = vec![hash.clone(), fmt(s.foi_prevalence), s.pipeline.name().to_string()];
            row.extend(s.components.named().iter().map(|&(_, v)| fmt(v)));
            row.extend([fmt(s.total), fmt(s.savings_ratio)]);
            row
        })
        .collect();
    let summary_path = dir.join("energy_summary.csv");
    write_csv(&summary_path, &header, &rows)?;

    let fractions_path = dir.join("energy_fractions.jsonl");
    let file = std::fs::File::create(&fractions_path).map_err(|e| Error::io(&fractions_path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for s in &report.summary {
        let fractions: serde_json::Map<String, serde_json::Value> = s
            .fractions()
            .into_iter()
            .map(|(n, v)| (n.to_string(), serde_json::json!(v)))
            .collect();
        let line = serde_json::json!({
            "config_hash": hash,
            "foi_prevalence": s.foi_prevalence,
            "pipeline": s.pipeline.name(),
            "fractions": fractions,
        });
        writeln!(w, "{line}").map_err(|e| Error::io(&fractions_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&fractions_path, e))?;

    record_report(cfg, "energy", &[energy_path, summary_path, fractions_path], started)?;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct CompactReport {
    pub pairs: Vec<PairEvaluation>,
    pub rows: Vec<CompactRow>,
}

/// Trains (or reuses) a score-injected/baseline pair per seed and ratio and
/// evaluates both on the test split.
pub fn compact_report(
    cfg: &ExperimentConfig,
    trained: &[TrainedSeed],
    ratios: &[f64],
    exec: Exec,
) -> Result<CompactReport> {
    let jobs: Vec<(f64, &TrainedSeed)> = ratios
        .iter()
        .flat_map(|&r| trained.iter().map(move |t| (r, t)))
        .collect();
    let server_spec = cfg.server_spec();
    let opts = &cfg.edge.options;
    let pairs = par::try_map(exec, &jobs, |&(ratio, t)| {
        let trained_pair;
        let pair: &EdgePair = if ratio == cfg.edge.size_ratio {
            &t.edge
        } else {
            let tc = cfg.train_config(Tier::Edge, t.seed);
            trained_pair = edgecompact::train_edge_pair(&t.dataset, &t.near, &server_spec, ratio, &tc, opts)?;
            &trained_pair
        };
        edgecompact::evaluate_pair(pair, &t.near, &t.server, &t.dataset.test, t.seed, opts).map(|mut e| {
            e.target_ratio = ratio;
            e
        })
    })?;
    let map = EnergyPerParamMap::calibrated(server_spec.param_count(), cfg.edge.reference_server_energy)?;
    let rows = edgecompact::quality_loss_curve(&pairs, &map)?;
    Ok(CompactReport { pairs, rows })
}

pub fn cmd_compact(cfg: &ExperimentConfig, exec: Exec) -> Result<CompactReport> {
    let started = Instant::now();
    let trained = load_trained(cfg, exec)?;
    let report = compact_report(cfg, &trained, &cfg.edge.compact_ratios, exec)?;
    let hash = cfg.hash();
    let dir = reports_dir(cfg)?;

    let header: Vec<String> = [
        "config_hash",
        "size_ratio",
        "params",
        "energy_joules",
        "f1_with_scores",
        "f1_baseline",
        "quality_loss_with",
        "quality_loss_baseline",
        "quality_loss_with_std",
        "quality_loss_baseline_std",
        "seed_count",
    ]
    .map(String::from)
    .to_vec();
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                hash.clone(),
                fmt(r.size_ratio),
                r.params.to_string(),
                fmt(r.energy_joules),
                fmt(r.f1_with_scores),
                fmt(r.f1_baseline),
                fmt(r.quality_loss_with),
                fmt(r.quality_loss_baseline),
                fmt(r.quality_loss_with_std),
                fmt(r.quality_loss_baseline_std),
                r.seed_count.to_string(),
            ]
        })
        .collect();
    let curve_path = dir.join("compact.csv");
    write_csv(&curve_path, &header, &rows)?;

    let header: Vec<String> = [
        "config_hash",
        "size_ratio",
        "seed",
        "params_with_scores",
        "params_baseline",
        "f1_server",
        "f1_with_scores",
        "f1_baseline",
    ]
    .map(String::from)
    .to_vec();
    let rows: Vec<Vec<String>> = report
        .pairs
        .iter()
        .map(|p| {
            vec![
                hash.clone(),
                fmt(p.target_ratio),
                p.seed.to_string(),
                p.params_with_scores.to_string(),
                p.params_baseline.to_string(),
                fmt(p.f1_server),
                fmt(p.f1_with_scores),
                fmt(p.f1_baseline),
            ]
        })
        .collect();
    let pairs_path = dir.join("compact_pairs.csv");
    write_csv(&pairs_path, &header, &rows)?;
    record_report(cfg, "compact", &[curve_path, pairs_path], started)?;
    Ok(report)
}
