//! Per-replicate training stages and the on-disk layout they write:
//!
//! ```text
//! <output_dir>/seed-<s>/dataset.jsonl
//!                       server/{fusion.json, extractor_<m>.mlp, head.mlp}
//!                       fos.jsonl
//!                       near/<modality>.mlp
//!                       unimodal/<modality>.mlp
//!                       edge/{with_scores,baseline}/...
//! ```

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::datagen::{self, modality_name, Dataset};
use crate::edgecompact::{self, EdgeFusionModel, EdgePair};
use crate::error::{Error, Result};
use crate::foslabeler::{self, FosRecord};
use crate::fusionmodel::{self, FusionModel};
use crate::nearsensor::{self, NearSensorModel};
use crate::par::{self, Exec};

use super::config::{ExperimentConfig, Tier};
use super::manifest::{RunManifest, StageRecord};

pub const STAGES: [&str; 6] = ["dataset", "server", "fos", "near_sensor", "unimodal", "edge"];

const TRAIN_HINT: &str = "run `nearsense train-all` with the same config first";

/// Relative paths of one replicate's artifacts.
#[derive(Debug, Clone)]
pub struct SeedLayout {
    dir: PathBuf,
}

impl SeedLayout {
    pub fn new(seed: u64) -> Self {
        Self {
            dir: PathBuf::from(format!("seed-{seed}")),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn dataset(&self) -> PathBuf {
        self.dir.join("dataset.jsonl")
    }

    pub fn server(&self) -> PathBuf {
        self.dir.join("server")
    }

    pub fn fos(&self) -> PathBuf {
        self.dir.join("fos.jsonl")
    }

    pub fn near(&self, m: usize) -> PathBuf {
        self.dir.join("near").join(format!("{}.mlp", modality_name(m)))
    }

    pub fn unimodal(&self, m: usize) -> PathBuf {
        self.dir.join("unimodal").join(format!("{}.mlp", modality_name(m)))
    }

    pub fn edge(&self, with_scores: bool) -> PathBuf {
        self.dir.join("edge").join(if with_scores { "with_scores" } else { "baseline" })
    }
}

/// Everything `train-all` produces for one seed, loaded back into memory.
#[derive(Debug, Clone)]
pub struct TrainedSeed {
    pub seed: u64,
    pub dataset: Dataset,
    pub server: FusionModel,
    pub fos: Vec<FosRecord>,
    pub near: Vec<NearSensorModel>,
    pub unimodal: Vec<NearSensorModel>,
    pub edge: EdgePair,
}

fn mkdir_for(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

fn relative(root: &Path, files: Vec<PathBuf>) -> Vec<PathBuf> {
    files
        .into_iter()
        .map(|f| f.strip_prefix(root).map(Path::to_path_buf).unwrap_or(f))
        .collect()
}

fn load_filters(
    cfg: &ExperimentConfig,
    root: &Path,
    path_of: impl Fn(usize) -> PathBuf,
) -> Result<Vec<NearSensorModel>> {
    cfg.send_thresholds()
        .into_iter()
        .enumerate()
        .map(|(m, tau)| NearSensorModel::load(&root.join(path_of(m)), m, tau))
        .collect()
}

fn load_edge(cfg: &ExperimentConfig, root: &Path, layout: &SeedLayout, with_scores: bool) -> Result<EdgeFusionModel> {
    let model = FusionModel::load(&root.join(layout.edge(with_scores)))?;
    let size_ratio = model.param_count() as f64 / cfg.server_spec().param_count() as f64;
    Ok(EdgeFusionModel {
        model,
        uses_scores: with_scores,
        size_ratio,
        target_ratio: cfg.edge.size_ratio,
    })
}

/// Artifacts of one replicate, loaded on first use.
struct SeedState<'a> {
    cfg: &'a ExperimentConfig,
    root: &'a Path,
    seed: u64,
    layout: SeedLayout,
    exec: Exec,
    dataset: Option<Dataset>,
    server: Option<FusionModel>,
    fos: Option<Vec<FosRecord>>,
    near: Option<Vec<NearSensorModel>>,
}

impl<'a> SeedState<'a> {
    fn new(cfg: &'a ExperimentConfig, root: &'a Path, seed: u64, exec: Exec) -> Self {
        Self {
            cfg,
            root,
            seed,
            layout: SeedLayout::new(seed),
            exec,
            dataset: None,
            server: None,
            fos: None,
            near: None,
        }
    }

    fn abs(&self, rel: PathBuf) -> PathBuf {
        self.root.join(rel)
    }

    fn dataset(&mut self) -> Result<&Dataset> {
        if self.dataset.is_none() {
            self.dataset = Some(datagen::read_dataset(&self.abs(self.layout.dataset()))?);
        }
        Ok(self.dataset.as_ref().expect("just loaded"))
    }

    fn ensure_server(&mut self) -> Result<()> {
        if self.server.is_none() {
            self.server = Some(FusionModel::load(&self.abs(self.layout.server()))?);
        }
        Ok(())
    }

    fn ensure_fos(&mut self) -> Result<()> {
        if self.fos.is_none() {
            self.fos = Some(foslabeler::read_fos_records(&self.abs(self.layout.fos()))?);
        }
        Ok(())
    }

    fn ensure_near(&mut self) -> Result<()> {
        if self.near.is_none() {
            let layout = self.layout.clone();
            self.near = Some(load_filters(self.cfg, self.root, |m| layout.near(m))?);
        }
        Ok(())
    }

    /// Runs one stage and returns the files it wrote, relative to the root.
    fn run(&mut self, stage: &str) -> Result<Vec<PathBuf>> {
        let cfg = self.cfg;
        let n = cfg.n_modalities();
        match stage {
            "dataset" => {
                let ds = datagen::generate(&cfg.generator_for(self.seed))?;
                let path = self.abs(self.layout.dataset());
                mkdir_for(&path)?;
                datagen::write_dataset(&ds, &path)?;
                self.dataset = Some(ds);
                Ok(vec![self.layout.dataset()])
            }
            "server" => {
                let tc = cfg.train_config(Tier::Server, self.seed);
                let (server, _) = fusionmodel::train_server_fusion(self.dataset()?, &cfg.server_spec(), &tc)?;
                let dir = self.abs(self.layout.server());
                server.save(&dir)?;
                let files = relative(self.root, server.files(&dir));
                self.server = Some(server);
                Ok(files)
            }
            "fos" => {
                self.dataset()?;
                self.ensure_server()?;
                let ds = self.dataset.as_ref().expect("loaded");
                let server = self.server.as_ref().expect("loaded");
                let records = foslabeler::build_fos_dataset_with(self.exec, server, ds, &cfg.fos_policy())?;
                let path = self.abs(self.layout.fos());
                foslabeler::write_fos_records(&records, &path)?;
                self.fos = Some(records);
                Ok(vec![self.layout.fos()])
            }
            "near_sensor" => {
                self.dataset()?;
                self.ensure_fos()?;
                let ds = self.dataset.as_ref().expect("loaded");
                let fos = self.fos.as_ref().expect("loaded");
                let tc = cfg.train_config(Tier::NearSensor, self.seed);
                let taus = cfg.send_thresholds();
                let mut models = Vec::with_capacity(n);
                let mut files = Vec::with_capacity(n);
                for (m, &tau) in taus.iter().enumerate() {
                    let (mut model, _) =
                        nearsensor::train_near_sensor_with(fos, ds, m, &cfg.near_spec(), &tc, cfg.hyper_grid())?;
                    model.send_threshold = tau;
                    let rel = self.layout.near(m);
                    let path = self.abs(rel.clone());
                    mkdir_for(&path)?;
                    model.save(&path)?;
                    models.push(model);
                    files.push(rel);
                }
                self.near = Some(models);
                Ok(files)
            }
            "unimodal" => {
                let tc = cfg.train_config(Tier::NearSensor, self.seed);
                self.dataset()?;
                let ds = self.dataset.as_ref().expect("loaded");
                (0..n)
                    .map(|m| {
                        let (model, _) =
                            nearsensor::train_unimodal_filter_with(ds, m, &cfg.near_spec(), &tc, cfg.hyper_grid())?;
                        let rel = self.layout.unimodal(m);
                        let path = self.root.join(&rel);
                        mkdir_for(&path)?;
                        model.save(&path)?;
                        Ok(rel)
                    })
                    .collect()
            }
            "edge" => {
                self.dataset()?;
                self.ensure_near()?;
                let ds = self.dataset.as_ref().expect("loaded");
                let near = self.near.as_ref().expect("loaded");
                let tc = cfg.train_config(Tier::Edge, self.seed);
                let pair = edgecompact::train_edge_pair(
                    ds,
                    near,
                    &cfg.server_spec(),
                    cfg.edge.size_ratio,
                    &tc,
                    &cfg.edge.options,
                )?;
                let mut files = Vec::new();
                for (model, with) in [(&pair.with_scores, true), (&pair.baseline, false)] {
                    let dir = self.abs(self.layout.edge(with));
                    model.model.save(&dir)?;
                    files.extend(relative(self.root, model.model.files(&dir)));
                }
                Ok(files)
            }
            other => Err(Error::Usage(format!("unknown stage `{other}`"))),
        }
    }
}

/// Runs the stages `prior` does not already record as complete. Once a
/// stage reruns, every later stage reruns too.
fn train_seed(
    cfg: &ExperimentConfig,
    prior: &RunManifest,
    seed: u64,
    exec: Exec,
    done: &mut Vec<StageRecord>,
) -> Result<()> {
    let root = cfg.output_dir.as_path();
    let mut state = SeedState::new(cfg, root, seed, exec);
    let mut dirty = false;
    for stage in STAGES {
        if !dirty && prior.is_complete(root, seed, stage) {
            continue;
        }
        dirty = true;
        let start = Instant::now();
        let files = state
            .run(stage)
            .map_err(|e| e.in_stage(format!("{stage} (seed {seed})")))?;
        done.push(StageRecord {
            seed,
            stage: stage.to_string(),
            files,
            wall_clock_s: start.elapsed().as_secs_f64(),
        });
    }
    Ok(())
}

/// Trains every replicate through all three steps. Stages already recorded
/// under the same config hash are skipped; stages that finished before a
/// failure are kept in the manifest.
pub fn cmd_train_all(cfg: &ExperimentConfig, exec: Exec) -> Result<RunManifest> {
    cfg.validate()?;
    let root = cfg.output_dir.as_path();
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let hash = cfg.hash();
    let prior = match RunManifest::load(root)? {
        Some(m) if m.config_hash == hash => m,
        _ => RunManifest::new(hash),
    };
    let results = par::map(exec, &cfg.seeds, |&seed| {
        let mut done = Vec::new();
        let r = train_seed(cfg, &prior, seed, exec, &mut done);
        (done, r)
    });
    let mut manifest = prior.clone();
    let mut first_err = None;
    for (done, r) in results {
        for rec in done {
            manifest.upsert_stage(rec);
        }
        if let Err(e) = r {
            first_err.get_or_insert(e);
        }
    }
    manifest.sort_stages(&STAGES);
    if manifest != prior || !RunManifest::path(root).exists() {
        let config_path = root.join("config.toml");
        std::fs::write(&config_path, cfg.to_toml()?).map_err(|e| Error::io(&config_path, e))?;
        manifest.save(root)?;
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(manifest),
    }
}

/// Manifest of a finished `train-all` run for exactly this config.
pub fn trained_manifest(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let root = cfg.output_dir.as_path();
    let manifest = RunManifest::load(root)?.ok_or_else(|| Error::MissingArtifact {
        path: RunManifest::path(root),
        hint: TRAIN_HINT.into(),
    })?;
    if manifest.config_hash != cfg.hash() {
        return Err(Error::MissingArtifact {
            path: RunManifest::path(root),
            hint: format!(
                "models were trained under config {}, not {}; {TRAIN_HINT}",
                manifest.config_hash,
                cfg.hash()
            ),
        });
    }
    for &seed in &cfg.seeds {
        for stage in STAGES {
            if !manifest.is_complete(root, seed, stage) {
                return Err(Error::MissingArtifact {
                    path: root.join(SeedLayout::new(seed).dir()),
                    hint: format!("stage `{stage}` has not completed; {TRAIN_HINT}"),
                });
            }
        }
    }
    Ok(manifest)
}

pub fn load_seed(cfg: &ExperimentConfig, seed: u64) -> Result<TrainedSeed> {
    let root = cfg.output_dir.as_path();
    let layout = SeedLayout::new(seed);
    Ok(TrainedSeed {
        seed,
        dataset: datagen::read_dataset(&root.join(layout.dataset()))?,
        server: FusionModel::load(&root.join(layout.server()))?,
        fos: foslabeler::read_fos_records(&root.join(layout.fos()))?,
        near: load_filters(cfg, root, |m| layout.near(m))?,
        unimodal: load_filters(cfg, root, |m| layout.unimodal(m))?,
        edge: EdgePair {
            with_scores: load_edge(cfg, root, &layout, true)?,
            baseline: load_edge(cfg, root, &layout, false)?,
        },
    })
}

/// Loads every replicate, failing with a pointer to `train-all` when any
/// artifact is missing.
pub fn load_trained(cfg: &ExperimentConfig, exec: Exec) -> Result<Vec<TrainedSeed>> {
    cfg.validate()?;
    trained_manifest(cfg)?;
    par::try_map(exec, &cfg.seeds, |&seed| load_seed(cfg, seed))
}
