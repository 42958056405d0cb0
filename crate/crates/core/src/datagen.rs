//! Seeded synthetic multimodal streams.
//!
//! Each label owns a fixed template vector per modality. A frame of interest
//! draws a nonempty label subset and embeds the sum of the active templates
//! into every modality (probability `redundancy`) or into exactly one,
//! uniformly chosen modality. A modality that carries the signal alone also
//! receives a fixed per-modality "exclusive" cue, standing in for the
//! sensor-local evidence (small or distant objects, occlusion in the other
//! sensor) that makes cross-modal redundancy predictable from one sensor's
//! view. Gaussian noise is added everywhere, and each modality may be
//! replaced wholesale by noise (`corruption_rate`).
//!
//! Templates depend only on `seed`; frame draws depend on `seed` and
//! `stream`, so a model trained on one stream applies to any other stream of
//! the same seed (e.g. a fresh evaluation stream at a different prevalence).

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::seed;

const DATASET_FORMAT: &str = "nearsense-dataset";
const DATASET_VERSION: u32 = 1;

/// Display name of modality `m`: m0 is "rgb", m1 is "depth", others "m<k>".
pub fn modality_name(m: usize) -> String {
    match m {
        0 => "rgb".to_string(),
        1 => "depth".to_string(),
        k => format!("m{k}"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_frames: usize,
    pub n_modalities: usize,
    pub feature_width: usize,
    pub n_labels: usize,
    pub foi_prevalence: f64,
    /// Probability that a frame of interest carries its signal in every
    /// modality rather than in exactly one.
    pub redundancy: f64,
    pub corruption_rate: f64,
    pub noise_sigma: f64,
    /// Scale of the per-entry label templates.
    pub signal_amplitude: f64,
    /// Scale of the cue added to a modality that carries the signal alone.
    pub exclusive_cue: f64,
    /// Per-label inclusion probability for a frame of interest, conditioned
    /// on the subset being nonempty.
    pub label_density: f64,
    pub train_fraction: f64,
    pub seed: u64,
    /// Selects an independent frame stream for the same templates.
    pub stream: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_frames: 5000,
            n_modalities: 2,
            feature_width: 16,
            n_labels: 6,
            foi_prevalence: 0.10,
            redundancy: 0.7,
            corruption_rate: 0.05,
            noise_sigma: 0.5,
            signal_amplitude: 2.0,
            exclusive_cue: 0.5,
            label_density: 0.3,
            train_fraction: 0.80,
            seed: 0,
            stream: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_frames >= 2, Config, "n_frames must be >= 2");
        ensure!(self.n_modalities >= 1, Config, "n_modalities must be >= 1");
        ensure!(self.feature_width >= 1, Config, "feature_width must be >= 1");
        ensure!(self.n_labels >= 1, Config, "n_labels must be >= 1");
        ensure!(
            self.foi_prevalence > 0.0 && self.foi_prevalence < 1.0,
            Config,
            "foi_prevalence must be in (0, 1), got {}",
            self.foi_prevalence
        );
        ensure!(
            (0.0..=1.0).contains(&self.redundancy),
            Config,
            "redundancy must be in [0, 1], got {}",
            self.redundancy
        );
        ensure!(
            (0.0..1.0).contains(&self.corruption_rate),
            Config,
            "corruption_rate must be in [0, 1), got {}",
            self.corruption_rate
        );
        ensure!(
            self.noise_sigma >= 0.0 && self.noise_sigma.is_finite(),
            Config,
            "noise_sigma must be finite and >= 0"
        );
        ensure!(
            self.signal_amplitude >= 0.0 && self.exclusive_cue >= 0.0,
            Config,
            "signal_amplitude and exclusive_cue must be >= 0"
        );
        ensure!(
            self.label_density > 0.0 && self.label_density <= 1.0,
            Config,
            "label_density must be in (0, 1]"
        );
        ensure!(
            self.train_fraction > 0.0 && self.train_fraction < 1.0,
            Config,
            "train_fraction must be in (0, 1), got {}",
            self.train_fraction
        );
        Ok(())
    }

    pub fn modality_names(&self) -> Vec<String> {
        (0..self.n_modalities).map(modality_name).collect()
    }

    pub fn n_train(&self) -> usize {
        ((self.n_frames as f64 * self.train_fraction).round() as usize).clamp(1, self.n_frames - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub frame_id: u64,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<bool>,
    pub foi: bool,
    pub corrupted: Vec<bool>,
    /// Generator metadata: which modalities carry the label signal after
    /// corruption was applied.
    pub signal: Vec<bool>,
}

impl Frame {
    pub fn label_targets(&self) -> Vec<f64> {
        self.labels.iter().map(|&b| f64::from(u8::from(b))).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Frame>,
    pub test: Vec<Frame>,
    pub config: GenConfig,
}

/// Fixed per-seed signal patterns.
struct SignalBank {
    /// `[label][modality][feature]`
    templates: Vec<Vec<Vec<f64>>>,
    /// `[modality][feature]`
    cues: Vec<Vec<f64>>,
}

impl SignalBank {
    fn new(cfg: &GenConfig) -> Self {
        let mut rng = seed::rng_for(cfg.seed, "templates");
        let mut draw = |scale: f64| -> Vec<f64> {
            (0..cfg.feature_width)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        let templates = (0..cfg.n_labels)
            .map(|_| (0..cfg.n_modalities).map(|_| draw(cfg.signal_amplitude)).collect())
            .collect();
        let cues = (0..cfg.n_modalities).map(|_| draw(cfg.exclusive_cue)).collect();
        Self { templates, cues }
    }
}

fn noise_vec<R: Rng>(rng: &mut R, width: usize, noise: &Normal<f64>) -> Vec<f64> {
    (0..width).map(|_| noise.sample(rng)).collect()
}

/// Generates the frame stream described by `config` and splits it into
/// train (first `n_train` frames) and test.
pub fn generate(config: &GenConfig) -> Result<Dataset> {
    config.validate()?;
    let mut frames = generate_frames(config)?;
    let test = frames.split_off(config.n_train());
    Ok(Dataset {
        train: frames,
        test,
        config: config.clone(),
    })
}

/// Generates `config.n_frames` frames without splitting.
pub fn generate_frames(config: &GenConfig) -> Result<Vec<Frame>> {
    config.validate()?;
    let bank = SignalBank::new(config);
    let noise = Normal::new(0.0, config.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = seed::rng_for(config.seed, &format!("frames/{}", config.stream));
    let (n_mod, width) = (config.n_modalities, config.feature_width);

    let frames = (0..config.n_frames as u64)
        .map(|frame_id| {
            let foi = rng.gen_bool(config.foi_prevalence);
            let mut labels = vec![false; config.n_labels];
            let mut signal = vec![false; n_mod];
            if foi {
                while !labels.iter().any(|&b| b) {
                    for l in labels.iter_mut() {
                        *l = rng.gen_bool(config.label_density);
                    }
                }
                if n_mod == 1 || rng.gen_bool(config.redundancy) {
                    signal.iter_mut().for_each(|s| *s = true);
                } else {
                    signal[rng.gen_range(0..n_mod)] = true;
                }
            }
            let exclusive = n_mod > 1 && signal.iter().filter(|&&s| s).count() == 1;

            let mut features: Vec<Vec<f64>> = (0..n_mod).map(|_| noise_vec(&mut rng, width, &noise)).collect();
            for m in 0..n_mod {
                if !signal[m] {
                    continue;
                }
                for (l, _) in labels.iter().enumerate().filter(|(_, &on)| on) {
                    for (x, t) in features[m].iter_mut().zip(&bank.templates[l][m]) {
                        *x += t;
                    }
                }
                if exclusive {
                    for (x, c) in features[m].iter_mut().zip(&bank.cues[m]) {
                        *x += c;
                    }
                }
            }

            let mut corrupted = vec![false; n_mod];
            for m in 0..n_mod {
                if rng.gen_bool(config.corruption_rate) {
                    corrupted[m] = true;
                    signal[m] = false;
                    features[m] = noise_vec(&mut rng, width, &noise);
                }
            }

            Frame {
                frame_id,
                features,
                labels,
                foi,
                corrupted,
                signal,
            }
        })
        .collect();
    Ok(frames)
}

pub fn empirical_foi_rate(frames: &[Frame]) -> Result<f64> {
    ensure!(!frames.is_empty(), Usage, "empirical_foi_rate of an empty frame sequence");
    Ok(frames.iter().filter(|f| f.foi).count() as f64 / frames.len() as f64)
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    version: u32,
    config: GenConfig,
}

#[derive(Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Split {
    Train,
    Test,
}

#[derive(Serialize, Deserialize)]
struct FrameLine {
    split: Split,
    #[serde(flatten)]
    frame: Frame,
}

/// Writes the dataset as line-delimited JSON: one header line
/// (`{"format", "version", "config"}`), then one line per frame with
/// `split`, `frame_id`, `features`, `labels`, `foi`, `corrupted`, `signal`.
pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = DatasetHeader {
        format: DATASET_FORMAT.to_string(),
        version: DATASET_VERSION,
        config: dataset.config.clone(),
    };
    let io = |e| Error::io(path, e);
    let json = |e: serde_json::Error| Error::parse(path, e);
    serde_json::to_writer(&mut w, &header).map_err(json)?;
    w.write_all(b"\n").map_err(io)?;
    let splits = [(Split::Train, &dataset.train), (Split::Test, &dataset.test)];
    for (split, frames) in splits {
        for frame in frames {
            let line = FrameLine {
                split,
                frame: frame.clone(),
            };
            serde_json::to_writer(&mut w, &line).map_err(json)?;
            w.write_all(b"\n").map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::parse(path, "empty dataset file"))?
        .map_err(|e| Error::io(path, e))?;
    let header: DatasetHeader = serde_json::from_str(&header_line).map_err(|e| Error::parse(path, e))?;
    if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
        return Err(Error::parse(
            path,
            format!("unsupported dataset format {} v{}", header.format, header.version),
        ));
    }
    let cfg = header.config;
    let mut dataset = Dataset {
        train: Vec::new(),
        test: Vec::new(),
        config: cfg.clone(),
    };
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: FrameLine =
            serde_json::from_str(&line).map_err(|e| Error::parse(path, format!("line {}: {e}", n + 2)))?;
        let f = parsed.frame;
        let widths_ok = f.features.len() == cfg.n_modalities
            && f.features.iter().all(|v| v.len() == cfg.feature_width)
            && f.labels.len() == cfg.n_labels
            && f.corrupted.len() == cfg.n_modalities
            && f.signal.len() == cfg.n_modalities;
        if !widths_ok {
            return Err(Error::Data(format!(
                "{}: frame {} does not match the header widths",
                path.display(),
                f.frame_id
            )));
        }
        match parsed.split {
            Split::Train => dataset.train.push(f),
            Split::Test => dataset.test.push(f),
        }
    }
    Ok(dataset)
}
