//! Late-fusion multi-label classifier: one extractor MLP per modality, the
//! embeddings concatenated (plus optional auxiliary score slots) into a
//! sigmoid fusion head. Absent modalities are zero-filled before their
//! extractor.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, Frame};
use crate::error::{ensure, Error, Result};
use crate::nncore::{
    self, bce_sigmoid_preact_grad, bce_unchecked, MlpModel, MlpSpec, OutputActivation, TrainConfig, TrainLog,
    Trainable,
};
use crate::seed::{self, sub_seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionSpec {
    pub extractors: Vec<MlpSpec>,
    pub head: MlpSpec,
    /// Extra head inputs after the embeddings (near-sensor scores for the
    /// edge model; zero for the server model).
    #[serde(default)]
    pub score_slots: usize,
    pub decision_threshold: f64,
}

impl FusionSpec {
    /// Server defaults: extractors `[F, 64, 32]`, head `[32·N, 32, L]`.
    pub fn server_default(n_modalities: usize, feature_width: usize, n_labels: usize) -> Self {
        Self::from_widths(n_modalities, feature_width, n_labels, &[64], 32, &[32], 0)
    }

    /// Builds a spec with identical extractor shapes for every modality.
    pub fn from_widths(
        n_modalities: usize,
        feature_width: usize,
        n_labels: usize,
        extractor_hidden: &[usize],
        embedding_width: usize,
        head_hidden: &[usize],
        score_slots: usize,
    ) -> Self {
        let mut ext = vec![feature_width];
        ext.extend_from_slice(extractor_hidden);
        ext.push(embedding_width);
        let mut head = vec![embedding_width * n_modalities + score_slots];
        head.extend_from_slice(head_hidden);
        head.push(n_labels);
        Self {
            extractors: vec![MlpSpec::new(ext).with_output(OutputActivation::Relu); n_modalities],
            head: MlpSpec::new(head),
            score_slots,
            decision_threshold: 0.5,
        }
    }

    pub fn n_modalities(&self) -> usize {
        self.extractors.len()
    }

    pub fn n_labels(&self) -> usize {
        self.head.output_width()
    }

    pub fn embedding_width(&self) -> usize {
        self.extractors.iter().map(MlpSpec::output_width).sum()
    }

    pub fn param_count(&self) -> usize {
        self.extractors.iter().map(MlpSpec::param_count).sum::<usize>() + self.head.param_count()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.extractors.is_empty(), Config, "fusion spec needs at least one extractor");
        for e in &self.extractors {
            e.validate()?;
        }
        self.head.validate()?;
        ensure!(
            self.head.input_width() == self.embedding_width() + self.score_slots,
            Config,
            "fusion head input width {} != embeddings {} + score slots {}",
            self.head.input_width(),
            self.embedding_width(),
            self.score_slots
        );
        ensure!(
            self.head.output_activation == OutputActivation::Sigmoid,
            Config,
            "fusion head must end in a sigmoid"
        );
        ensure!(
            self.decision_threshold > 0.0 && self.decision_threshold < 1.0,
            Config,
            "decision_threshold must be in (0, 1)"
        );
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    pub spec: FusionSpec,
    pub extractors: Vec<MlpModel>,
    pub head: MlpModel,
}

/// One fusion training example. `scores` has `score_slots` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionSample {
    pub features: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
    pub target: Vec<f64>,
}

impl FusionModel {
    /// Extractor `m` is seeded from `(seed, "extractor/m")` and the head from
    /// `(seed, "head")`, so two specs sharing extractor shapes share their
    /// initial extractors.
    pub fn init(spec: FusionSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let extractors = spec
            .extractors
            .iter()
            .enumerate()
            .map(|(m, s)| MlpModel::init(s.clone(), sub_seed(seed, &format!("extractor/{m}"))))
            .collect::<Result<Vec<_>>>()?;
        let head = MlpModel::init(spec.head.clone(), sub_seed(seed, "head"))?;
        Ok(Self { spec, extractors, head })
    }

    pub fn zeros(spec: FusionSpec) -> Result<Self> {
        spec.validate()?;
        let extractors = spec
            .extractors
            .iter()
            .map(|s| MlpModel::zeros(s.clone()))
            .collect::<Result<Vec<_>>>()?;
        let head = MlpModel::zeros(spec.head.clone())?;
        Ok(Self { spec, extractors, head })
    }

    pub fn param_count(&self) -> usize {
        self.extractors.iter().map(MlpModel::param_count).sum::<usize>() + self.head.param_count()
    }

    pub fn n_modalities(&self) -> usize {
        self.extractors.len()
    }

    fn check_features(&self, features: &[Vec<f64>], mask: &[bool], scores: &[f64]) -> Result<()> {
        ensure!(
            features.len() == self.n_modalities() && mask.len() == self.n_modalities(),
            Shape,
            "expected {} modalities, got {} feature vectors and {} mask bits",
            self.n_modalities(),
            features.len(),
            mask.len()
        );
        for (m, (f, e)) in features.iter().zip(&self.extractors).enumerate() {
            ensure!(
                f.len() == e.spec().input_width(),
                Shape,
                "modality {m}: expected width {}, got {}",
                e.spec().input_width(),
                f.len()
            );
        }
        ensure!(
            scores.len() == self.spec.score_slots,
            Shape,
            "expected {} score inputs, got {}",
            self.spec.score_slots,
            scores.len()
        );
        Ok(())
    }

    fn head_input(&self, features: &[Vec<f64>], mask: &[bool], scores: &[f64]) -> Vec<f64> {
        let mut input = Vec::with_capacity(self.spec.head.input_width());
        for ((f, e), &keep) in features.iter().zip(&self.extractors).zip(mask) {
            if keep {
                input.extend(e.forward_unchecked(f));
            } else {
                input.extend(e.forward_unchecked(&vec![0.0; f.len()]));
            }
        }
        input.extend_from_slice(scores);
        input
    }

    /// Label scores with masked modalities replaced by zero vectors.
    pub fn scores_with(&self, features: &[Vec<f64>], mask: &[bool], aux_scores: &[f64]) -> Result<Vec<f64>> {
        self.check_features(features, mask, aux_scores)?;
        Ok(self.head.forward_unchecked(&self.head_input(features, mask, aux_scores)))
    }

    pub fn decide(&self, scores: &[f64]) -> Vec<bool> {
        scores.iter().map(|&s| s >= self.spec.decision_threshold).collect()
    }

    /// `(scores, decision)` for a frame under a keep-mask. Only valid for
    /// models without score slots.
    pub fn predict(&self, features: &[Vec<f64>], mask: &[bool]) -> Result<(Vec<f64>, Vec<bool>)> {
        let scores = self.scores_with(features, mask, &[])?;
        let decision = self.decide(&scores);
        Ok((scores, decision))
    }

    pub fn predict_frame(&self, frame: &Frame, mask: &[bool]) -> Result<Vec<bool>> {
        Ok(self.predict(&frame.features, mask)?.1)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = Vec::new();
        for (m, e) in self.extractors.iter().enumerate() {
            let name = format!("extractor_{m}.mlp");
            e.save(&dir.join(&name))?;
            files.push(name);
        }
        self.head.save(&dir.join("head.mlp"))?;
        let manifest = FusionManifest {
            format: FUSION_FORMAT.to_string(),
            version: FUSION_VERSION,
            spec: self.spec.clone(),
            extractor_files: files,
            head_file: "head.mlp".to_string(),
        };
        let path = dir.join(FUSION_MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::parse(&path, e))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(FUSION_MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: FusionManifest = serde_json::from_str(&text).map_err(|e| Error::parse(&path, e))?;
        if manifest.format != FUSION_FORMAT || manifest.version != FUSION_VERSION {
            return Err(Error::parse(&path, "unsupported fusion manifest version"));
        }
        let extractors = manifest
            .extractor_files
            .iter()
            .map(|f| MlpModel::load(&dir.join(f)))
            .collect::<Result<Vec<_>>>()?;
        let head = MlpModel::load(&dir.join(&manifest.head_file))?;
        let model = Self {
            spec: manifest.spec,
            extractors,
            head,
        };
        model.spec.validate()?;
        let shapes_ok = model.extractors.iter().zip(&model.spec.extractors).all(|(m, s)| m.spec() == s)
            && model.head.spec() == &model.spec.head;
        if !shapes_ok {
            return Err(Error::parse(&path, "component models disagree with the manifest spec"));
        }
        Ok(model)
    }

    /// Paths written by [`FusionModel::save`] into `dir`.
    pub fn files(&self, dir: &Path) -> Vec<PathBuf> {
        let mut v = vec![dir.join(FUSION_MANIFEST)];
        v.extend((0..self.extractors.len()).map(|m| dir.join(format!("extractor_{m}.mlp"))));
        v.push(dir.join("head.mlp"));
        v
    }
}

pub const FUSION_MANIFEST: &str = "fusion.json";
const FUSION_FORMAT: &str = "nearsense-fusion";
const FUSION_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct FusionManifest {
    format: String,
    version: u32,
    spec: FusionSpec,
    extractor_files: Vec<String>,
    head_file: String,
}

impl Trainable for FusionModel {
    type Sample = FusionSample;

    fn param_count(&self) -> usize {
        FusionModel::param_count(self)
    }

    fn copy_params_to(&self, out: &mut [f64]) {
        let mut off = 0;
        for p in self.extractors.iter().map(MlpModel::params).chain([self.head.params()]) {
            out[off..off + p.len()].copy_from_slice(p);
            off += p.len();
        }
    }

    fn copy_params_from(&mut self, src: &[f64]) {
        let mut off = 0;
        for m in self.extractors.iter_mut().chain([&mut self.head]) {
            let n = m.param_count();
            m.params_mut().copy_from_slice(&src[off..off + n]);
            off += n;
        }
    }

    fn accumulate_gradient(&self, sample: &FusionSample, grad: &mut [f64]) -> f64 {
        let traces: Vec<_> = self
            .extractors
            .iter()
            .zip(&sample.features)
            .map(|(e, f)| e.forward_trace(f))
            .collect();
        let mut head_in = Vec::with_capacity(self.spec.head.input_width());
        for t in &traces {
            head_in.extend_from_slice(t.output());
        }
        head_in.extend_from_slice(&sample.scores);
        let head_trace = self.head.forward_trace(&head_in);
        let out = head_trace.output();
        let loss = bce_unchecked(out, &sample.target);

        let ext_total: usize = self.extractors.iter().map(MlpModel::param_count).sum();
        let d_head = bce_sigmoid_preact_grad(out, &sample.target);
        let d_in = self
            .head
            .backward(&head_trace, d_head, &mut grad[ext_total..], true)
            .expect("input gradient requested");
        // score slots are constants: their gradient stops here
        let mut grad_off = 0;
        let mut in_off = 0;
        for (e, t) in self.extractors.iter().zip(&traces) {
            let w = e.spec().output_width();
            let n = e.param_count();
            let d_pre = e.output_preact_grad(t.output(), &d_in[in_off..in_off + w]);
            e.backward(t, d_pre, &mut grad[grad_off..grad_off + n], false);
            grad_off += n;
            in_off += w;
        }
        loss
    }

    fn sample_loss(&self, sample: &FusionSample) -> f64 {
        let mask = vec![true; self.n_modalities()];
        let out = self
            .head
            .forward_unchecked(&self.head_input(&sample.features, &mask, &sample.scores));
        bce_unchecked(&out, &sample.target)
    }
}

/// Trains a fusion model on prepared samples after checking their shapes.
pub fn train_fusion(
    spec: FusionSpec,
    samples: &[FusionSample],
    tc: &TrainConfig,
    init_seed: u64,
) -> Result<(FusionModel, TrainLog)> {
    let model = FusionModel::init(spec, init_seed)?;
    ensure!(!samples.is_empty(), Config, "empty training set");
    for (i, s) in samples.iter().enumerate() {
        let no_mask = vec![true; model.n_modalities()];
        model
            .check_features(&s.features, &no_mask, &s.scores)
            .map_err(|e| Error::Config(format!("sample {i}: {e}")))?;
        ensure!(
            s.target.len() == model.spec.n_labels(),
            Config,
            "sample {i}: {} targets for {} outputs",
            s.target.len(),
            model.spec.n_labels()
        );
    }
    nncore::fit(model, samples, tc)
}

/// Training step 1: end-to-end BCE training of extractors and head on the
/// train split. Initialization is seeded from `(tc.seed, "server-init")`.
pub fn train_server_fusion(dataset: &Dataset, spec: &FusionSpec, tc: &TrainConfig) -> Result<(FusionModel, TrainLog)> {
    spec.validate()?;
    ensure!(
        spec.score_slots == 0,
        Config,
        "the server fusion model takes no score inputs"
    );
    ensure!(
        dataset.config.n_labels == spec.n_labels(),
        Config,
        "dataset has {} labels but the fusion head outputs {}",
        dataset.config.n_labels,
        spec.n_labels()
    );
    ensure!(
        dataset.config.n_modalities == spec.n_modalities(),
        Config,
        "dataset has {} modalities but the spec has {} extractors",
        dataset.config.n_modalities,
        spec.n_modalities()
    );
    tc.validate()?;
    let mut rng = seed::rng_for(tc.seed, "modality-dropout");
    let n = spec.n_modalities();
    let samples: Vec<FusionSample> = dataset
        .train
        .iter()
        .map(|f| {
            let mut features = f.features.clone();
            if tc.modality_dropout > 0.0 && rng.gen::<f64>() < tc.modality_dropout {
                let m = rng.gen_range(0..n);
                features[m].iter_mut().for_each(|x| *x = 0.0);
            }
            FusionSample {
                features,
                scores: Vec::new(),
                target: f.label_targets(),
            }
        })
        .collect();
    train_fusion(spec.clone(), &samples, tc, sub_seed(tc.seed, "server-init"))
}

pub fn decision_equal(a: &[bool], b: &[bool]) -> Result<bool> {
    ensure!(
        a.len() == b.len(),
        Shape,
        "decision widths differ: {} vs {}",
        a.len(),
        b.len()
    );
    Ok(a == b)
}
