//! Minimal feed-forward network kernel: dense layers, ReLU hidden units,
//! sigmoid (or ReLU) outputs, binary cross-entropy, Adam with per-epoch
//! exponential learning-rate decay and best-validation snapshotting.
//!
//! Parameters of an [`MlpModel`] live in one flat buffer. Layer `l` occupies
//! `out_l * in_l` weights (row-major, one row per output unit) followed by
//! `out_l` biases. The same layout is used by the text file format:
//!
//! ```text
//! nearsense-mlp 1
//! widths 4 8 1
//! activations relu sigmoid
//! seed 42
//! layer 0 8 4
//! w <4 values>        (one line per output row)
//! b <8 values>
//! layer 1 1 8
//! ...
//! ```
//!
//! Floats are written in shortest round-trip form, so load(save(m)) == m.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::seed;

const FORMAT_TAG: &str = "nearsense-mlp";
const FORMAT_VERSION: u32 = 1;

/// Sigmoid outputs are clamped this far away from 0 and 1 so that scores
/// stay strictly inside the open interval and the loss stays finite.
const SCORE_MARGIN: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HiddenActivation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    #[default]
    Sigmoid,
    /// Used by per-modality feature extractors whose output is an embedding.
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    #[serde(default)]
    pub hidden_activation: HiddenActivation,
    #[serde(default)]
    pub output_activation: OutputActivation,
}

/// `Σ (w_i · w_{i+1} + w_{i+1})` over consecutive widths.
pub fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>) -> Self {
        Self {
            layer_widths,
            hidden_activation: HiddenActivation::Relu,
            output_activation: OutputActivation::Sigmoid,
        }
    }

    pub fn with_output(mut self, output_activation: OutputActivation) -> Self {
        self.output_activation = output_activation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.layer_widths.len() >= 2,
            Config,
            "an MLP needs at least two layer widths, got {:?}",
            self.layer_widths
        );
        ensure!(
            self.layer_widths.iter().all(|&w| w > 0),
            Config,
            "layer widths must be positive, got {:?}",
            self.layer_widths
        );
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().expect("validated spec")
    }

    pub fn n_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        param_count(&self.layer_widths)
    }

    /// Offset of layer `l`'s weight block in the flat parameter buffer.
    fn layer_offset(&self, l: usize) -> usize {
        param_count(&self.layer_widths[..=l])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    spec: MlpSpec,
    params: Vec<f64>,
    seed: u64,
}

/// Activations of every layer from one forward pass, kept for backprop.
/// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`.
#[derive(Debug, Clone)]
pub struct Trace {
    pub acts: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace has at least the input")
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    let s = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    s.clamp(SCORE_MARGIN, 1.0 - SCORE_MARGIN)
}

impl MlpModel {
    /// Uniform init in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init(spec: MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seed::rng(seed);
        let mut params = vec![0.0; spec.param_count()];
        for l in 0..spec.n_layers() {
            let (fan_in, fan_out) = (spec.layer_widths[l], spec.layer_widths[l + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let off = spec.layer_offset(l);
            for w in &mut params[off..off + fan_in * fan_out] {
                *w = rng.gen_range(-bound..bound);
            }
        }
        Ok(Self { spec, params, seed })
    }

    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let params = vec![0.0; spec.param_count()];
        Ok(Self {
            spec,
            params,
            seed: 0,
        })
    }

    pub fn from_params(spec: MlpSpec, params: Vec<f64>, seed: u64) -> Result<Self> {
        spec.validate()?;
        ensure!(
            params.len() == spec.param_count(),
            Shape,
            "spec {:?} needs {} parameters, got {}",
            spec.layer_widths,
            spec.param_count(),
            params.len()
        );
        Ok(Self { spec, params, seed })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Weight block (row-major `out x in`) and bias vector of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (i, o) = (self.spec.layer_widths[l], self.spec.layer_widths[l + 1]);
        let off = self.spec.layer_offset(l);
        self.params[off..off + i * o + o].split_at(i * o)
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        Ok(self.forward_unchecked(input))
    }

    pub(crate) fn check_input(&self, input: &[f64]) -> Result<()> {
        ensure!(
            input.len() == self.spec.input_width(),
            Shape,
            "model expects input width {}, got {}",
            self.spec.input_width(),
            input.len()
        );
        Ok(())
    }

    pub(crate) fn forward_unchecked(&self, input: &[f64]) -> Vec<f64> {
        let mut a = input.to_vec();
        for l in 0..self.spec.n_layers() {
            a = self.layer_forward(l, &a);
        }
        a
    }

    pub(crate) fn forward_trace(&self, input: &[f64]) -> Trace {
        let mut acts = Vec::with_capacity(self.spec.layer_widths.len());
        acts.push(input.to_vec());
        for l in 0..self.spec.n_layers() {
            let next = self.layer_forward(l, acts.last().unwrap());
            acts.push(next);
        }
        Trace { acts }
    }

    fn layer_forward(&self, l: usize, input: &[f64]) -> Vec<f64> {
        let (w, b) = self.layer(l);
        let n_in = input.len();
        let last = l + 1 == self.spec.n_layers();
        w.chunks_exact(n_in)
            .zip(b)
            .map(|(row, &bias)| {
                let z = row.iter().zip(input).fold(bias, |acc, (wi, xi)| acc + wi * xi);
                match (last, self.spec.output_activation) {
                    (true, OutputActivation::Sigmoid) => sigmoid(z),
                    _ => z.max(0.0),
                }
            })
            .collect()
    }

    /// Converts a gradient w.r.t. the model output into one w.r.t. the last
    /// layer's pre-activation.
    pub(crate) fn output_preact_grad(&self, output: &[f64], d_output: &[f64]) -> Vec<f64> {
        output
            .iter()
            .zip(d_output)
            .map(|(&a, &d)| match self.spec.output_activation {
                OutputActivation::Sigmoid => d * a * (1.0 - a),
                OutputActivation::Relu => {
                    if a > 0.0 {
                        d
                    } else {
                        0.0
                    }
                }
            })
            .collect()
    }

    /// Backpropagates `d_preact` (gradient w.r.t. the last layer's
    /// pre-activation) through the trace, adding parameter gradients into
    /// `grad` (flat layout). Returns the input gradient when requested.
    pub(crate) fn backward(
        &self,
        trace: &Trace,
        d_preact: Vec<f64>,
        grad: &mut [f64],
        want_input_grad: bool,
    ) -> Option<Vec<f64>> {
        let mut delta = d_preact;
        for l in (0..self.spec.n_layers()).rev() {
            let a_in = &trace.acts[l];
            let n_in = a_in.len();
            let off = self.spec.layer_offset(l);
            let n_out = delta.len();
            let (gw, gb) = grad[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
            for ((grow, gbias), &d) in gw.chunks_exact_mut(n_in).zip(gb.iter_mut()).zip(&delta) {
                if d == 0.0 {
                    continue;
                }
                *gbias += d;
                for (g, &x) in grow.iter_mut().zip(a_in) {
                    *g += d * x;
                }
            }
            if l == 0 && !want_input_grad {
                return None;
            }
            let (w, _) = self.layer(l);
            let mut d_in = vec![0.0; n_in];
            for (row, &d) in w.chunks_exact(n_in).zip(&delta) {
                if d == 0.0 {
                    continue;
                }
                for (acc, &wi) in d_in.iter_mut().zip(row) {
                    *acc += wi * d;
                }
            }
            if l == 0 {
                return Some(d_in);
            }
            // hidden ReLU: a > 0 iff pre-activation > 0
            for (di, &a) in d_in.iter_mut().zip(a_in) {
                if a <= 0.0 {
                    *di = 0.0;
                }
            }
            delta = d_in;
        }
        unreachable!("loop returns at layer 0")
    }

    pub fn to_text(&self) -> String {
        let spec = &self.spec;
        let mut s = String::new();
        let _ = writeln!(s, "{FORMAT_TAG} {FORMAT_VERSION}");
        let widths: Vec<String> = spec.layer_widths.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "widths {}", widths.join(" "));
        let _ = writeln!(
            s,
            "activations relu {}",
            match spec.output_activation {
                OutputActivation::Sigmoid => "sigmoid",
                OutputActivation::Relu => "relu",
            }
        );
        let _ = writeln!(s, "seed {}", self.seed);
        for l in 0..spec.n_layers() {
            let (i, o) = (spec.layer_widths[l], spec.layer_widths[l + 1]);
            let _ = writeln!(s, "layer {l} {o} {i}");
            let (w, b) = self.layer(l);
            for row in w.chunks_exact(i) {
                s.push('w');
                push_floats(&mut s, row);
            }
            s.push('b');
            push_floats(&mut s, b);
        }
        s
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let bad = |msg: String| Error::parse(origin, msg);
        let mut lines = text.lines().enumerate();
        let mut next = |what: &str| {
            lines
                .next()
                .map(|(n, l)| (n + 1, l))
                .ok_or_else(|| bad(format!("unexpected end of file, expected {what}")))
        };

        let (n, header) = next("header")?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(FORMAT_TAG) {
            return Err(bad(format!("line {n}: not a {FORMAT_TAG} file")));
        }
        let version: u32 = parse_tok(parts.next(), n).map_err(bad)?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }

        let (n, line) = next("widths")?;
        let widths = keyed_values::<usize>(line, "widths", n).map_err(bad)?;
        let (n, line) = next("activations")?;
        let acts: Vec<&str> = line.split_whitespace().collect();
        let output_activation = match acts.as_slice() {
            ["activations", "relu", "sigmoid"] => OutputActivation::Sigmoid,
            ["activations", "relu", "relu"] => OutputActivation::Relu,
            _ => return Err(bad(format!("line {n}: bad activations line"))),
        };
        let (n, line) = next("seed")?;
        let seed = keyed_values::<u64>(line, "seed", n).map_err(bad)?;
        let seed = *seed.first().ok_or_else(|| bad(format!("line {n}: missing seed")))?;

        let spec = MlpSpec::new(widths).with_output(output_activation);
        spec.validate().map_err(|e| bad(e.to_string()))?;
        let mut params = Vec::with_capacity(spec.param_count());
        for l in 0..spec.n_layers() {
            let (i, o) = (spec.layer_widths[l], spec.layer_widths[l + 1]);
            let (n, line) = next("layer header")?;
            let dims = keyed_values::<usize>(line, "layer", n).map_err(bad)?;
            if dims != [l, o, i] {
                return Err(bad(format!("line {n}: expected layer {l} {o} {i}, got {dims:?}")));
            }
            for _ in 0..o {
                let (n, line) = next("weight row")?;
                let row = keyed_values::<f64>(line, "w", n).map_err(bad)?;
                if row.len() != i {
                    return Err(bad(format!("line {n}: expected {i} weights, got {}", row.len())));
                }
                params.extend(row);
            }
            let (n, line) = next("bias row")?;
            let b = keyed_values::<f64>(line, "b", n).map_err(bad)?;
            if b.len() != o {
                return Err(bad(format!("line {n}: expected {o} biases, got {}", b.len())));
            }
            params.extend(b);
        }
        Self::from_params(spec, params, seed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }
}

fn push_floats(s: &mut String, xs: &[f64]) {
    for x in xs {
        let _ = write!(s, " {x:e}");
    }
    s.push('\n');
}

fn parse_tok<T: std::str::FromStr>(tok: Option<&str>, line: usize) -> std::result::Result<T, String> {
    let tok = tok.ok_or_else(|| format!("line {line}: missing value"))?;
    tok.parse()
        .map_err(|_| format!("line {line}: cannot parse `{tok}`"))
}

fn keyed_values<T: std::str::FromStr>(line: &str, key: &str, n: usize) -> std::result::Result<Vec<T>, String> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some(key) {
        return Err(format!("line {n}: expected `{key}`"));
    }
    parts.map(|t| parse_tok(Some(t), n)).collect()
}

/// Mean over labels of `-[y ln s + (1 - y) ln(1 - s)]`.
pub fn bce_loss(scores: &[f64], labels: &[f64]) -> Result<f64> {
    ensure!(
        scores.len() == labels.len(),
        Shape,
        "bce_loss: {} scores vs {} labels",
        scores.len(),
        labels.len()
    );
    ensure!(!scores.is_empty(), Shape, "bce_loss: empty input");
    ensure!(
        scores.iter().all(|&s| s > 0.0 && s < 1.0),
        Usage,
        "bce_loss: scores must lie strictly inside (0, 1)"
    );
    Ok(bce_unchecked(scores, labels))
}

pub(crate) fn bce_unchecked(scores: &[f64], labels: &[f64]) -> f64 {
    let sum: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| -(y * s.ln() + (1.0 - y) * (1.0 - s).ln()))
        .sum();
    sum / scores.len() as f64
}

/// Gradient of the mean BCE w.r.t. sigmoid pre-activations.
pub(crate) fn bce_sigmoid_preact_grad(scores: &[f64], labels: &[f64]) -> Vec<f64> {
    let n = scores.len() as f64;
    scores.iter().zip(labels).map(|(&s, &y)| (s - y) / n).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay_gamma: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub validation_fraction: f64,
    /// Fraction of server training frames that get one uniformly chosen
    /// modality zero-filled. Read only by the server fusion trainer.
    pub modality_dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 32,
            learning_rate: 1e-3,
            lr_decay_gamma: 0.95,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            validation_fraction: 0.10,
            modality_dropout: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.epochs >= 1, Config, "epochs must be >= 1");
        ensure!(self.batch_size >= 1, Config, "batch_size must be >= 1");
        // lr = 0 is accepted as a frozen run
        ensure!(
            self.learning_rate >= 0.0 && self.learning_rate.is_finite(),
            Config,
            "learning_rate must be finite and non-negative, got {}",
            self.learning_rate
        );
        ensure!(
            self.lr_decay_gamma > 0.0 && self.lr_decay_gamma <= 1.0,
            Config,
            "lr_decay_gamma must be in (0, 1], got {}",
            self.lr_decay_gamma
        );
        ensure!(
            self.validation_fraction > 0.0 && self.validation_fraction < 1.0,
            Config,
            "validation_fraction must be in (0, 1), got {}",
            self.validation_fraction
        );
        ensure!(
            (0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2),
            Config,
            "adam betas must be in [0, 1)"
        );
        ensure!(self.adam_epsilon > 0.0, Config, "adam_epsilon must be > 0");
        ensure!(
            (0.0..1.0).contains(&self.modality_dropout),
            Config,
            "modality_dropout must be in [0, 1), got {}",
            self.modality_dropout
        );
        Ok(())
    }

    /// Learning rate used throughout epoch `epoch` (0-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay_gamma.powi(epoch as i32)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// A model trainable by [`fit`]: parameters are exchanged through a flat
/// buffer and the loss is the per-sample mean BCE.
pub trait Trainable: Clone {
    type Sample;

    fn param_count(&self) -> usize;
    fn copy_params_to(&self, out: &mut [f64]);
    fn copy_params_from(&mut self, src: &[f64]);
    /// Adds d(loss)/d(params) for one sample into `grad`; returns the loss.
    fn accumulate_gradient(&self, sample: &Self::Sample, grad: &mut [f64]) -> f64;
    fn sample_loss(&self, sample: &Self::Sample) -> f64;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
}

impl Trainable for MlpModel {
    type Sample = Example;

    fn param_count(&self) -> usize {
        self.params.len()
    }

    fn copy_params_to(&self, out: &mut [f64]) {
        out.copy_from_slice(&self.params);
    }

    fn copy_params_from(&mut self, src: &[f64]) {
        self.params.copy_from_slice(src);
    }

    fn accumulate_gradient(&self, sample: &Example, grad: &mut [f64]) -> f64 {
        let trace = self.forward_trace(&sample.input);
        let out = trace.output();
        let loss = bce_unchecked(out, &sample.target);
        let d = bce_sigmoid_preact_grad(out, &sample.target);
        self.backward(&trace, d, grad, false);
        loss
    }

    fn sample_loss(&self, sample: &Example) -> f64 {
        bce_unchecked(&self.forward_unchecked(&sample.input), &sample.target)
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(n: usize, tc: &TrainConfig) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            beta1: tc.adam_beta1,
            beta2: tc.adam_beta2,
            eps: tc.adam_epsilon,
        }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Splits `n` sample indices into (train, validation) with a seeded shuffle.
pub(crate) fn split_indices(n: usize, validation_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng_for(seed, "validation-split"));
    let n_val = ((n as f64 * validation_fraction).round() as usize).clamp(1, n - 1);
    let train = idx.split_off(n_val);
    (train, idx)
}

/// Trains with Adam and returns the snapshot with the lowest validation loss.
pub fn fit<M: Trainable>(model: M, samples: &[M::Sample], config: &TrainConfig) -> Result<(M, TrainLog)> {
    config.validate()?;
    ensure!(
        samples.len() >= 2,
        Config,
        "training needs at least 2 examples (one for validation), got {}",
        samples.len()
    );
    let (mut train_idx, val_idx) = split_indices(samples.len(), config.validation_fraction, config.seed);
    let mut shuffle_rng = seed::rng_for(config.seed, "shuffle");

    let n_params = model.param_count();
    let mut model = model;
    let mut flat = vec![0.0; n_params];
    model.copy_params_to(&mut flat);
    let mut grad = vec![0.0; n_params];
    let mut adam = Adam::new(n_params, config);

    let mut log = TrainLog {
        epochs: Vec::with_capacity(config.epochs),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
    };
    let mut best = model.clone();

    for epoch in 0..config.epochs {
        let lr = config.learning_rate_at(epoch);
        train_idx.shuffle(&mut shuffle_rng);
        let mut train_loss = 0.0;
        for batch in train_idx.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                train_loss += model.accumulate_gradient(&samples[i], &mut grad);
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            adam.update(&mut flat, &grad, lr);
            model.copy_params_from(&flat);
        }
        train_loss /= train_idx.len() as f64;
        let val_loss = val_idx.iter().map(|&i| model.sample_loss(&samples[i])).sum::<f64>() / val_idx.len() as f64;
        log.epochs.push(EpochRecord {
            epoch,
            learning_rate: lr,
            train_loss,
            val_loss,
        });
        if val_loss < log.best_val_loss || epoch == 0 {
            log.best_val_loss = val_loss;
            log.best_epoch = epoch;
            best = model.clone();
        }
    }
    Ok((best, log))
}

/// Trains a standalone sigmoid-output MLP on `(input, target)` examples.
pub fn train(model: MlpModel, dataset: &[Example], config: &TrainConfig) -> Result<(MlpModel, TrainLog)> {
    ensure!(
        model.spec.output_activation == OutputActivation::Sigmoid,
        Config,
        "BCE training requires a sigmoid output layer"
    );
    ensure!(!dataset.is_empty(), Config, "empty training set");
    for (i, ex) in dataset.iter().enumerate() {
        ensure!(
            ex.input.len() == model.spec.input_width() && ex.target.len() == model.spec.output_width(),
            Config,
            "example {i}: widths ({}, {}) do not match model ({}, {})",
            ex.input.len(),
            ex.target.len(),
            model.spec.input_width(),
            model.spec.output_width()
        );
    }
    fit(model, dataset, config)
}

/// Hyper-parameter grid for the optional harness-level search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperGrid {
    pub batch_sizes: Vec<usize>,
    pub learning_rates: Vec<f64>,
}

impl Default for HyperGrid {
    fn default() -> Self {
        Self {
            batch_sizes: vec![8, 16, 32],
            learning_rates: vec![1e-3, 1e-4],
        }
    }
}

/// Runs [`fit`] for every grid point and keeps the run with the lowest best
/// validation loss. Ties go to the earlier grid point.
pub fn grid_search<M: Trainable>(
    model: &M,
    samples: &[M::Sample],
    base: &TrainConfig,
    grid: &HyperGrid,
) -> Result<(M, TrainLog, TrainConfig)> {
    ensure!(
        !grid.batch_sizes.is_empty() && !grid.learning_rates.is_empty(),
        Config,
        "empty hyper-parameter grid"
    );
    let mut best: Option<(M, TrainLog, TrainConfig)> = None;
    for &batch_size in &grid.batch_sizes {
        for &learning_rate in &grid.learning_rates {
            let tc = TrainConfig {
                batch_size,
                learning_rate,
                ..base.clone()
            };
            let (m, log) = fit(model.clone(), samples, &tc)?;
            if best.as_ref().is_none_or(|(_, b, _)| log.best_val_loss < b.best_val_loss) {
                best = Some((m, log, tc));
            }
        }
    }
    Ok(best.expect("grid is nonempty"))
}
