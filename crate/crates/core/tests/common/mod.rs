#![allow(dead_code)]

use nearsense::datagen::{generate, Dataset, GenConfig};
use nearsense::fusionmodel::{train_server_fusion, FusionModel, FusionSpec};
use nearsense::nncore::{Trainable, TrainConfig};
use rand::Rng;

/// Moves a model to a generic point: every parameter, biases included,
/// uniform in (-1, 1). Zero biases put ReLU pre-activations exactly on the
/// kink whenever an upstream layer is dead, where central differences are
/// meaningless.
pub fn randomize<M: Trainable>(model: &mut M, seed: u64) {
    let mut rng = nearsense::seed::rng_for(seed, "randomize");
    let params: Vec<f64> = (0..model.param_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    model.copy_params_from(&params);
}

/// Finite-difference step used by every gradient check.
pub const FD_STEP: f64 = 1e-5;

/// Relative error with a floor so that near-zero gradients compare on an
/// absolute scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Fraction of coordinates whose analytic gradient agrees with the central
/// difference of `sample_loss` within `tol`.
pub fn gradient_agreement<M: Trainable>(model: &M, sample: &M::Sample, tol: f64) -> (f64, f64) {
    let n = model.param_count();
    let mut analytic = vec![0.0; n];
    model.accumulate_gradient(sample, &mut analytic);
    let mut params = vec![0.0; n];
    model.copy_params_to(&mut params);
    let mut probe = model.clone();
    let mut ok = 0usize;
    let mut worst = 0.0f64;
    for i in 0..n {
        let orig = params[i];
        params[i] = orig + FD_STEP;
        probe.copy_params_from(&params);
        let up = probe.sample_loss(sample);
        params[i] = orig - FD_STEP;
        probe.copy_params_from(&params);
        let down = probe.sample_loss(sample);
        params[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let e = rel_err(analytic[i], numeric);
        worst = worst.max(e);
        if e <= tol {
            ok += 1;
        }
    }
    (ok as f64 / n as f64, worst)
}

/// Server trained the way the harness trains it by default.
pub fn harness_server(gen: &GenConfig, seed: u64) -> (Dataset, FusionModel) {
    let dataset = generate(gen).unwrap();
    let spec = FusionSpec::server_default(gen.n_modalities, gen.feature_width, gen.n_labels);
    let tc = TrainConfig {
        modality_dropout: 0.2,
        seed,
        ..Default::default()
    };
    let (server, _) = train_server_fusion(&dataset, &spec, &tc).unwrap();
    (dataset, server)
}
