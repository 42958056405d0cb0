mod common;

use nearsense::fusionmodel::{FusionModel, FusionSample, FusionSpec};
use nearsense::nncore::{self, Example, MlpModel, MlpSpec, TrainConfig, Trainable};
use nearsense::seed::rng_for;
use proptest::prelude::*;
use rand::Rng;

use common::{gradient_agreement, randomize};

fn random_example(rng: &mut impl Rng, in_w: usize, out_w: usize) -> Example {
    Example {
        input: (0..in_w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        target: (0..out_w).map(|_| f64::from(u8::from(rng.gen_bool(0.5)))).collect(),
    }
}

#[test]
fn mlp_gradients_match_central_differences() {
    let mut rng = rng_for(11, "gradcheck");
    for trial in 0..20 {
        let depth = rng.gen_range(1..=3);
        let widths: Vec<usize> = (0..=depth).map(|_| rng.gen_range(1..=8)).collect();
        let mut model = MlpModel::init(MlpSpec::new(widths.clone()), trial).unwrap();
        randomize(&mut model, trial);
        let ex = random_example(&mut rng, widths[0], *widths.last().unwrap());
        let (frac, worst) = gradient_agreement(&model, &ex, 1e-4);
        assert!(frac >= 0.99, "{widths:?}: {frac} agree, worst {worst}");
    }
}

#[test]
fn fusion_gradients_match_central_differences_with_scores_and_masks() {
    let mut rng = rng_for(12, "fusion-gradcheck");
    for trial in 0..8 {
        let spec = FusionSpec::from_widths(2, 3, 2, &[4], 3, &[4], 2);
        let mut model = FusionModel::init(spec, trial).unwrap();
        randomize(&mut model, trial);
        let zero_one = trial % 2 == 1;
        let sample = FusionSample {
            features: (0..2)
                .map(|m| {
                    if zero_one && m == 1 {
                        vec![0.0; 3]
                    } else {
                        (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()
                    }
                })
                .collect(),
            scores: vec![rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)],
            target: vec![1.0, 0.0],
        };
        let (frac, worst) = gradient_agreement(&model, &sample, 1e-4);
        assert!(frac >= 0.99, "trial {trial}: {frac} agree, worst {worst}");
    }
}

/// Points in the unit square labelled by a fixed line, with a margin band
/// removed so the line itself is a perfect classifier.
fn separable(n: usize, seed: u64) -> Vec<Example> {
    let (w, b): ([f64; 2], f64) = ([1.5, -1.0], 0.2);
    let mut rng = rng_for(seed, "toy");
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let x: [f64; 2] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let z = w[0] * x[0] + w[1] * x[1] + b;
        if z.abs() < 0.1 {
            continue;
        }
        out.push(Example {
            input: x.to_vec(),
            target: vec![f64::from(u8::from(z > 0.0))],
        });
    }
    out
}

fn accuracy(model: &MlpModel, data: &[Example]) -> f64 {
    let hits = data
        .iter()
        .filter(|e| (model.forward(&e.input).unwrap()[0] >= 0.5) == (e.target[0] == 1.0))
        .count();
    hits as f64 / data.len() as f64
}

#[test]
fn separable_toy_set_is_learned() {
    let train = separable(200, 1);
    let held_out = separable(200, 2);
    let oracle = |e: &Example| (1.5 * e.input[0] - e.input[1] + 0.2 > 0.0) == (e.target[0] == 1.0);
    assert!(train.iter().chain(&held_out).all(oracle));

    // near-sensor width at the smallest batch in the supported grid; at
    // batch 32 the decayed schedule leaves too few steps for 180 examples
    for seed in 0..4 {
        let model = MlpModel::init(MlpSpec::new(vec![2, 16, 1]), seed).unwrap();
        let tc = TrainConfig {
            batch_size: 8,
            seed,
            ..Default::default()
        };
        let (model, _) = nncore::train(model, &train, &tc).unwrap();
        let acc = accuracy(&model, &held_out);
        assert!(acc >= 0.95, "seed {seed}: held-out accuracy {acc}");
    }
}

#[test]
fn training_is_deterministic() {
    let data = separable(120, 5);
    let tc = TrainConfig {
        epochs: 5,
        seed: 9,
        ..Default::default()
    };
    let run = || nncore::train(MlpModel::init(MlpSpec::new(vec![2, 4, 1]), 9).unwrap(), &data, &tc).unwrap();
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a, b);
    assert_eq!(la, lb);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn returned_model_has_the_lowest_logged_validation_loss(seed in 0u64..1000, epochs in 1usize..6) {
        let data = separable(60, seed);
        let tc = TrainConfig { epochs, seed, learning_rate: 1e-2, ..Default::default() };
        let (_, log) = nncore::train(MlpModel::init(MlpSpec::new(vec![2, 3, 1]), seed).unwrap(), &data, &tc).unwrap();
        prop_assert_eq!(log.epochs.len(), epochs);
        for r in &log.epochs {
            prop_assert!(log.best_val_loss <= r.val_loss);
        }
    }

    #[test]
    fn lr_schedule_is_exact(lr in 1e-5f64..1.0, gamma in 0.01f64..=1.0, k in 0usize..100) {
        let tc = TrainConfig { learning_rate: lr, lr_decay_gamma: gamma, ..Default::default() };
        prop_assert_eq!(tc.learning_rate_at(k), lr * gamma.powi(k as i32));
    }

    #[test]
    fn logged_learning_rates_follow_the_schedule(seed in 0u64..100) {
        let data = separable(40, seed);
        let tc = TrainConfig { epochs: 4, seed, ..Default::default() };
        let (_, log) = nncore::train(MlpModel::init(MlpSpec::new(vec![2, 1]), seed).unwrap(), &data, &tc).unwrap();
        for r in &log.epochs {
            prop_assert_eq!(r.learning_rate, tc.learning_rate_at(r.epoch));
        }
    }

    #[test]
    fn forward_scores_are_in_open_unit_interval(
        seed in 0u64..1000,
        widths in prop::collection::vec(1usize..8, 2..5),
        scale in 0.0f64..100.0,
    ) {
        let model = MlpModel::init(MlpSpec::new(widths.clone()), seed).unwrap();
        let mut rng = rng_for(seed, "input");
        let x: Vec<f64> = (0..widths[0]).map(|_| rng.gen_range(-scale..=scale)).collect();
        let y = model.forward(&x).unwrap();
        prop_assert_eq!(y.len(), *widths.last().unwrap());
        prop_assert!(y.iter().all(|&s| s > 0.0 && s < 1.0));
    }

    #[test]
    fn param_count_is_the_layer_sum(widths in prop::collection::vec(1usize..64, 2..6)) {
        let expected: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        prop_assert_eq!(nncore::param_count(&widths), expected);
        prop_assert_eq!(MlpModel::zeros(MlpSpec::new(widths)).unwrap().params().len(), expected);
    }
}

#[test]
fn trainable_parameter_buffer_round_trips() {
    let model = MlpModel::init(MlpSpec::new(vec![3, 4, 2]), 1).unwrap();
    let mut buf = vec![0.0; model.param_count()];
    model.copy_params_to(&mut buf);
    let mut other = MlpModel::zeros(MlpSpec::new(vec![3, 4, 2])).unwrap();
    other.copy_params_from(&buf);
    assert_eq!(other.params(), model.params());
}
