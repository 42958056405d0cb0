mod common;

use nearsense::datagen::{Dataset, GenConfig};
use nearsense::edgecompact::{
    edge_pair_specs, evaluate_pair, params_to_energy, quality_loss_curve, train_edge_fusion, train_edge_pair,
    EdgeOptions, EnergyPerParamMap, PairEvaluation, ScoreSource,
};
use nearsense::foslabeler::{build_fos_dataset, FosPolicy};
use nearsense::fusionmodel::{FusionModel, FusionSpec};
use nearsense::nearsensor::{default_spec, train_near_sensor, NearSensorModel};
use nearsense::nncore::TrainConfig;
use nearsense::par::{self, Exec};
use proptest::prelude::*;

use common::harness_server;

struct System {
    seed: u64,
    dataset: Dataset,
    server: FusionModel,
    near: Vec<NearSensorModel>,
}

fn system(seed: u64) -> System {
    let gen = GenConfig {
        n_frames: 2500,
        seed,
        ..Default::default()
    };
    let (dataset, server) = harness_server(&gen, seed);
    let records = build_fos_dataset(&server, &dataset, &FosPolicy::default_for(2)).unwrap();
    let tc = TrainConfig {
        seed,
        ..Default::default()
    };
    let near = (0..2)
        .map(|m| train_near_sensor(&records, &dataset, m, &default_spec(16), &tc).unwrap().0)
        .collect();
    System {
        seed,
        dataset,
        server,
        near,
    }
}

fn edge_tc(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        seed,
        ..Default::default()
    }
}

fn spec() -> FusionSpec {
    FusionSpec::server_default(2, 16, 6)
}

fn evaluate(s: &System, ratio: f64, opts: &EdgeOptions) -> PairEvaluation {
    let pair = train_edge_pair(&s.dataset, &s.near, &spec(), ratio, &edge_tc(s.seed), opts).unwrap();
    evaluate_pair(&pair, &s.near, &s.server, &s.dataset.test, s.seed, opts).unwrap()
}

#[test]
fn edge_training_leaves_near_sensor_models_untouched() {
    let s = system(61);
    let before = s.near.clone();
    let bits = |m: &[NearSensorModel]| -> Vec<Vec<u64>> {
        m.iter().map(|x| x.model.params().iter().map(|p| p.to_bits()).collect()).collect()
    };
    let _ = train_edge_pair(&s.dataset, &s.near, &spec(), 0.25, &edge_tc(61), &EdgeOptions::default()).unwrap();
    assert_eq!(bits(&s.near), bits(&before));
}

#[test]
fn white_noise_scores_bring_no_advantage() {
    let seeds = [62, 63, 64];
    let systems = par::map(Exec::Parallel, &seeds, |&s| system(s));
    let noise = EdgeOptions {
        score_source: ScoreSource::WhiteNoise { seed: 7 },
        ..EdgeOptions::default()
    };
    let diffs: Vec<f64> = systems
        .iter()
        .map(|s| {
            let e = evaluate(s, 0.25, &noise);
            e.f1_with_scores - e.f1_baseline
        })
        .collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let band = (2.0 * sd / n.sqrt()).max(0.02);
    assert!(mean <= band, "noise advantage {mean} above band {band} ({diffs:?})");
}

#[test]
fn full_size_edge_model_stays_close_to_the_server() {
    let s = system(65);
    let e = evaluate(&s, 1.0, &EdgeOptions::default());
    assert!(e.quality_loss_with().abs() <= 0.1, "{e:?}");
}

#[test]
fn tiny_models_still_give_well_formed_rows() {
    let systems: Vec<System> = [66, 67].into_iter().map(system).collect();
    let evals: Vec<PairEvaluation> = systems
        .iter()
        .map(|s| evaluate(s, 0.02, &EdgeOptions::default()))
        .collect();
    let map = EnergyPerParamMap::calibrated(spec().param_count(), 1e-3).unwrap();
    let rows = quality_loss_curve(&evals, &map).unwrap();
    assert_eq!(rows.len(), 1);
    let r = &rows[0];
    assert!(r.params > 0 && r.seed_count == 2);
    for v in [r.f1_with_scores, r.f1_baseline] {
        assert!((0.0..=1.0).contains(&v));
    }
    for v in [r.quality_loss_with, r.quality_loss_baseline, r.quality_loss_with_std, r.energy_joules] {
        assert!(v.is_finite());
    }
}

#[test]
fn pair_members_share_extractor_initialization() {
    let s = system(68);
    let (with_spec, base_spec) = edge_pair_specs(&spec(), 0.25).unwrap();
    assert_eq!(with_spec.extractors, base_spec.extractors);
    let tc = TrainConfig {
        epochs: 1,
        learning_rate: 0.0,
        ..edge_tc(68)
    };
    let opts = EdgeOptions::default();
    let (a, _) = train_edge_fusion(&s.dataset, &s.near, &with_spec, &tc, true, &opts, 1, 0.25).unwrap();
    let (b, _) = train_edge_fusion(&s.dataset, &s.near, &base_spec, &tc, false, &opts, 1, 0.25).unwrap();
    assert_eq!(a.model.extractors, b.model.extractors);
}

#[test]
fn calibrated_map_sends_the_server_to_the_reference_energy() {
    let server_params = spec().param_count();
    let map = EnergyPerParamMap::calibrated(server_params, 2.5e-3).unwrap();
    assert!((params_to_energy(server_params, &map) - 2.5e-3).abs() <= 1e-15);
}

proptest! {
    #[test]
    fn energy_map_is_additive(a in 0usize..1_000_000, b in 0usize..1_000_000, j in 1e-9f64..1e-3) {
        let map = EnergyPerParamMap { joules_per_parameter: j, reference_server_energy: 1.0 };
        let sum = params_to_energy(a, &map) + params_to_energy(b, &map);
        prop_assert!((params_to_energy(a + b, &map) - sum).abs() <= 1e-12 * sum.max(1e-300));
    }
}
