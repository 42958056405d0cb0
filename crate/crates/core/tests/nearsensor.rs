mod common;

use nearsense::datagen::{generate, Dataset, GenConfig};
use nearsense::foslabeler::{build_fos_dataset, FosPolicy};
use nearsense::fusionmodel::{FusionModel, FusionSpec};
use nearsense::nearsensor::{decide, default_spec, sweep_thresholds, train_near_sensor, NearSensorModel};
use nearsense::nncore::{MlpModel, TrainConfig};
use nearsense::seed::rng_for;
use proptest::prelude::*;
use rand::Rng;

use common::harness_server;

#[test]
fn exclusive_signal_send_labels_are_learned() {
    let gen = GenConfig {
        redundancy: 0.0,
        noise_sigma: 0.3,
        seed: 41,
        ..Default::default()
    };
    let (ds, server) = harness_server(&gen, 41);
    let policy = FosPolicy::default_for(2);
    let train_records = build_fos_dataset(&server, &ds, &policy).unwrap();
    // held-out labels: the same labelling applied to the test split
    let held_out = Dataset {
        train: ds.test.clone(),
        test: Vec::new(),
        config: ds.config.clone(),
    };
    let test_records = build_fos_dataset(&server, &held_out, &policy).unwrap();
    let tc = TrainConfig {
        seed: 41,
        ..Default::default()
    };
    for m in 0..2 {
        let (model, _) = train_near_sensor(&train_records, &ds, m, &default_spec(16), &tc).unwrap();
        let truth: Vec<bool> = test_records.iter().map(|r| r.send_label[m]).collect();
        let hits = ds
            .test
            .iter()
            .zip(&truth)
            .filter(|(f, &t)| (model.score(&f.features[m]).unwrap() >= 0.5) == t)
            .count();
        let acc = hits as f64 / truth.len() as f64;
        let positives = truth.iter().filter(|&&t| t).count() as f64 / truth.len() as f64;
        let majority = positives.max(1.0 - positives);
        assert!(acc >= 0.85 && acc > majority, "modality {m}: acc {acc}, majority {majority}");
    }
}

#[test]
fn all_negative_labels_give_a_silent_filter() {
    let ds = generate(&GenConfig {
        n_frames: 600,
        foi_prevalence: 1e-4,
        seed: 42,
        ..Default::default()
    })
    .unwrap();
    assert!(ds.train.iter().all(|f| !f.foi));
    let server = FusionModel::zeros(FusionSpec::server_default(2, 16, 6)).unwrap();
    let records = build_fos_dataset(&server, &ds, &FosPolicy::default_for(2)).unwrap();
    let tc = TrainConfig {
        seed: 42,
        ..Default::default()
    };
    let models: Vec<NearSensorModel> = (0..2)
        .map(|m| train_near_sensor(&records, &ds, m, &default_spec(16), &tc).unwrap().0)
        .collect();
    for f in ds.train.iter().chain(&ds.test) {
        assert!(!decide(&models, &f.features).unwrap().any_sent());
    }
}

#[test]
fn same_seed_same_filter() {
    let ds = generate(&GenConfig {
        n_frames: 400,
        seed: 43,
        ..Default::default()
    })
    .unwrap();
    let server = FusionModel::zeros(FusionSpec::server_default(2, 16, 6)).unwrap();
    let records = build_fos_dataset(&server, &ds, &FosPolicy::default_for(2)).unwrap();
    let tc = TrainConfig {
        epochs: 4,
        seed: 43,
        ..Default::default()
    };
    let run = || train_near_sensor(&records, &ds, 1, &default_spec(16), &tc).unwrap();
    assert_eq!(run(), run());
}

fn random_filters(seed: u64) -> Vec<NearSensorModel> {
    (0..2)
        .map(|m| NearSensorModel {
            modality: m,
            model: MlpModel::init(default_spec(8), seed + m as u64).unwrap(),
            send_threshold: 0.5,
        })
        .collect()
}

#[test]
fn sweep_rows_match_a_direct_recount() {
    let ds = generate(&GenConfig {
        n_frames: 500,
        feature_width: 8,
        seed: 44,
        ..Default::default()
    })
    .unwrap();
    let filters = random_filters(44);
    let grid: Vec<f64> = (0..=20).map(|i| f64::from(i) / 20.0).collect();
    let rows = sweep_thresholds(&filters, &ds.test, &grid).unwrap();
    assert_eq!(rows.len(), 21);
    for r in &rows {
        for (m, &rate) in r.send_rate.iter().enumerate() {
            assert!((0.0..=1.0).contains(&rate));
            let mut f = filters.clone();
            f.iter_mut().for_each(|x| x.send_threshold = r.tau);
            let sent = ds.test.iter().filter(|fr| decide(&f, &fr.features).unwrap().send[m]).count();
            assert_eq!(rate, sent as f64 / ds.test.len() as f64);
        }
    }
    for w in rows.windows(2) {
        for m in 0..2 {
            assert!(w[1].send_rate[m] <= w[0].send_rate[m]);
        }
    }
    let ends = sweep_thresholds(&filters, &ds.test, &[0.0, 1.0]).unwrap();
    assert_eq!(ends[0].send_rate, vec![1.0, 1.0]);
    assert_eq!(ends[1].send_rate, vec![0.0, 0.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decisions_read_only_their_own_modality(seed in 0u64..10_000, tau in 0.0f64..1.0) {
        let mut filters = random_filters(seed);
        filters.iter_mut().for_each(|f| f.send_threshold = tau);
        let mut rng = rng_for(seed, "features");
        let mut draw = || -> Vec<f64> { (0..8).map(|_| rng.gen_range(-3.0..3.0)).collect() };
        let (a, b, c) = (draw(), draw(), draw());
        let first = decide(&filters, &[a.clone(), b.clone()]).unwrap();
        let other = decide(&filters, &[a, c.clone()]).unwrap();
        prop_assert_eq!(first.send[0], other.send[0]);
        prop_assert_eq!(first.scores[0], other.scores[0]);
        let swapped = decide(&filters, &[c, b]).unwrap();
        prop_assert_eq!(first.send[1], swapped.send[1]);
        prop_assert_eq!(first.scores[1], swapped.scores[1]);
    }
}
