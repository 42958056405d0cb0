mod common;

use nearsense::datagen::{generate, Frame, GenConfig};
use nearsense::foslabeler::{augment_labels, build_fos_dataset, derive_droppable, FosMode, FosPolicy};
use nearsense::fusionmodel::{FusionModel, FusionSpec};
use nearsense::par::{self, Exec};
use proptest::prelude::*;

use common::harness_server;

/// Droppability recomputed without masks: zero the feature vector itself,
/// run the scores and threshold at the spec's decision threshold.
fn brute_force_droppable(server: &FusionModel, frame: &Frame) -> Vec<bool> {
    let n = frame.features.len();
    let keep = vec![true; n];
    let decide = |features: &[Vec<f64>]| -> Vec<bool> {
        server
            .scores_with(features, &keep, &[])
            .unwrap()
            .iter()
            .map(|&s| s >= server.spec.decision_threshold)
            .collect()
    };
    let full = decide(&frame.features);
    (0..n)
        .map(|m| {
            let mut ablated = frame.features.clone();
            ablated[m] = vec![0.0; ablated[m].len()];
            decide(&ablated) == full
        })
        .collect()
}

#[test]
fn droppability_matches_brute_force_on_a_trained_server() {
    let (ds, server) = harness_server(
        &GenConfig {
            n_frames: 1500,
            seed: 31,
            ..Default::default()
        },
        31,
    );
    let mut checked = 0;
    let mut any_droppable = 0;
    for f in ds.train.iter().chain(&ds.test).take(500) {
        let d = derive_droppable(&server, f).unwrap();
        assert_eq!(d, brute_force_droppable(&server, f), "frame {}", f.frame_id);
        checked += 1;
        any_droppable += usize::from(d.iter().any(|&x| x));
    }
    assert_eq!(checked, 500);
    assert!(any_droppable > 0);
}

#[test]
fn redundant_frames_are_mostly_fully_droppable() {
    let gen = GenConfig {
        redundancy: 1.0,
        seed: 32,
        ..Default::default()
    };
    let (ds, server) = harness_server(&gen, 32);
    let both: Vec<&Frame> = ds
        .train
        .iter()
        .chain(&ds.test)
        .filter(|f| f.foi && f.signal.iter().all(|&s| s))
        .collect();
    let droppable = both
        .iter()
        .filter(|f| brute_force_droppable(&server, f) == [true, true])
        .count();
    let frac = droppable as f64 / both.len() as f64;
    assert!(frac >= 0.80, "{droppable} of {} fully droppable", both.len());
}

#[test]
fn confident_negative_model_finds_everything_droppable() {
    let spec = FusionSpec::server_default(2, 16, 6);
    let mut server = FusionModel::zeros(spec).unwrap();
    let n_out = server.spec.n_labels();
    let n = server.head.params().len();
    // output biases are the last parameters of the head
    server.head.params_mut()[n - n_out..].iter_mut().for_each(|b| *b = -10.0);
    let ds = generate(&GenConfig {
        n_frames: 200,
        seed: 33,
        ..Default::default()
    })
    .unwrap();
    for f in ds.train.iter().filter(|f| !f.foi) {
        assert_eq!(server.predict_frame(f, &[true, true]).unwrap(), vec![false; n_out]);
        assert_eq!(derive_droppable(&server, f).unwrap(), vec![true, true]);
    }
}

#[test]
fn zero_server_sends_only_the_priority_modality() {
    let server = FusionModel::zeros(FusionSpec::server_default(2, 16, 6)).unwrap();
    let ds = generate(&GenConfig {
        n_frames: 1000,
        seed: 34,
        ..Default::default()
    })
    .unwrap();
    let policy = FosPolicy::default_for(2);
    let records = build_fos_dataset(&server, &ds, &policy).unwrap();
    assert_eq!(records.len(), 800);
    let ids: Vec<u64> = records.iter().map(|r| r.frame_id).collect();
    assert_eq!(ids, ds.train.iter().map(|f| f.frame_id).collect::<Vec<_>>());
    for r in &records {
        assert_eq!(r.droppable, vec![true, true]);
        let want = if r.foi { vec![false, true] } else { vec![false, false] };
        assert_eq!(r.send_label, want);
    }
}

#[test]
fn exclusive_signal_modality_is_labelled_for_sending() {
    let gen = GenConfig {
        redundancy: 0.0,
        seed: 35,
        ..Default::default()
    };
    let (ds, server) = harness_server(&gen, 35);
    let records = build_fos_dataset(&server, &ds, &FosPolicy::default_for(2)).unwrap();
    let mut hit = 0;
    let mut total = 0;
    for (r, f) in records.iter().zip(&ds.train) {
        let Some(m) = f.signal.iter().position(|&s| s) else { continue };
        if !f.foi || server.predict_frame(f, &[true, true]).unwrap() != f.labels {
            continue;
        }
        total += 1;
        hit += usize::from(r.send_label[m]);
    }
    assert!(total > 0);
    assert!(hit as f64 >= 0.8 * total as f64, "{hit} of {total}");
}

/// Mean over seeds of the share of FoI training frames on which either
/// modality alone reproduces the server decision.
fn fully_droppable_share(rho: f64, seeds: &[u64]) -> f64 {
    let shares = par::map(Exec::Parallel, seeds, |&seed| {
        let gen = GenConfig {
            redundancy: rho,
            n_frames: 2500,
            seed,
            ..Default::default()
        };
        let (ds, server) = harness_server(&gen, seed);
        let foi: Vec<&Frame> = ds.train.iter().filter(|f| f.foi).collect();
        let all = foi
            .iter()
            .filter(|f| derive_droppable(&server, f).unwrap().iter().all(|&d| d))
            .count();
        all as f64 / foi.len() as f64
    });
    shares.iter().sum::<f64>() / shares.len() as f64
}

#[test]
fn droppability_grows_with_redundancy() {
    let seeds = [1, 2, 3, 4, 5];
    let shares: Vec<f64> = [0.0, 0.5, 1.0].iter().map(|&r| fully_droppable_share(r, &seeds)).collect();
    assert!(shares.windows(2).all(|w| w[0] <= w[1]), "{shares:?}");
}

fn policy_for(n: usize, mode: FosMode) -> FosPolicy {
    FosPolicy {
        mode,
        ..FosPolicy::default_for(n)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn send_labels_are_safe(foi: bool, n in 2usize..=4, bits in any::<u8>(), verbatim: bool) {
        let droppable: Vec<bool> = (0..n).map(|m| bits >> m & 1 == 1).collect();
        let mode = if verbatim && n == 2 { FosMode::TableVerbatim } else { FosMode::DroppabilityRule };
        let send = augment_labels(foi, &droppable, &policy_for(n, mode)).unwrap();
        if foi {
            prop_assert!(send.iter().any(|&s| s));
        } else {
            prop_assert!(send.iter().all(|&s| !s));
        }
    }
}

#[test]
fn rule_sends_exactly_the_needed_modalities() {
    for n in 2..=4usize {
        let policy = policy_for(n, FosMode::DroppabilityRule);
        for bits in 0..1u32 << n {
            let droppable: Vec<bool> = (0..n).map(|m| bits >> m & 1 == 1).collect();
            let send = augment_labels(true, &droppable, &policy).unwrap();
            if droppable.iter().all(|&d| d) {
                let mut want = vec![false; n];
                want[policy.keep_priority[0]] = true;
                assert_eq!(send, want);
            } else {
                assert_eq!(send, droppable.iter().map(|&d| !d).collect::<Vec<_>>());
            }
        }
    }
}

#[test]
fn custom_priority_with_three_modalities() {
    let policy = FosPolicy {
        mode: FosMode::DroppabilityRule,
        keep_priority: vec![2, 1, 0],
    };
    assert_eq!(augment_labels(true, &[true, true, true], &policy).unwrap(), vec![false, false, true]);
}
