use std::collections::BTreeMap;

use wetmap::bands::ScalingScope;
use wetmap::dataset::{samples_from_rows, PatchSample};
use wetmap::model::{build_fusion, BackboneConfig, FusionStrategy, Modality, Model};
use wetmap::synth::{generate_scene, SceneSpec};
use wetmap::trainer::{evaluate_model, run_cv, train, BalanceMode, TrainConfig, TrainError};

fn samples(complementary: bool, seed: u64) -> Vec<PatchSample<f32>> {
    scene_samples(2, complementary, seed)
}

fn scene_samples(block_patches: usize, complementary: bool, seed: u64) -> Vec<PatchSample<f32>> {
    let spec = SceneSpec::checkerboard(2, 6, block_patches, complementary);
    let scene = generate_scene::<f32>(&spec, seed).unwrap();
    samples_from_rows(&scene.manifest, &scene.stacks, ScalingScope::Scene).unwrap()
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        r_i: 0.05,
        max_epoch: epochs,
        balance_mode: BalanceMode::None,
        seed: 3,
        ..Default::default()
    }
}

#[test]
fn loss_halves_by_epoch_twenty_on_separable_data() {
    let data = scene_samples(4, false, 1);
    let mut model = Model::<f32>::single(Modality::Ndd, &BackboneConfig::tiny(3), 5).unwrap();
    let out = train(&mut model, &data, &[], &cfg(100)).unwrap();
    let (first, last) = (out.history[0].train_loss, out.history[19].train_loss);
    assert!(last < 0.5 * first, "epoch 1 loss {first}, epoch 20 loss {last}");
    assert_eq!(out.history[0].epoch, 1);
    assert!(out.best.is_none());
}

#[test]
fn same_seed_same_history() {
    let data = samples(true, 2);
    let run = || {
        let mut m = Model::<f32>::single(Modality::Rgb, &BackboneConfig::tiny(3), 5).unwrap();
        let out = train(&mut m, &data[..40], &data[40..], &cfg(4)).unwrap();
        (out.history_csv(), m.params().to_vec())
    };
    let (h1, p1) = run();
    let (h2, p2) = run();
    assert_eq!(h1, h2);
    assert_eq!(p1, p2);
}

#[test]
fn frozen_parameters_survive_training() {
    let data = samples(true, 3);
    let base = BackboneConfig::tiny(3);
    let rgb = Model::<f32>::single(Modality::Rgb, &base, 1).unwrap();
    let ndd = Model::<f32>::single(Modality::Ndd, &base, 2).unwrap();
    for strategy in FusionStrategy::ALL {
        let mut m = build_fusion(strategy, &base, Some(&rgb), Some(&ndd), 4).unwrap();
        let before = m.clone();
        train(&mut m, &data[..32], &[], &cfg(5)).unwrap();
        let mut moved = 0;
        for spec in m.store().specs() {
            let (a, b) = (before.store().get(&spec.name).unwrap(), m.store().get(&spec.name).unwrap());
            let same = a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
            if m.frozen_set().contains(&spec.name) {
                assert!(same, "{strategy:?}: frozen {} changed", spec.name);
            } else {
                moved += usize::from(!same);
            }
        }
        assert!(moved > 0, "{strategy:?}: nothing trained");
        if strategy == FusionStrategy::Early {
            assert!(m.frozen_set().is_empty());
        }
    }
}

#[test]
fn divergence_aborts_with_sample_ids() {
    let data = samples(false, 4);
    let mut m = Model::<f32>::single(Modality::Rgb, &BackboneConfig::tiny(3), 5).unwrap();
    let wild = TrainConfig {
        r_i: 1e30,
        ..cfg(5)
    };
    match train(&mut m, &data, &[], &wild) {
        Err(TrainError::NonFiniteLoss { epoch, samples, .. }) => {
            assert!(epoch >= 1);
            assert!(!samples.is_empty());
        }
        other => panic!("expected abort, got {:?}", other.map(|o| o.history)),
    }
}

#[test]
fn every_sample_is_validated_once() {
    let data = samples(false, 5);
    let pool = &data[..9];
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    let fixed = Model::<f32>::single(Modality::Rgb, &BackboneConfig::tiny(3), 5).unwrap();
    let report = run_cv(pool, &data[9..20], 3, 7, |_, tr, va| {
        assert_eq!(tr.len() + va.len(), 9);
        for s in va {
            *seen.entry(s.sample_id.clone()).or_default() += 1;
        }
        Ok(fixed.clone())
    })
    .unwrap();
    assert_eq!(seen.len(), 9);
    assert!(seen.values().all(|&n| n == 1));

    let mean = report.folds.iter().map(|f| f.validation.overall).sum::<f64>() / 3.0;
    assert!((mean - report.mean_validation_overall).abs() <= 1e-12);
    // one model for every fold: the holdout mean is that model's score
    let single = evaluate_model(&fixed, &data[9..20]).unwrap().overall;
    assert!((report.mean_test_overall.unwrap() - single).abs() <= 1e-12);
}
