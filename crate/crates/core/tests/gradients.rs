use wetmap::model::{
    build_fusion, BackboneConfig, FMap, FusionStrategy, Modality, Model, ModelDescriptor, ModelInput, ModelKind,
};
use wetmap::trainer::weighted_cross_entropy;

fn input(px: usize, salt: u64) -> ModelInput<f64> {
    let mut state = salt.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state % 10_000) as f64 / 10_000.0
    };
    let mut plane = || FMap::new(3, px, px, (0..3 * px * px).map(|_| next()).collect());
    ModelInput {
        rgb: plane(),
        ndd: plane(),
    }
}

/// Largest relative error over all trainable parameters, with the
/// denominator floored at 1e-6.
fn worst_relative_error(model: &Model<f64>, x: &ModelInput<f64>, label: usize) -> (f64, usize) {
    let alpha = 0.4;
    let mut grad = vec![0.0; model.param_count()];
    model
        .forward_backward(x, &mut grad, |s| weighted_cross_entropy(s, label, alpha))
        .unwrap();
    let h = 1e-5;
    let indices: Vec<usize> = model
        .trainable_slots()
        .iter()
        .flat_map(|s| s.offset..s.offset + s.len)
        .collect();
    let loss = |m: &Model<f64>| weighted_cross_entropy(&m.forward(x).unwrap(), label, alpha).0;
    let mut m = model.clone();
    let mut worst = 0.0f64;
    for &i in &indices {
        let orig = m.params()[i];
        m.store_mut().data_mut()[i] = orig + h;
        let up = loss(&m);
        m.store_mut().data_mut()[i] = orig - h;
        let down = loss(&m);
        m.store_mut().data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6));
    }
    (worst, indices.len())
}

fn models(fine_tune: bool) -> Vec<Model<f64>> {
    let cfg = BackboneConfig::tiny(3);
    let rgb = Model::single(Modality::Rgb, &cfg, 1).unwrap();
    let ndd = Model::single(Modality::Ndd, &cfg, 2).unwrap();
    FusionStrategy::ALL
        .iter()
        .map(|&s| {
            let built = build_fusion(s, &cfg, Some(&rgb), Some(&ndd), 3).unwrap();
            if !fine_tune {
                return built;
            }
            let mut m = Model::from_descriptor(
                ModelDescriptor {
                    fine_tune: true,
                    ..*built.descriptor()
                },
                0,
            )
            .unwrap();
            m.store_mut().data_mut().copy_from_slice(built.params());
            m
        })
        .collect()
}

#[test]
fn fine_tuned_branches_receive_correct_gradients() {
    let x = input(16, 9);
    for m in models(true) {
        if let ModelKind::Fusion {
            strategy: FusionStrategy::Early,
        } = m.kind()
        {
            continue;
        }
        assert!(m.frozen_set().is_empty());
        let (worst, n) = worst_relative_error(&m, &x, 3);
        assert!(worst <= 1e-4, "{} fine-tuned: worst {worst:e} over {n}", m.kind());
    }
}

#[test]
fn single_model_gradients() {
    let x = input(16, 2);
    let m = Model::single(Modality::Ndd, &BackboneConfig::tiny(3), 4).unwrap();
    let (worst, _) = worst_relative_error(&m, &x, 1);
    assert!(worst <= 1e-4, "worst {worst:e}");
}
