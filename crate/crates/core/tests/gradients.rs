use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zootune_core::backbone::{build_plain_backbone, convert_to_zoo, BackboneConfig, Stage, ZooOptions};
use zootune_core::gradcheck::{finite_diff_check_store, layer_suite, SUITE_CASES};
use zootune_core::zoo::GateMode;
use zootune_core::Tensor;

#[test]
fn every_case_passes_on_a_few_seeds() {
    for seed in [100, 101, 102] {
        let report = layer_suite(seed, 1e-5, 1e-4).unwrap();
        assert_eq!(report.len(), SUITE_CASES.len());
        for (name, r) in report {
            assert!(r.passed, "seed {seed} {name}: {r:?}");
        }
    }
}

fn tiny() -> BackboneConfig {
    BackboneConfig {
        in_channels: 1,
        stem_channels: 2,
        stages: vec![Stage { blocks: 1, channels: 3 }],
        classes: 2,
        side: 4,
        align_pointwise: false,
    }
}

/// Whole-model check for the gate modes the suite does not exercise.
#[test]
fn whole_zoo_model_gradients_in_other_gate_modes() {
    let cfg = tiny();
    let zoo: Vec<_> = (0..2).map(|i| build_plain_backbone::<f64>(&cfg, i).unwrap().to_checkpoint(false)).collect();
    for (align, mode) in [(true, GateMode::BatchAverage), (false, GateMode::PerSample), (false, GateMode::Uniform)] {
        let mut model = convert_to_zoo::<f64>(&cfg, &zoo, ZooOptions { align }, 3).unwrap();
        model.set_gate_mode(mode.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ids: Vec<_> = model.store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
        for id in ids {
            for v in model.store.get_mut(id).data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        let x = Tensor::new(&[3, 1, 4, 4], (0..48).map(|_| rng.random::<f64>()).collect()).unwrap();
        let model = &model;
        let r = finite_diff_check_store(
            &model.store,
            |fwd| {
                let xn = fwd.graph.input(x.clone());
                let logits = model.forward(fwd, xn)?;
                fwd.graph.softmax_cross_entropy(logits, &[1, 0, 1])
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{mode:?} align={align}: {r:?}");
    }
}
