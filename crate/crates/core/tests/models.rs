use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zootune_core::backbone::{build_plain_backbone, convert_to_zoo, BackboneConfig, Model, Stage, ZooOptions};
use zootune_core::checkpoint::{AnyTensor, Checkpoint};
use zootune_core::data::{gen_synthetic_split, Dataset, TaskSpec};
use zootune_core::params::{Forward, Mode};
use zootune_core::train::{
    ensemble_accuracy, evaluate_accuracy, fit, train_source, zoo_tune, TrainConfig, TuneMode,
};
use zootune_core::zoo::{gate_forward, GateMode};
use zootune_core::{Error, Tensor};

fn compact(classes: usize) -> BackboneConfig {
    BackboneConfig { classes, ..BackboneConfig::compact() }
}

fn random_batch(cfg: &BackboneConfig, n: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = n * cfg.in_channels * cfg.side * cfg.side;
    Tensor::new(&[n, cfg.in_channels, cfg.side, cfg.side], (0..len).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn zoo(cfg: &BackboneConfig, m: usize, seed: u64) -> Vec<Checkpoint> {
    (0..m).map(|i| build_plain_backbone::<f64>(cfg, seed + i as u64).unwrap().to_checkpoint(false)).collect()
}

fn copy_head(from: &Model<f64>, to: &mut Model<f64>) {
    let mut ck = Checkpoint::new();
    for name in ["head.weight", "head.bias"] {
        let id = from.store.find(name).unwrap();
        ck.tensors.push((name.into(), AnyTensor::from_tensor(from.store.get(id))));
    }
    to.load_tensors(&ck, false).unwrap();
}

/// Two classes told apart by overall brightness.
fn brightness_task(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, side) = (3, 16);
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let label = i % 2;
        let base = if label == 0 { 60.0 } else { 190.0 };
        for _ in 0..c * side * side {
            pixels.push((base + rng.random_range(-50.0..50.0f64)) as u8);
        }
        labels.push(label);
    }
    Dataset::new(pixels, labels, c, side, 2, "brightness").unwrap()
}

#[test]
fn single_source_uniform_zoo_reproduces_source() {
    let cfg = compact(4);
    let source = build_plain_backbone::<f64>(&cfg, 3).unwrap();
    let mut model = convert_to_zoo::<f64>(&cfg, &[source.to_checkpoint(false)], ZooOptions { align: false }, 5).unwrap();
    model.set_gate_mode(GateMode::Uniform);
    let mut reference = source.clone();
    copy_head(&model, &mut reference);
    let x = random_batch(&cfg, 4, 1);
    for mode in [Mode::Eval, Mode::Train] {
        let a = model.logits(&x, mode, None).unwrap();
        let b = reference.logits(&x, mode, None).unwrap();
        assert_eq!(a, b, "{mode:?}");
    }
}

#[test]
fn fresh_zoo_head_matches_plain_head_for_same_seed() {
    let cfg = compact(4);
    let plain = build_plain_backbone::<f64>(&cfg, 17).unwrap();
    let model = convert_to_zoo::<f64>(&cfg, &zoo(&cfg, 2, 1), ZooOptions::default(), 17).unwrap();
    for name in ["head.weight", "head.bias"] {
        let a = plain.store.get(plain.store.find(name).unwrap());
        let b = model.store.get(model.store.find(name).unwrap());
        assert_eq!(a, b);
    }
}

#[test]
fn eval_is_deterministic_and_row_independent() {
    let cfg = compact(4);
    let model = convert_to_zoo::<f64>(&cfg, &zoo(&cfg, 3, 8), ZooOptions::default(), 2).unwrap();
    let x = random_batch(&cfg, 3, 4);
    let a = model.logits(&x, Mode::Eval, None).unwrap();
    assert_eq!(a, model.logits(&x, Mode::Eval, None).unwrap());
    let dup = Tensor::stack(&[x.index_outer(1), x.index_outer(1), x.index_outer(0)]).unwrap();
    let b = model.logits(&dup, Mode::Eval, None).unwrap();
    assert_eq!(b.index_outer(0), b.index_outer(1));
    assert_eq!(b.index_outer(0), a.index_outer(1));
    assert_eq!(b.index_outer(2), a.index_outer(0));
}

#[test]
fn per_sample_gates_match_frozen_gates_for_one_sample() {
    let cfg = compact(4);
    let mut model = convert_to_zoo::<f64>(&cfg, &zoo(&cfg, 3, 30), ZooOptions::default(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let gate_ids: Vec<_> = model.zoo_layers().iter().flat_map(|z| z.gates.iter().flat_map(|g| g.param_ids())).collect();
    for id in gate_ids {
        for v in model.store.get_mut(id).data_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
    }
    let layer = model.zoo_layers()[0].clone();
    let h = random_batch(&cfg, 1, 10);
    let gates = gate_forward(&layer, &model.store, &h).unwrap();
    let run = |mode: GateMode| {
        let mut l = layer.clone();
        l.gate_mode = mode;
        let mut fwd = Forward::new(&model.store, Mode::Eval);
        let hn = fwd.graph.input(h.clone());
        let y = l.forward(&mut fwd, hn, 0).unwrap();
        fwd.graph.value(y).clone()
    };
    let per_sample = run(GateMode::PerSample);
    let frozen = run(GateMode::Frozen(gates.data().to_vec()));
    let batch_avg = run(GateMode::BatchAverage);
    assert!(per_sample.max_rel_diff(&frozen, 1e-9).unwrap() < 1e-12);
    assert!(batch_avg.max_rel_diff(&frozen, 1e-9).unwrap() < 1e-12);
}

#[test]
fn plain_and_zoo_models_learn_a_separable_task() {
    let cfg = compact(2);
    let train = brightness_task(64, 1);
    let test = brightness_task(40, 2);
    let tc = TrainConfig { iterations: 60, batch_size: 8, lr: 0.05, ..TrainConfig::default() };
    let mut plain = build_plain_backbone::<f32>(&cfg, 1).unwrap();
    fit(&mut plain, &train, &tc, None, None).unwrap();
    assert!(evaluate_accuracy(&plain, &test, None).unwrap() >= 0.95);

    let cks: Vec<_> = (0..2).map(|i| build_plain_backbone::<f32>(&cfg, 10 + i).unwrap().to_checkpoint(false)).collect();
    let out = zoo_tune::<f32>(&cks, &cfg, &train, &tc, Some(&test)).unwrap();
    assert!(out.record.final_metric.unwrap() >= 0.95);
}

#[test]
fn same_seed_same_run_and_zero_iterations_is_identity() {
    let cfg = compact(8);
    let (train, _) = gen_synthetic_split(&TaskSpec::composite(6, 3)).unwrap();
    let cks = zoo(&cfg, 2, 40);
    let tc = TrainConfig { iterations: 8, batch_size: 4, mode: TuneMode::Full, seed: 6, ..TrainConfig::default() };
    let a = zoo_tune::<f64>(&cks, &cfg, &train, &tc, None).unwrap();
    let b = zoo_tune::<f64>(&cks, &cfg, &train, &tc, None).unwrap();
    assert_eq!(a.record, b.record);
    assert_eq!(a.model, b.model);

    let zero = TrainConfig { iterations: 0, ..tc };
    let z = zoo_tune::<f64>(&cks, &cfg, &train, &zero, None).unwrap();
    let fresh = zootune_core::train::prepare_zoo_model::<f64>(&cks, &cfg, &train, &zero).unwrap();
    assert!(z.record.points.is_empty());
    assert_eq!(z.model, fresh);
}

#[test]
fn lite_tuning_initializes_every_ensemble_layer() {
    let cfg = compact(8);
    let (train, _) = gen_synthetic_split(&TaskSpec::composite(6, 3)).unwrap();
    let tc = TrainConfig { iterations: 1, batch_size: 4, mode: TuneMode::Lite, ..TrainConfig::default() };
    let out = zoo_tune::<f64>(&zoo(&cfg, 2, 1), &cfg, &train, &tc, None).unwrap();
    let te = out.te.unwrap();
    assert_eq!(te.num_layers(), out.model.zoo_layers().len());
    assert!(te.all_initialized());
}

#[test]
fn ensemble_of_identical_members_equals_member() {
    let cfg = compact(8);
    let (_, test) = gen_synthetic_split(&TaskSpec::composite(10, 4)).unwrap();
    let model = build_plain_backbone::<f64>(&cfg, 2).unwrap();
    let single = evaluate_accuracy(&model, &test, None).unwrap();
    let ens = ensemble_accuracy(&[model.clone(), model], &test).unwrap();
    assert_eq!(single, ens);
}

#[test]
fn training_lowers_the_loss_in_every_mode() {
    let cfg = compact(8);
    let (train, _) = gen_synthetic_split(&TaskSpec::composite(12, 5)).unwrap();
    let cks = zoo(&cfg, 2, 60);
    for mode in [TuneMode::Full, TuneMode::Lite, TuneMode::AvgAgg, TuneMode::NoAlign] {
        let tc = TrainConfig { iterations: 120, batch_size: 8, lr: 0.05, mode, ..TrainConfig::default() };
        let losses = zoo_tune::<f32>(&cks, &cfg, &train, &tc, None).unwrap().record.losses();
        let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = losses[losses.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "{}: {head} -> {tail}", mode.name());
    }
}

#[test]
fn batch_norm_statistics_move_during_training() {
    let cfg = compact(8);
    let (train, _) = gen_synthetic_split(&TaskSpec::composite(6, 3)).unwrap();
    let tc = TrainConfig { iterations: 3, batch_size: 4, mode: TuneMode::Full, ..TrainConfig::default() };
    let cks = zoo(&cfg, 2, 1);
    let before = zootune_core::train::prepare_zoo_model::<f64>(&cks, &cfg, &train, &tc).unwrap();
    let after = zoo_tune::<f64>(&cks, &cfg, &train, &tc, None).unwrap().model;
    let id = before.store.find("stem.bn.running_mean").unwrap();
    assert_ne!(before.store.get(id), after.store.get(id));
}

#[test]
fn zoo_checkpoint_roundtrip_preserves_outputs() {
    let cfg = compact(4);
    let mut model = convert_to_zoo::<f64>(&cfg, &zoo(&cfg, 3, 5), ZooOptions::default(), 1).unwrap();
    model.set_gate_mode(GateMode::BatchAverage);
    let back = Model::<f64>::from_checkpoint(&model.to_checkpoint(true)).unwrap();
    assert_eq!(back, model);
}

#[test]
fn mismatched_zoo_is_rejected_with_parameter_name() {
    let cfg = compact(4);
    let other = BackboneConfig { stages: vec![Stage { blocks: 1, channels: 8 }, Stage { blocks: 1, channels: 24 }], ..cfg.clone() };
    let mut cks = zoo(&cfg, 1, 1);
    cks.push(build_plain_backbone::<f64>(&other, 2).unwrap().to_checkpoint(false));
    match convert_to_zoo::<f64>(&cfg, &cks, ZooOptions::default(), 0) {
        Err(Error::ZooIncompatible { param, .. }) => assert!(param.starts_with("s1."), "{param}"),
        other => panic!("expected incompatibility, got {other:?}"),
    }
}

#[test]
fn desk_backbone_learns_a_single_factor_task() {
    let (train, test) = gen_synthetic_split(&TaskSpec::single(zootune_core::data::Factor::Shape, 100, 11)).unwrap();
    let tc = TrainConfig { iterations: 500, lr: 0.05, seed: 11, ..TrainConfig::default() };
    let (ck, _) = train_source::<f32>(&train, &tc, &BackboneConfig::desk(), true, None).unwrap();
    let model = Model::<f32>::from_checkpoint(&ck).unwrap();
    let acc = evaluate_accuracy(&model, &test, None).unwrap();
    assert!(acc >= 0.95, "accuracy {acc}");
}
