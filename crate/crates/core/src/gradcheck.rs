//! Central finite-difference oracle for the reverse-mode engine.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{BnMode, BnParams, Graph, NodeId};
use crate::params::{Forward, Mode, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// (parameter index, element index) of the worst entry.
    pub worst: (usize, usize),
    pub passed: bool,
}

/// Compares analytic gradients of `build` against `(f(p+h) - f(p-h)) / 2h`
/// for every element of every parameter. `build` receives a fresh graph and
/// the leaf ids of `params` and must return a scalar loss node.
pub fn finite_diff_check<F>(build: F, params: &[Tensor<f64>], h: f64, tol: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Contract(format!("step {h} outside [1e-7, 1e-3]")));
    }
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| g.param(p.clone())).collect();
        let loss = build(&mut g, &ids)?;
        let v = g.value(loss).item().ok_or_else(|| Error::Contract("loss must be scalar".into()))?;
        if !v.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &ids)?;
    if !g.value(loss).all_finite() {
        return Err(Error::NonFinite("loss"));
    }
    let grads = g.backward(loss)?;

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradReport { max_rel_error: 0.0, worst: (0, 0), passed: true };
    for (pi, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id);
        for ei in 0..params[pi].len() {
            let orig = params[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + h;
            let plus = eval(&work)?;
            work[pi].data_mut()[ei] = orig - h;
            let minus = eval(&work)?;
            work[pi].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[ei];
            let rel = rel_error(a, numeric);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (pi, ei);
            }
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}

/// Same check over every trainable parameter of `store`, with the loss
/// recorded by `build` on a train-mode [`Forward`].
pub fn finite_diff_check_store<F>(store: &ParamStore<f64>, build: F, h: f64, tol: f64) -> Result<GradReport>
where
    F: Fn(&mut Forward<'_, f64>) -> Result<NodeId>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Contract(format!("step {h} outside [1e-7, 1e-3]")));
    }
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut fwd = Forward::new(s, Mode::Train);
        let loss = build(&mut fwd)?;
        let v = fwd.graph.value(loss).item().ok_or_else(|| Error::Contract("loss must be scalar".into()))?;
        if !v.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        Ok(v)
    };
    let grads: Vec<(ParamId, Tensor<f64>)> = {
        let mut fwd = Forward::new(store, Mode::Train);
        let loss = build(&mut fwd)?;
        if !fwd.graph.value(loss).all_finite() {
            return Err(Error::NonFinite("loss"));
        }
        fwd.backward(loss)?
    };
    let mut work = store.clone();
    let mut report = GradReport { max_rel_error: 0.0, worst: (0, 0), passed: true };
    for (id, analytic) in &grads {
        for ei in 0..analytic.len() {
            let orig = store.get(*id).data()[ei];
            work.get_mut(*id).data_mut()[ei] = orig + h;
            let plus = eval(&work)?;
            work.get_mut(*id).data_mut()[ei] = orig - h;
            let minus = eval(&work)?;
            work.get_mut(*id).data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[ei];
            let rel = rel_error(a, numeric);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (id.index(), ei);
            }
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}

/// Below this magnitude central differences are dominated by roundoff
/// (about `eps * |loss| / h`), so the relative error is taken against it.
pub const REL_FLOOR: f64 = 1e-6;

fn rel_error(a: f64, numeric: f64) -> f64 {
    (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// `sum(out * r)` for a fixed random `r`, so every output element matters.
fn project(g: &mut Graph<f64>, out: NodeId, rng: &mut ChaCha8Rng) -> Result<NodeId> {
    let r = g.input(uniform(rng, g.shape(out), -1.0, 1.0));
    let p = g.mul(out, r)?;
    Ok(g.sum(p))
}

/// Names of the cases run by [`layer_suite`].
pub const SUITE_CASES: [&str; 17] = [
    "conv2d",
    "conv2d_per_sample",
    "matmul_lead",
    "mix_shared",
    "mix_per_row",
    "global_avg_pool",
    "affine",
    "batch_norm_train",
    "batch_norm_eval",
    "relu",
    "sigmoid",
    "sigmoid_open",
    "add_mul",
    "concat_cols",
    "mean_rows",
    "softmax_cross_entropy",
    "adaagg_residual_block",
];

/// Finite-difference check of every differentiable operation plus a full
/// residual block of aggregation layers (alignment, per-sample gates,
/// batch norm, projection shortcut), on data drawn from `seed`.
pub fn layer_suite(seed: u64, h: f64, tol: f64) -> Result<Vec<(&'static str, GradReport)>> {
    let mut out = Vec::new();
    for (ci, &name) in SUITE_CASES.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(ci as u64);
        let case_seed: u64 = rng.random();
        let report = if name == "adaagg_residual_block" {
            adaagg_block_case(case_seed, h, tol)?
        } else {
            op_case(name, &mut rng, case_seed, h, tol)?
        };
        out.push((name, report));
    }
    Ok(out)
}

fn op_case(name: &str, rng: &mut ChaCha8Rng, case_seed: u64, h: f64, tol: f64) -> Result<GradReport> {
    let u = |rng: &mut ChaCha8Rng, s: &[usize]| uniform(rng, s, -1.0, 1.0);
    let (params, ops): (Vec<Tensor<f64>>, &str) = match name {
        "conv2d" => (vec![u(rng, &[2, 3, 5, 5]), u(rng, &[4, 3, 3, 3]), u(rng, &[4])], name),
        "conv2d_per_sample" => (vec![u(rng, &[2, 2, 4, 4]), u(rng, &[2, 3, 2, 3, 3]), u(rng, &[2, 3])], name),
        "matmul_lead" => (vec![u(rng, &[3, 3]), u(rng, &[3, 2, 2, 2])], name),
        "mix_shared" => (vec![u(rng, &[3]), u(rng, &[2, 2, 3, 3]), u(rng, &[2, 2, 3, 3]), u(rng, &[2, 2, 3, 3])], name),
        "mix_per_row" => (vec![u(rng, &[2, 3]), u(rng, &[2, 2, 2, 2]), u(rng, &[2, 2, 2, 2]), u(rng, &[2, 2, 2, 2])], name),
        "global_avg_pool" | "relu" | "sigmoid" => (vec![u(rng, &[2, 3, 4, 4])], name),
        "sigmoid_open" => (vec![uniform(rng, &[2, 5], -4.0, 4.0)], name),
        "affine" => (vec![u(rng, &[3, 4]), u(rng, &[5, 4]), u(rng, &[5])], name),
        "batch_norm_train" | "batch_norm_eval" => {
            (vec![u(rng, &[3, 2, 3, 3]), uniform(rng, &[2], 0.5, 1.5), u(rng, &[2])], name)
        }
        "add_mul" => (vec![u(rng, &[2, 3]), u(rng, &[2, 3])], name),
        "concat_cols" => (vec![u(rng, &[3, 1]), u(rng, &[3, 2])], name),
        "mean_rows" => (vec![u(rng, &[4, 3])], name),
        "softmax_cross_entropy" => (vec![uniform(rng, &[4, 5], -2.0, 2.0)], name),
        _ => return Err(Error::Contract(format!("unknown gradient case `{name}`"))),
    };
    let running_mean = uniform(rng, &[2], -0.5, 0.5);
    let running_var = uniform(rng, &[2], 0.5, 2.0);
    let build = move |g: &mut Graph<f64>, p: &[NodeId]| -> Result<NodeId> {
        let mut r = ChaCha8Rng::seed_from_u64(case_seed);
        let y = match ops {
            "conv2d" => g.conv2d(p[0], p[1], Some(p[2]), 2, 1)?,
            "conv2d_per_sample" => g.conv2d_per_sample(p[0], p[1], Some(p[2]), 1, 1)?,
            "matmul_lead" => g.matmul_lead(p[0], p[1])?,
            "mix_shared" | "mix_per_row" => g.mix(p[0], &p[1..])?,
            "global_avg_pool" => g.global_avg_pool(p[0])?,
            "relu" => g.relu(p[0]),
            "sigmoid" => g.sigmoid(p[0]),
            "sigmoid_open" => g.sigmoid_open(p[0]),
            "affine" => g.affine(p[0], p[1], p[2])?,
            "batch_norm_train" | "batch_norm_eval" => {
                let mode = if ops == "batch_norm_train" { BnMode::Train } else { BnMode::Eval };
                let stats = BnParams { running_mean: &running_mean, running_var: &running_var, momentum: 0.1, eps: 1e-5 };
                g.batch_norm(p[0], p[1], p[2], stats, mode)?.out
            }
            "add_mul" => {
                let s = g.add(p[0], p[1])?;
                g.mul(s, p[1])?
            }
            "concat_cols" => g.concat_cols(&[p[0], p[1]])?,
            "mean_rows" => g.mean_rows(p[0])?,
            _ => return g.softmax_cross_entropy(p[0], &[0, 3, 1, 4]),
        };
        project(g, y, &mut r)
    };
    finite_diff_check(build, &params, h, tol)
}

fn adaagg_block_case(seed: u64, h: f64, tol: f64) -> Result<GradReport> {
    use crate::backbone::{build_plain_backbone, convert_to_zoo, BackboneConfig, Stage, ZooOptions};
    let cfg = BackboneConfig {
        in_channels: 2,
        stem_channels: 3,
        stages: alloc::vec![Stage { blocks: 1, channels: 4 }],
        classes: 3,
        side: 5,
        align_pointwise: true,
    };
    let zoo: Vec<_> = (0..2)
        .map(|i| build_plain_backbone::<f64>(&cfg, seed.wrapping_add(i)).map(|m| m.to_checkpoint(false)))
        .collect::<Result<_>>()?;
    let mut model = convert_to_zoo::<f64>(&cfg, &zoo, ZooOptions { align: true }, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let ids: Vec<ParamId> = model.store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        for v in model.store.get_mut(id).data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let x = uniform(&mut rng, &[2, 2, 5, 5], 0.0, 1.0);
    let model = &model;
    finite_diff_check_store(
        &model.store,
        |fwd| {
            let xn = fwd.graph.input(x.clone());
            let logits = model.forward(fwd, xn)?;
            fwd.graph.softmax_cross_entropy(logits, &[2, 0])
        },
        h,
        tol,
    )
}
