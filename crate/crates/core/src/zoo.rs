//! Adaptive aggregation of a zoo of source convolution kernels.
//!
//! Each source kernel `W_i` is first re-mixed along its output channels by a
//! learned alignment matrix `T_i` (identity at construction), then the
//! aligned kernels are summed with gate values `a_i` produced from the
//! layer's input by one small gating network per source:
//!
//! ```text
//! W_hat = sum_i a_i(h) * (T_i * W_i)
//! a_i(h) = sigmoid(expand_i(relu(reduce_i(avgpool(h)))))
//! ```
//!
//! For the lite variant the per-batch mean gate values are smoothed with an
//! exponential moving average ([`TeState`]) and, after training, frozen into
//! a single plain kernel ([`te_collapse`]).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{MacKind, NodeId};
use crate::ops;
use crate::params::{Forward, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Default temporal-ensemble decay.
pub const TE_DECAY: f64 = 0.9;

/// Largest initial gate value; a single-source zoo cannot start at exactly 1.
pub const MAX_INITIAL_GATE: f64 = 0.999;

/// Hidden width of a gating network for `c_in` input channels.
pub fn gate_hidden(c_in: usize) -> usize {
    c_in.div_ceil(16).max(4)
}

/// Logit of the initial gate value for an `m`-source zoo.
pub fn uniform_gate_logit(m: usize) -> f64 {
    let p = (1.0 / m as f64).min(MAX_INITIAL_GATE);
    libm::log(p / (1.0 - p))
}

#[derive(Debug, Clone, PartialEq)]
pub enum GateMode {
    /// One gate vector per sample, hence one aggregated kernel per sample.
    PerSample,
    /// Per-sample gates averaged over the batch; one kernel per batch.
    BatchAverage,
    /// Fixed gate values (e.g. temporal-ensemble averages), one per source.
    Frozen(Vec<f64>),
    /// Every gate fixed at `1/m`; gating networks unused.
    Uniform,
}

impl GateMode {
    pub fn uses_gating_nets(&self) -> bool {
        matches!(self, GateMode::PerSample | GateMode::BatchAverage)
    }

    pub fn name(&self) -> &'static str {
        match self {
            GateMode::PerSample => "per_sample",
            GateMode::BatchAverage => "batch_average",
            GateMode::Frozen(_) => "frozen",
            GateMode::Uniform => "uniform",
        }
    }
}

/// One source's gating network: avgpool -> affine -> relu -> affine -> sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingNet {
    pub reduce_weight: ParamId,
    pub reduce_bias: ParamId,
    pub expand_weight: ParamId,
    pub expand_bias: ParamId,
    pub hidden: usize,
}

impl GatingNet {
    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.reduce_weight, self.reduce_bias, self.expand_weight, self.expand_bias]
    }
}

/// Per-source kernels for one layer.
#[derive(Debug, Clone)]
pub struct SourceWeights<T> {
    pub weights: Vec<Tensor<T>>,
    pub biases: Option<Vec<Tensor<T>>>,
}

impl<T: Real> SourceWeights<T> {
    pub fn new(weights: Vec<Tensor<T>>, biases: Option<Vec<Tensor<T>>>) -> Result<Self> {
        let first = weights.first().ok_or_else(|| Error::Contract("zoo layer needs at least one source".into()))?;
        if first.rank() != 4 || first.shape()[2] != first.shape()[3] {
            return Err(Error::Dimension { op: "source weights", lhs: first.shape().to_vec(), rhs: vec![0, 0, 0, 0] });
        }
        for w in &weights {
            if w.shape() != first.shape() {
                return Err(Error::Dimension { op: "source weights", lhs: first.shape().to_vec(), rhs: w.shape().to_vec() });
            }
        }
        if let Some(bs) = &biases {
            if bs.len() != weights.len() {
                return Err(Error::Contract("one bias per source required".into()));
            }
            for b in bs {
                if b.shape() != [first.shape()[0]] {
                    return Err(Error::Dimension { op: "source bias", lhs: vec![first.shape()[0]], rhs: b.shape().to_vec() });
                }
            }
        }
        Ok(Self { weights, biases })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// A convolution whose kernel is the gate-weighted sum of aligned source kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaAggLayer {
    pub name: String,
    /// Position among the model's zoo layers; keys gate traces and TE state.
    pub index: usize,
    pub sources: Vec<ParamId>,
    pub biases: Option<Vec<ParamId>>,
    /// `None` when channel alignment is disabled for this layer.
    pub alignments: Option<Vec<ParamId>>,
    pub gates: Vec<GatingNet>,
    pub stride: usize,
    pub padding: usize,
    pub gate_mode: GateMode,
    pub c_out: usize,
    pub c_in: usize,
    pub kernel: usize,
}

/// Construction options for [`AdaAggLayer::new`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub stride: usize,
    pub padding: usize,
    pub align: bool,
}

impl AdaAggLayer {
    /// Registers the layer's parameters under `name`: sources copied in,
    /// identity alignments, and gates initialized to output `1/m`.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        index: usize,
        sources: SourceWeights<T>,
        spec: LayerSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let m = sources.len();
        let shape = sources.weights[0].shape().to_vec();
        let (c_out, c_in, kernel) = (shape[0], shape[1], shape[2]);
        let SourceWeights { weights, biases } = sources;
        let mut src_ids = Vec::with_capacity(m);
        for (i, w) in weights.into_iter().enumerate() {
            src_ids.push(store.add(format!("{name}.source{i}.weight"), w, true)?);
        }
        let bias_ids = match biases {
            Some(bs) => {
                let mut ids = Vec::with_capacity(m);
                for (i, b) in bs.into_iter().enumerate() {
                    ids.push(store.add(format!("{name}.source{i}.bias"), b, true)?);
                }
                Some(ids)
            }
            None => None,
        };
        let alignments = if spec.align {
            let mut ids = Vec::with_capacity(m);
            for i in 0..m {
                ids.push(store.add(format!("{name}.align{i}"), Tensor::identity(c_out), true)?);
            }
            Some(ids)
        } else {
            None
        };
        let hidden = gate_hidden(c_in);
        let mut gates = Vec::with_capacity(m);
        for i in 0..m {
            let p = format!("{name}.gate{i}");
            gates.push(GatingNet {
                reduce_weight: store.add(format!("{p}.reduce.weight"), Tensor::zeros(&[hidden, c_in]), true)?,
                reduce_bias: store.add(format!("{p}.reduce.bias"), Tensor::zeros(&[hidden]), true)?,
                expand_weight: store.add(format!("{p}.expand.weight"), Tensor::zeros(&[1, hidden]), true)?,
                expand_bias: store.add(format!("{p}.expand.bias"), Tensor::zeros(&[1]), true)?,
                hidden,
            });
        }
        let layer = Self {
            name: name.into(),
            index,
            sources: src_ids,
            biases: bias_ids,
            alignments,
            gates,
            stride: spec.stride,
            padding: spec.padding,
            gate_mode: GateMode::PerSample,
            c_out,
            c_in,
            kernel,
        };
        init_gates_uniform(&layer, store, rng);
        Ok(layer)
    }

    pub fn num_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn align_enabled(&self) -> bool {
        self.alignments.is_some()
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.c_out, self.c_in, self.kernel, self.kernel]
    }

    /// Every parameter id owned by the layer.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.sources.clone();
        ids.extend(self.biases.iter().flatten().copied());
        ids.extend(self.alignments.iter().flatten().copied());
        for g in &self.gates {
            ids.extend(g.param_ids());
        }
        ids
    }

    /// Aligned source kernels (and their biases) as graph nodes.
    fn aligned_nodes<T: Real>(&self, fwd: &mut Forward<'_, T>, scope: usize) -> Result<Vec<NodeId>> {
        let mut out = Vec::with_capacity(self.sources.len());
        for (i, &w) in self.sources.iter().enumerate() {
            let node = match &self.alignments {
                Some(al) if fwd.precomputed_alignment => {
                    let store = fwd.store();
                    let aligned = align_weights(store.get(al[i]), store.get(w))?;
                    fwd.graph.input(aligned)
                }
                Some(al) => {
                    let t = fwd.param(al[i]);
                    let wn = fwd.param(w);
                    fwd.graph.set_scope(scope, MacKind::Align);
                    fwd.graph.matmul_lead(t, wn)?
                }
                None => fwd.param(w),
            };
            out.push(node);
        }
        Ok(out)
    }

    /// Gate values `[N, m]` for input `h`.
    fn gate_nodes<T: Real>(&self, fwd: &mut Forward<'_, T>, h: NodeId, scope: usize) -> Result<NodeId> {
        let c = fwd.graph.shape(h).get(1).copied().unwrap_or(0);
        if fwd.graph.shape(h).len() != 4 || c != self.c_in {
            return Err(Error::Dimension {
                op: "gate_forward",
                lhs: fwd.graph.shape(h).to_vec(),
                rhs: vec![0, self.c_in, 0, 0],
            });
        }
        fwd.graph.set_scope(scope, MacKind::Gating);
        let pooled = fwd.graph.global_avg_pool(h)?;
        let pooled = fwd.graph.flatten(pooled)?;
        let mut cols = Vec::with_capacity(self.gates.len());
        for g in &self.gates {
            let (rw, rb, ew, eb) = (fwd.param(g.reduce_weight), fwd.param(g.reduce_bias), fwd.param(g.expand_weight), fwd.param(g.expand_bias));
            let hid = fwd.graph.affine(pooled, rw, rb)?;
            let hid = fwd.graph.relu(hid);
            let logit = fwd.graph.affine(hid, ew, eb)?;
            cols.push(fwd.graph.sigmoid_open(logit));
        }
        fwd.graph.concat_cols(&cols)
    }

    /// Forward through the layer. `scope` is the MAC-tally row.
    pub fn forward<T: Real>(&self, fwd: &mut Forward<'_, T>, h: NodeId, scope: usize) -> Result<NodeId> {
        let m = self.num_sources();
        let mode = match fwd.frozen {
            Some(te) => GateMode::Frozen(
                te.get(self.index)
                    .ok_or_else(|| Error::State(format!("no temporal-ensemble gates for layer `{}`", self.name)))?
                    .to_vec(),
            ),
            None => self.gate_mode.clone(),
        };
        if let GateMode::Frozen(v) = &mode {
            if v.len() != m {
                return Err(Error::State(format!("layer `{}` expects {m} frozen gates, got {}", self.name, v.len())));
            }
        }
        let aligned = self.aligned_nodes(fwd, scope)?;
        let biases: Option<Vec<NodeId>> = self.biases.as_ref().map(|bs| bs.iter().map(|&b| fwd.param(b)).collect());

        let (coeffs, per_sample) = match &mode {
            GateMode::PerSample => {
                let gates = self.gate_nodes(fwd, h, scope)?;
                let means = column_means(fwd.graph.value(gates));
                fwd.effects.gate_means.push((self.index, means));
                (gates, true)
            }
            GateMode::BatchAverage => {
                let gates = self.gate_nodes(fwd, h, scope)?;
                let avg = fwd.graph.mean_rows(gates)?;
                let means = fwd.graph.value(avg).data().iter().map(|x| x.as_f64()).collect();
                fwd.effects.gate_means.push((self.index, means));
                (avg, false)
            }
            GateMode::Frozen(v) => {
                let c = Tensor::from_parts(vec![m], v.iter().map(|&x| T::of(x)).collect());
                (fwd.graph.input(c), false)
            }
            GateMode::Uniform => {
                let c = Tensor::full(&[m], T::one() / T::of(m as f64));
                fwd.effects.gate_means.push((self.index, vec![1.0 / m as f64; m]));
                (fwd.graph.input(c), false)
            }
        };
        fwd.graph.set_scope(scope, MacKind::Aggregation);
        let weight = fwd.graph.mix(coeffs, &aligned)?;
        let bias = match &biases {
            Some(bs) => Some(fwd.graph.mix(coeffs, bs)?),
            None => None,
        };
        fwd.graph.set_scope(scope, MacKind::Base);
        let out = if per_sample {
            fwd.graph.conv2d_per_sample(h, weight, bias, self.stride, self.padding)?
        } else {
            fwd.graph.conv2d(h, weight, bias, self.stride, self.padding)?
        };
        fwd.graph.clear_scope();
        Ok(out)
    }
}

fn column_means<T: Real>(t: &Tensor<T>) -> Vec<f64> {
    let (n, m) = (t.shape()[0], t.shape()[1]);
    (0..m)
        .map(|j| (0..n).map(|r| t.data()[r * m + j]).sum::<T>() / T::of(n as f64))
        .map(|x| x.as_f64())
        .collect()
}

/// `W~[o] = sum_o' T[o, o'] W[o']`: a 1×1 convolution over the output-channel
/// axis of the kernel.
pub fn align_weights<T: Real>(t: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let c_out = w.shape().first().copied().unwrap_or(0);
    if t.shape() != [c_out, c_out] {
        return Err(Error::Dimension { op: "align_weights", lhs: t.shape().to_vec(), rhs: w.shape().to_vec() });
    }
    let r = w.len() / c_out;
    Ok(Tensor::from_parts(w.shape().to_vec(), ops::matmul_lead(t.data(), w.data(), c_out, c_out, r)))
}

fn aligned_sources<T: Real>(layer: &AdaAggLayer, store: &ParamStore<T>) -> Result<Vec<Tensor<T>>> {
    layer
        .sources
        .iter()
        .enumerate()
        .map(|(i, &w)| match &layer.alignments {
            Some(al) => align_weights(store.get(al[i]), store.get(w)),
            None => Ok(store.get(w).clone()),
        })
        .collect()
}

/// `W_hat = sum_i a_i (T_i * W_i)`, or `sum_i a_i W_i` without alignment.
pub fn aggregate_weights<T: Real>(layer: &AdaAggLayer, store: &ParamStore<T>, gates: &[T]) -> Result<Tensor<T>> {
    if gates.len() != layer.num_sources() {
        return Err(Error::Dimension { op: "aggregate_weights", lhs: vec![gates.len()], rhs: vec![layer.num_sources()] });
    }
    if gates.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gate values"));
    }
    let aligned = aligned_sources(layer, store)?;
    let refs: Vec<&[T]> = aligned.iter().map(|t| t.data()).collect();
    Ok(Tensor::from_parts(layer.weight_shape().to_vec(), ops::mix(gates, &refs)))
}

/// Gate values of every source for each sample of `h`, as `[N, m]`.
pub fn gate_forward<T: Real>(layer: &AdaAggLayer, store: &ParamStore<T>, h: &Tensor<T>) -> Result<Tensor<T>> {
    let mut fwd = Forward::new(store, crate::params::Mode::Eval);
    let hn = fwd.graph.input(h.clone());
    let g = layer.gate_nodes(&mut fwd, hn, 0)?;
    Ok(fwd.graph.value(g).clone())
}

/// Resets every gating network so it outputs `1/m` for any input: reduce
/// weights Kaiming-normal, reduce bias zero, expand weights zero, expand
/// bias `logit(1/m)` (clamped to [`MAX_INITIAL_GATE`] for `m = 1`).
pub fn init_gates_uniform<T: Real, R: Rng + ?Sized>(layer: &AdaAggLayer, store: &mut ParamStore<T>, rng: &mut R) {
    let m = layer.num_sources();
    let logit = T::of(uniform_gate_logit(m));
    for g in &layer.gates {
        let fan_in = layer.c_in as f64;
        let normal = Normal::new(0.0, libm::sqrt(2.0 / fan_in)).expect("positive std");
        for v in store.get_mut(g.reduce_weight).data_mut() {
            *v = T::of(normal.sample(rng));
        }
        store.get_mut(g.reduce_bias).data_mut().iter_mut().for_each(|v| *v = T::zero());
        store.get_mut(g.expand_weight).data_mut().iter_mut().for_each(|v| *v = T::zero());
        store.get_mut(g.expand_bias).data_mut()[0] = logit;
    }
}

/// Mean gate value of each source over one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub batch_size: usize,
    pub means: Vec<f64>,
}

impl BatchStats {
    pub fn new(batch_size: usize, means: Vec<f64>) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Contract("batch size must be positive".into()));
        }
        if means.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
            return Err(Error::Contract(format!("batch gate means must lie in (0, 1): {means:?}")));
        }
        Ok(Self { batch_size, means })
    }
}

/// Exponential moving average of batch-mean gates, one vector per zoo layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TeState {
    lambda: f64,
    layers: Vec<Option<Vec<f64>>>,
}

impl TeState {
    pub fn new(num_layers: usize, lambda: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&lambda) {
            return Err(Error::Config(format!("temporal-ensemble decay {lambda} outside [0, 1)")));
        }
        Ok(Self { lambda, layers: vec![None; num_layers] })
    }

    /// Builds a state from stored values (all layers initialized).
    pub fn from_values(lambda: f64, layers: Vec<Vec<f64>>) -> Result<Self> {
        let mut te = Self::new(layers.len(), lambda)?;
        for (i, v) in layers.into_iter().enumerate() {
            if v.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
                return Err(Error::State(format!("layer {i}: gate averages must lie in (0, 1)")));
            }
            te.layers[i] = Some(v);
        }
        Ok(te)
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn get(&self, layer: usize) -> Option<&[f64]> {
        self.layers.get(layer).and_then(|v| v.as_deref())
    }

    pub fn is_initialized(&self, layer: usize) -> bool {
        self.get(layer).is_some()
    }

    pub fn all_initialized(&self) -> bool {
        self.layers.iter().all(Option::is_some)
    }

    /// The first update of a layer takes the batch means as-is; later ones
    /// apply `a <- lambda a + (1 - lambda) mean`.
    pub fn update(&mut self, layer: usize, stats: &BatchStats) {
        let lambda = self.lambda;
        match &mut self.layers[layer] {
            Some(avg) => {
                for (a, &mu) in avg.iter_mut().zip(&stats.means) {
                    *a = lambda * *a + (1.0 - lambda) * mu;
                }
            }
            slot @ None => *slot = Some(stats.means.clone()),
        }
    }
}

/// Pre-aggregates a layer with its temporal-ensemble gates into one plain
/// kernel (and bias). Uses the same arithmetic as a frozen-gate forward.
pub fn te_collapse<T: Real>(
    layer: &AdaAggLayer,
    store: &ParamStore<T>,
    te: &TeState,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    let avg = te
        .get(layer.index)
        .ok_or_else(|| Error::State(format!("no temporal-ensemble gates for layer `{}`", layer.name)))?;
    let gates: Vec<T> = avg.iter().map(|&a| T::of(a)).collect();
    let weight = aggregate_weights(layer, store, &gates)?;
    let bias = match &layer.biases {
        Some(bs) => {
            let refs: Vec<&[T]> = bs.iter().map(|&b| store.get(b).data()).collect();
            Some(Tensor::from_parts(vec![layer.c_out], ops::mix(&gates, &refs)))
        }
        None => None,
    };
    Ok((weight, bias))
}

/// Affine parameters and running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

/// Elementwise mean of every field across the sources.
pub fn bn_init_average<T: Real>(sources: &[BnState<T>]) -> Result<BnState<T>> {
    let first = sources.first().ok_or_else(|| Error::Contract("bn_init_average of zero sources".into()))?;
    let c = first.gamma.shape().to_vec();
    for s in sources {
        for t in [&s.gamma, &s.beta, &s.running_mean, &s.running_var] {
            if t.shape() != c.as_slice() {
                return Err(Error::Dimension { op: "bn_init_average", lhs: c.clone(), rhs: t.shape().to_vec() });
            }
        }
    }
    let inv = T::one() / T::of(sources.len() as f64);
    let mean_of = |f: fn(&BnState<T>) -> &Tensor<T>| -> Tensor<T> {
        let mut acc = vec![T::zero(); f(first).len()];
        for s in sources {
            for (a, &v) in acc.iter_mut().zip(f(s).data()) {
                *a += v;
            }
        }
        Tensor::from_parts(c.clone(), acc.into_iter().map(|a| a * inv).collect())
    };
    Ok(BnState {
        gamma: mean_of(|s| &s.gamma),
        beta: mean_of(|s| &s.beta),
        running_mean: mean_of(|s| &s.running_mean),
        running_var: mean_of(|s| &s.running_var),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn kernel(c_out: usize, c_in: usize, k: usize, seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = c_out * c_in * k * k;
        Tensor::new(&[c_out, c_in, k, k], (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn layer(m: usize, align: bool) -> (ParamStore<f64>, AdaAggLayer) {
        let mut store = ParamStore::new();
        let ws = (0..m).map(|i| kernel(3, 2, 3, i as u64)).collect();
        let l = AdaAggLayer::new(
            &mut store,
            "l",
            0,
            SourceWeights::new(ws, None).unwrap(),
            LayerSpec { stride: 1, padding: 1, align },
            &mut rng(),
        )
        .unwrap();
        (store, l)
    }

    #[test]
    fn identity_alignment_is_bitwise() {
        let w = kernel(4, 3, 3, 1);
        assert_eq!(align_weights(&Tensor::identity(4), &w).unwrap(), w);
        let twice = align_weights(&Tensor::identity(4).scale(2.0), &w).unwrap();
        assert_eq!(twice, w.scale(2.0));
    }

    #[test]
    fn permutation_alignment_permutes_output_channels() {
        let w = kernel(3, 2, 2, 3);
        // pi = (0 -> 2, 1 -> 0, 2 -> 1): row o of T selects source channel pi(o)
        let pi = [2usize, 0, 1];
        let mut t = Tensor::<f64>::zeros(&[3, 3]);
        for (o, &src) in pi.iter().enumerate() {
            t.data_mut()[o * 3 + src] = 1.0;
        }
        let out = align_weights(&t, &w).unwrap();
        for (o, &src) in pi.iter().enumerate() {
            assert_eq!(out.index_outer(o), w.index_outer(src));
        }
        assert!(align_weights(&Tensor::identity(2), &w).is_err());
    }

    #[test]
    fn hidden_width_rule() {
        assert_eq!(gate_hidden(3), 4);
        assert_eq!(gate_hidden(16), 4);
        assert_eq!(gate_hidden(65), 5);
        assert_eq!(gate_hidden(128), 8);
    }

    #[test]
    fn uniform_init_values() {
        assert_eq!(uniform_gate_logit(2), 0.0);
        assert!((uniform_gate_logit(5) - (-1.386294)).abs() < 1e-6);
        assert!((uniform_gate_logit(1) - libm::log(999.0)).abs() < 1e-9);
        for m in [2usize, 4, 5] {
            let (store, l) = layer(m, true);
            let h = kernel(2, 2, 5, 11).reshape(&[2, 2, 5, 5]).unwrap();
            let g = gate_forward(&l, &store, &h).unwrap();
            assert_eq!(g.shape(), &[2, m]);
            for &v in g.data() {
                assert!((v - 1.0 / m as f64).abs() < 1e-15);
            }
            let sum: f64 = g.data()[..m].iter().sum();
            if m == 4 {
                assert!((sum - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn constant_head_and_gap_only_pathway() {
        let (mut store, l) = layer(2, true);
        store.get_mut(l.gates[1].expand_bias).data_mut()[0] = 1.3;
        let h = kernel(2, 2, 4, 5).reshape(&[2, 2, 4, 4]).unwrap();
        let g = gate_forward(&l, &store, &h).unwrap();
        let expected = ops::sigmoid(1.3);
        assert!((g.data()[1] - expected).abs() < 1e-15);
        assert!((g.data()[3] - expected).abs() < 1e-15);

        // Two inputs with the same channel means get the same gates.
        let mut store = store;
        for v in store.get_mut(l.gates[0].expand_weight).data_mut() {
            *v = 0.7;
        }
        let a = Tensor::from_f64(&[1, 2, 2, 2], &[1.0, 3.0, 2.0, 2.0, 0.0, 0.0, 0.0, 4.0]).unwrap();
        let b = Tensor::from_f64(&[1, 2, 2, 2], &[2.0, 2.0, 2.0, 2.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(gate_forward(&l, &store, &a).unwrap(), gate_forward(&l, &store, &b).unwrap());
        let wrong = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
        assert!(gate_forward(&l, &store, &wrong).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let (store, l) = layer(2, true);
        let w1 = store.get(l.sources[0]).clone();
        assert_eq!(aggregate_weights(&l, &store, &[1.0, 0.0]).unwrap(), w1);

        let mut store2 = ParamStore::new();
        let w = kernel(3, 2, 3, 9);
        let l2 = AdaAggLayer::new(
            &mut store2,
            "x",
            0,
            SourceWeights::new(vec![w.clone(), w.clone()], None).unwrap(),
            LayerSpec { stride: 1, padding: 0, align: true },
            &mut rng(),
        )
        .unwrap();
        assert_eq!(aggregate_weights(&l2, &store2, &[0.5, 0.5]).unwrap(), w);
        assert!(aggregate_weights(&l2, &store2, &[0.5]).is_err());
    }

    #[test]
    fn te_update_examples() {
        let mut te = TeState::new(1, TE_DECAY).unwrap();
        assert!(!te.is_initialized(0));
        te.update(0, &BatchStats::new(4, vec![0.5]).unwrap());
        assert_eq!(te.get(0).unwrap(), &[0.5]);
        te.update(0, &BatchStats::new(4, vec![0.3]).unwrap());
        assert!((te.get(0).unwrap()[0] - 0.48).abs() < 1e-15);

        let mut c = TeState::new(1, TE_DECAY).unwrap();
        for _ in 0..50 {
            c.update(0, &BatchStats::new(2, vec![0.37]).unwrap());
            assert!((c.get(0).unwrap()[0] - 0.37).abs() < 1e-15);
        }
        assert!(BatchStats::new(2, vec![1.0]).is_err());
        assert!(TeState::new(1, 1.0).is_err());
    }

    #[test]
    fn collapse_examples() {
        let (mut store, l) = layer(3, true);
        let te = TeState::from_values(TE_DECAY, vec![vec![0.2, 0.7, 0.4]]).unwrap();
        let (w, b) = te_collapse(&l, &store, &te).unwrap();
        assert!(b.is_none());
        assert_eq!(w, aggregate_weights(&l, &store, &[0.2, 0.7, 0.4]).unwrap());

        // cancellation with two opposite sources
        let w1 = kernel(3, 2, 3, 1);
        let mut s2 = ParamStore::new();
        let l2 = AdaAggLayer::new(
            &mut s2,
            "c",
            0,
            SourceWeights::new(vec![w1.clone(), w1.scale(-1.0)], None).unwrap(),
            LayerSpec { stride: 1, padding: 1, align: true },
            &mut rng(),
        )
        .unwrap();
        let te2 = TeState::from_values(TE_DECAY, vec![vec![0.5, 0.5]]).unwrap();
        assert!(te_collapse(&l2, &s2, &te2).unwrap().0.data().iter().all(|&v| v == 0.0));

        let empty = TeState::new(1, TE_DECAY).unwrap();
        assert!(matches!(te_collapse(&l, &store, &empty), Err(Error::State(_))));
        // one-hot selection returns the source kernel exactly
        let _ = &mut store;
        let hot = TeState { lambda: TE_DECAY, layers: vec![Some(vec![0.0, 1.0, 0.0])] };
        assert_eq!(te_collapse(&l, &store, &hot).unwrap().0, *store.get(l.sources[1]));
    }

    #[test]
    fn bn_average_examples() {
        let st = |g: f64| BnState::<f64> {
            gamma: Tensor::full(&[2], g),
            beta: Tensor::full(&[2], -g),
            running_mean: Tensor::full(&[2], 2.0 * g),
            running_var: Tensor::full(&[2], 1.0 + g),
        };
        let one = bn_init_average(&[st(1.5)]).unwrap();
        assert_eq!(one, st(1.5));
        assert_eq!(bn_init_average(&[st(0.0), st(2.0)]).unwrap().gamma.data(), &[1.0, 1.0]);
        assert_eq!(bn_init_average(&[st(1.0), st(2.0), st(6.0)]).unwrap().gamma.data(), &[3.0, 3.0]);
        let mut bad = st(1.0);
        bad.beta = Tensor::zeros(&[3]);
        assert!(bn_init_average(&[st(1.0), bad]).is_err());
    }
}
