//! SGD, source pretraining, zoo tuning, baselines and evaluation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{build_plain_backbone, convert_to_zoo, BackboneConfig, Model, ZooOptions};
use crate::checkpoint::Checkpoint;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::params::{Forward, Mode, ParamId, ParamStore};
use crate::rng::{stream, Stream};
use crate::tensor::{Real, Tensor};
use crate::zoo::{BatchStats, GateMode, TeState, TE_DECAY};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TuneMode {
    Full,
    Lite,
    AvgAgg,
    NoAlign,
    FinetuneSingle(usize),
}

impl TuneMode {
    pub fn name(self) -> &'static str {
        match self {
            TuneMode::Full => "full",
            TuneMode::Lite => "lite",
            TuneMode::AvgAgg => "avg-agg",
            TuneMode::NoAlign => "no-align",
            TuneMode::FinetuneSingle(_) => "finetune",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub iterations: usize,
    /// Fractions of `iterations` at which the learning rate is multiplied by `decay_factor`.
    pub decay_at: Vec<f64>,
    pub decay_factor: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub mode: TuneMode,
    /// Evaluate every this many iterations (0: only at the end).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            batch_size: 16,
            iterations: 1000,
            decay_at: vec![0.4, 0.8],
            decay_factor: 0.1,
            weight_decay: 0.0,
            seed: 0,
            mode: TuneMode::Full,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.batch_size < 2 {
            return bad("batch size must be at least 2");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight decay must be non-negative");
        }
        if self.decay_at.iter().any(|f| !(0.0..=1.0).contains(f)) || !(self.decay_factor > 0.0) {
            return bad("decay points must lie in [0, 1] with a positive factor");
        }
        Ok(())
    }

    /// Learning rate used at `iteration` (0-based).
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let steps = self
            .decay_at
            .iter()
            .filter(|&&f| iteration >= libm::floor(f * self.iterations as f64) as usize)
            .count();
        self.lr * libm::pow(self.decay_factor, steps as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunPoint {
    pub iteration: usize,
    pub train_loss: f64,
    pub eval_metric: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateSample {
    pub iteration: usize,
    pub layer: usize,
    pub source: usize,
    pub gate_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunRecord {
    pub points: Vec<RunPoint>,
    pub gate_trace: Vec<GateSample>,
    pub final_metric: Option<f64>,
    /// Seconds; filled in by callers that have a clock.
    pub wall_clock: Option<f64>,
    /// Forward multiply-accumulates spent on training batches.
    pub train_macs: u64,
}

impl RunRecord {
    pub fn losses(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.train_loss).collect()
    }
}

/// `v <- momentum v + g + wd p; p <- p - lr v`.
pub fn sgd_momentum_step<T: Real>(
    p: &mut [T],
    g: &[T],
    v: &mut [T],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if p.len() != g.len() || p.len() != v.len() {
        return Err(Error::Dimension { op: "sgd_momentum_step", lhs: vec![p.len()], rhs: vec![g.len(), v.len()] });
    }
    let (lr, mu, wd) = (T::of(lr), T::of(momentum), T::of(weight_decay));
    for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = mu * *v + g + wd * *p;
        *p -= lr * *v;
    }
    Ok(())
}

/// Momentum SGD over a parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: f64) -> Result<()> {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        for (id, g) in grads {
            if id.index() >= store.len() || store.get(*id).shape() != g.shape() {
                return Err(Error::Contract(format!("gradient for parameter {} does not match the store", id.index())));
            }
            let v = self.velocity[id.index()].get_or_insert_with(|| Tensor::zeros(g.shape()));
            sgd_momentum_step(store.get_mut(*id).data_mut(), g.data(), v.data_mut(), lr, self.momentum, self.weight_decay)?;
        }
        Ok(())
    }
}

/// Seeded per-epoch shuffles cut into full batches.
struct Batches {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    size: usize,
}

impl Batches {
    fn new(n: usize, size: usize, seed: u64) -> Result<Self> {
        if n < size {
            return Err(Error::Config(format!("dataset of {n} samples is smaller than one batch of {size}")));
        }
        Ok(Self { rng: stream(seed, Stream::DataOrder), order: (0..n).collect(), pos: n, size })
    }

    fn next_batch(&mut self) -> &[usize] {
        if self.pos + self.size > self.order.len() {
            self.order.sort_unstable();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += self.size;
        &self.order[self.pos - self.size..self.pos]
    }
}

/// Index of the largest value, ties going to the lowest index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Fraction of rows of `logits` whose argmax equals the label.
pub fn accuracy_from_logits<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::Dimension { op: "accuracy", lhs: s.to_vec(), rhs: vec![labels.len()] });
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let c = s[1];
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(r, &l)| argmax(&logits.data()[r * c..(r + 1) * c]) == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

pub const EVAL_CHUNK: usize = 100;

/// Eval-mode logits of the whole dataset, in order.
pub fn predict<T: Real>(model: &Model<T>, data: &Dataset, te: Option<&TeState>) -> Result<Tensor<T>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut parts = Vec::new();
    for chunk in idx.chunks(EVAL_CHUNK) {
        parts.push(model.logits(&data.batch(chunk), Mode::Eval, te)?);
    }
    let c = parts[0].shape()[1];
    let flat: Vec<T> = parts.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::new(&[data.len(), c], flat)
}

/// Top-1 accuracy; with `te` every zoo layer uses its temporal-ensemble gates.
pub fn evaluate_accuracy<T: Real>(model: &Model<T>, data: &Dataset, te: Option<&TeState>) -> Result<f64> {
    accuracy_from_logits(&predict(model, data, te)?, &data.labels)
}

fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<f64> {
    let c = logits.shape()[1];
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(c) {
        let mx = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| libm::exp(v.as_f64() - mx)).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.into_iter().map(|v| v / z));
    }
    out
}

/// Accuracy of the averaged softmax distributions of `models`.
pub fn ensemble_accuracy<T: Real>(models: &[Model<T>], data: &Dataset) -> Result<f64> {
    let first = models.first().ok_or_else(|| Error::Config("empty ensemble".into()))?;
    let mut acc = softmax_rows(&predict(first, data, None)?);
    for m in &models[1..] {
        for (a, p) in acc.iter_mut().zip(softmax_rows(&predict(m, data, None)?)) {
            *a += p;
        }
    }
    let k = models.len() as f64;
    let avg = Tensor::<f64>::from_parts(vec![data.len(), data.classes], acc.into_iter().map(|a| a / k).collect());
    accuracy_from_logits(&avg, &data.labels)
}

/// Trains `model` in place. With `te`, gate batch means also feed the
/// temporal ensemble after every iteration.
pub fn fit<T: Real>(
    model: &mut Model<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    eval: Option<&Dataset>,
    mut te: Option<&mut TeState>,
) -> Result<RunRecord> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if data.classes != model.config.classes {
        return Err(Error::Config(format!("dataset has {} classes, head has {}", data.classes, model.config.classes)));
    }
    let mut record = RunRecord::default();
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut batches = Batches::new(data.len(), cfg.batch_size, cfg.seed)?;
    for it in 0..cfg.iterations {
        let idx = batches.next_batch().to_vec();
        let x = data.batch::<T>(&idx);
        let labels = data.batch_labels(&idx);
        let (loss, grads, effects, macs) = {
            let mut fwd = Forward::new(&model.store, Mode::Train);
            let xn = fwd.graph.input(x);
            let logits = model.forward(&mut fwd, xn)?;
            let loss_node = fwd.graph.softmax_cross_entropy(logits, &labels)?;
            let loss = fwd.graph.value(loss_node).data()[0].as_f64();
            if !loss.is_finite() {
                return Err(Error::Diverged { iteration: it, loss });
            }
            let macs = fwd.graph.tally().total().total();
            let grads = fwd.backward(loss_node)?;
            (loss, grads, core::mem::take(&mut fwd.effects), macs)
        };
        if grads.iter().any(|(_, g)| !g.all_finite()) {
            return Err(Error::Diverged { iteration: it, loss: f64::NAN });
        }
        model.apply_buffer_updates(effects.buffer_updates);
        sgd.step(&mut model.store, &grads, cfg.lr_at(it))?;
        record.train_macs += macs;
        for (layer, means) in effects.gate_means {
            for (source, &gate_mean) in means.iter().enumerate() {
                record.gate_trace.push(GateSample { iteration: it, layer, source, gate_mean });
            }
            if let Some(te) = te.as_deref_mut() {
                te.update(layer, &BatchStats::new(idx.len(), means)?);
            }
        }
        let last = it + 1 == cfg.iterations;
        let eval_metric = match eval {
            Some(d) if last || (cfg.eval_every > 0 && (it + 1) % cfg.eval_every == 0) => {
                Some(evaluate_accuracy(model, d, te.as_deref())?)
            }
            _ => None,
        };
        record.points.push(RunPoint { iteration: it, train_loss: loss, eval_metric });
    }
    record.final_metric = match eval {
        Some(d) => Some(match record.points.last().and_then(|p| p.eval_metric) {
            Some(m) => m,
            None => evaluate_accuracy(model, d, te.as_deref())?,
        }),
        None => None,
    };
    Ok(record)
}

fn head_config(backbone: &BackboneConfig, data: &Dataset) -> Result<BackboneConfig> {
    if data.channels != backbone.in_channels || data.side != backbone.side {
        return Err(Error::Config(format!(
            "dataset images are {}x{}x{}, backbone expects {}x{}x{}",
            data.channels, data.side, data.side, backbone.in_channels, backbone.side, backbone.side
        )));
    }
    Ok(BackboneConfig { classes: data.classes, ..backbone.clone() })
}

/// Trains a plain backbone from scratch on `task`.
pub fn train_source<T: Real>(
    task: &Dataset,
    cfg: &TrainConfig,
    backbone: &BackboneConfig,
    include_head: bool,
    eval: Option<&Dataset>,
) -> Result<(Checkpoint, RunRecord)> {
    let bc = head_config(backbone, task)?;
    let mut model = build_plain_backbone::<T>(&bc, cfg.seed)?;
    let record = fit(&mut model, task, cfg, eval, None)?;
    let mut ck = model.to_checkpoint(include_head);
    ck.set_meta("task", &task.provenance);
    ck.set_meta("seed", cfg.seed);
    Ok((ck, record))
}

#[derive(Debug, Clone)]
pub struct TuneOutput<T> {
    pub model: Model<T>,
    pub te: Option<TeState>,
    pub record: RunRecord,
}

/// Builds the zoo model a tuning mode starts from.
pub fn prepare_zoo_model<T: Real>(
    zoo: &[Checkpoint],
    backbone: &BackboneConfig,
    target: &Dataset,
    cfg: &TrainConfig,
) -> Result<Model<T>> {
    let bc = head_config(backbone, target)?;
    let (align, gate_mode) = match cfg.mode {
        TuneMode::Full => (true, GateMode::PerSample),
        TuneMode::Lite => (true, GateMode::BatchAverage),
        TuneMode::AvgAgg => (false, GateMode::Uniform),
        TuneMode::NoAlign => (false, GateMode::PerSample),
        TuneMode::FinetuneSingle(_) => return Err(Error::Config("fine-tuning is not a zoo tuning mode".into())),
    };
    let mut model = convert_to_zoo::<T>(&bc, zoo, ZooOptions { align }, cfg.seed)?;
    model.set_gate_mode(gate_mode);
    if cfg.mode == TuneMode::AvgAgg {
        model.set_gates_trainable(false);
    }
    Ok(model)
}

/// Tunes an aggregated model over `zoo` on `target`. Lite mode also
/// returns the temporal ensemble of gate values.
pub fn zoo_tune<T: Real>(
    zoo: &[Checkpoint],
    backbone: &BackboneConfig,
    target: &Dataset,
    cfg: &TrainConfig,
    eval: Option<&Dataset>,
) -> Result<TuneOutput<T>> {
    let mut model = prepare_zoo_model::<T>(zoo, backbone, target, cfg)?;
    let mut te = match cfg.mode {
        TuneMode::Lite => Some(TeState::new(model.zoo_layers().len(), TE_DECAY)?),
        _ => None,
    };
    let record = fit(&mut model, target, cfg, eval, te.as_mut())?;
    Ok(TuneOutput { model, te, record })
}

/// Plain backbone carrying `source`'s body and a fresh head.
pub fn finetune_model<T: Real>(
    source: &Checkpoint,
    backbone: &BackboneConfig,
    target: &Dataset,
    seed: u64,
) -> Result<Model<T>> {
    let bc = head_config(backbone, target)?;
    crate::backbone::check_zoo(&bc, core::slice::from_ref(source))?;
    let mut model = build_plain_backbone::<T>(&bc, seed)?;
    let mut body = source.clone();
    body.tensors.retain(|(n, _)| !n.starts_with("head."));
    model.load_tensors(&body, false)?;
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    FinetuneSingle(usize),
    Ensemble,
    AvgAgg,
}

#[derive(Debug, Clone)]
pub struct BaselineOutput<T> {
    pub metric: f64,
    pub record: RunRecord,
    pub models: Vec<Model<T>>,
}

/// Reference methods evaluated on `test`.
pub fn run_baseline<T: Real>(
    kind: BaselineKind,
    zoo: &[Checkpoint],
    backbone: &BackboneConfig,
    target: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<BaselineOutput<T>> {
    let finetune = |i: usize| -> Result<(Model<T>, RunRecord)> {
        let source = zoo.get(i).ok_or_else(|| Error::Config(format!("source index {i} out of range for {} sources", zoo.len())))?;
        let mut model = finetune_model::<T>(source, backbone, target, cfg.seed)?;
        let rec = fit(&mut model, target, &TrainConfig { mode: TuneMode::FinetuneSingle(i), ..cfg.clone() }, Some(test), None)?;
        Ok((model, rec))
    };
    match kind {
        BaselineKind::FinetuneSingle(i) => {
            let (model, record) = finetune(i)?;
            Ok(BaselineOutput { metric: record.final_metric.unwrap_or(0.0), record, models: vec![model] })
        }
        BaselineKind::Ensemble => {
            if zoo.is_empty() {
                return Err(Error::Config("ensemble of an empty zoo".into()));
            }
            let mut models = Vec::new();
            let mut record = RunRecord::default();
            for i in 0..zoo.len() {
                let (m, r) = finetune(i)?;
                if record.points.is_empty() {
                    record.points = r.points.iter().map(|p| RunPoint { eval_metric: None, ..*p }).collect();
                } else {
                    for (a, b) in record.points.iter_mut().zip(&r.points) {
                        a.train_loss += b.train_loss;
                    }
                }
                record.train_macs += r.train_macs;
                models.push(m);
            }
            let k = zoo.len() as f64;
            for p in &mut record.points {
                p.train_loss /= k;
            }
            let metric = ensemble_accuracy(&models, test)?;
            if let Some(p) = record.points.last_mut() {
                p.eval_metric = Some(metric);
            }
            record.final_metric = Some(metric);
            Ok(BaselineOutput { metric, record, models })
        }
        BaselineKind::AvgAgg => {
            let out = zoo_tune::<T>(zoo, backbone, target, &TrainConfig { mode: TuneMode::AvgAgg, ..cfg.clone() }, Some(test))?;
            Ok(BaselineOutput { metric: out.record.final_metric.unwrap_or(0.0), record: out.record, models: vec![out.model] })
        }
    }
}
