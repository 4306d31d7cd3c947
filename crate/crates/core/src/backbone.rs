//! Small residual classifier and its conversion into a zoo-aggregating model.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::checkpoint::{AnyTensor, Checkpoint};
use crate::error::{Error, Result};
use crate::graph::{BnMode, BnParams, MacKind, NodeId};
use crate::params::{Forward, Mode, ParamId, ParamStore};
use crate::rng::{stream, Stream};
use crate::tensor::{Real, Tensor};
use crate::zoo::{self, AdaAggLayer, BnState, GateMode, LayerSpec, SourceWeights, TeState};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stage {
    pub blocks: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stages: Vec<Stage>,
    pub classes: usize,
    pub side: usize,
    /// Also align the 1×1 shortcut convolutions.
    pub align_pointwise: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl BackboneConfig {
    /// Two stages of two basic blocks, 16 -> 32 channels, 16×16 RGB input.
    pub fn desk() -> Self {
        Self {
            in_channels: 3,
            stem_channels: 16,
            stages: vec![Stage { blocks: 2, channels: 16 }, Stage { blocks: 2, channels: 32 }],
            classes: 8,
            side: 16,
            align_pointwise: false,
        }
    }

    /// One block per stage, 8 -> 16 channels; used for multi-run experiments.
    pub fn compact() -> Self {
        Self {
            in_channels: 3,
            stem_channels: 8,
            stages: vec![Stage { blocks: 1, channels: 8 }, Stage { blocks: 1, channels: 16 }],
            classes: 8,
            side: 16,
            align_pointwise: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.stages.is_empty() {
            return bad("at least one stage required");
        }
        if self.in_channels == 0 || self.stem_channels == 0 || self.classes == 0 || self.side == 0 {
            return bad("channels, classes and side must be positive");
        }
        if self.stages.iter().any(|s| s.blocks == 0 || s.channels == 0) {
            return bad("every stage needs positive blocks and channels");
        }
        // each later stage halves the side
        let mut side = self.side;
        for _ in 1..self.stages.len() {
            side = crate::ops::conv_out_len(side, 3, 2, 1).unwrap_or(0);
        }
        if side == 0 {
            return bad("input side too small for the number of stages");
        }
        Ok(())
    }

    /// The fields that determine parameter names and shapes of the body
    /// (the head is excluded: it is replaced for every target task).
    pub fn body_key(&self) -> String {
        let stages: Vec<String> = self.stages.iter().map(|s| format!("{}x{}", s.blocks, s.channels)).collect();
        format!("in={};stem={};stages={}", self.in_channels, self.stem_channels, stages.join(","))
    }

    pub fn digest(&self) -> String {
        let hash = Sha256::digest(self.body_key().as_bytes());
        hash.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn encode(&self) -> String {
        format!(
            "{};classes={};side={};align_pointwise={}",
            self.body_key(),
            self.classes,
            self.side,
            self.align_pointwise
        )
    }

    pub fn parse_stages(s: &str) -> Result<Vec<Stage>> {
        s.split(',')
            .map(|part| {
                let (b, c) = part
                    .trim()
                    .split_once('x')
                    .ok_or_else(|| Error::Config(format!("stage `{part}` is not BLOCKSxCHANNELS")))?;
                Ok(Stage { blocks: parse_num(b)?, channels: parse_num(c)? })
            })
            .collect()
    }

    pub fn decode(s: &str) -> Result<Self> {
        let mut cfg = Self::desk();
        for item in s.split(';').filter(|i| !i.is_empty()) {
            let (k, v) = item.split_once('=').ok_or_else(|| Error::Config(format!("bad config item `{item}`")))?;
            match k {
                "in" => cfg.in_channels = parse_num(v)?,
                "stem" => cfg.stem_channels = parse_num(v)?,
                "stages" => cfg.stages = Self::parse_stages(v)?,
                "classes" => cfg.classes = parse_num(v)?,
                "side" => cfg.side = parse_num(v)?,
                "align_pointwise" => {
                    cfg.align_pointwise = v.parse().map_err(|_| Error::Config(format!("bad bool `{v}`")))?
                }
                _ => return Err(Error::Config(format!("unknown config key `{k}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_num(s: &str) -> Result<usize> {
    s.trim().parse().map_err(|_| Error::Config(format!("`{s}` is not a non-negative integer")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlainConv {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
    pub c_out: usize,
    pub c_in: usize,
    pub kernel: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConvLayer {
    Plain(PlainConv),
    Zoo(AdaAggLayer),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    /// Row in MAC tallies and complexity reports.
    pub slot: usize,
    pub layer: ConvLayer,
}

impl Conv {
    pub fn name(&self) -> &str {
        match &self.layer {
            ConvLayer::Plain(p) => &p.name,
            ConvLayer::Zoo(z) => &z.name,
        }
    }

    /// (c_out, c_in, kernel, stride, padding)
    pub fn dims(&self) -> (usize, usize, usize, usize, usize) {
        match &self.layer {
            ConvLayer::Plain(p) => (p.c_out, p.c_in, p.kernel, p.stride, p.padding),
            ConvLayer::Zoo(z) => (z.c_out, z.c_in, z.kernel, z.stride, z.padding),
        }
    }

    fn forward<T: Real>(&self, fwd: &mut Forward<'_, T>, h: NodeId) -> Result<NodeId> {
        match &self.layer {
            ConvLayer::Plain(p) => {
                let w = fwd.param(p.weight);
                let b = p.bias.map(|b| fwd.param(b));
                fwd.graph.set_scope(self.slot, MacKind::Base);
                let out = fwd.graph.conv2d(h, w, b, p.stride, p.padding);
                fwd.graph.clear_scope();
                out
            }
            ConvLayer::Zoo(z) => z.forward(fwd, h, self.slot),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm {
    fn add<T: Real>(store: &mut ParamStore<T>, name: &str, st: BnState<T>) -> Result<Self> {
        let channels = st.gamma.len();
        Ok(Self {
            name: name.into(),
            gamma: store.add(format!("{name}.gamma"), st.gamma, true)?,
            beta: store.add(format!("{name}.beta"), st.beta, true)?,
            running_mean: store.add(format!("{name}.running_mean"), st.running_mean, false)?,
            running_var: store.add(format!("{name}.running_var"), st.running_var, false)?,
            channels,
        })
    }

    fn fresh<T: Real>(c: usize) -> BnState<T> {
        BnState {
            gamma: Tensor::full(&[c], T::one()),
            beta: Tensor::zeros(&[c]),
            running_mean: Tensor::zeros(&[c]),
            running_var: Tensor::full(&[c], T::one()),
        }
    }

    pub fn state<T: Real>(&self, store: &ParamStore<T>) -> BnState<T> {
        BnState {
            gamma: store.get(self.gamma).clone(),
            beta: store.get(self.beta).clone(),
            running_mean: store.get(self.running_mean).clone(),
            running_var: store.get(self.running_var).clone(),
        }
    }

    fn forward<T: Real>(&self, fwd: &mut Forward<'_, T>, h: NodeId) -> Result<NodeId> {
        let (g, b) = (fwd.param(self.gamma), fwd.param(self.beta));
        let store = fwd.store();
        let stats = BnParams {
            running_mean: store.get(self.running_mean),
            running_var: store.get(self.running_var),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        };
        let mode = match fwd.mode {
            Mode::Train => BnMode::Train,
            Mode::Eval => BnMode::Eval,
        };
        let out = fwd.graph.batch_norm(h, g, b, stats, mode)?;
        if let (Some(rm), Some(rv)) = (out.running_mean, out.running_var) {
            fwd.effects.buffer_updates.push((self.running_mean, rm));
            fwd.effects.buffer_updates.push((self.running_var, rv));
        }
        Ok(out.out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub conv1: Conv,
    pub bn1: BatchNorm,
    pub conv2: Conv,
    pub bn2: BatchNorm,
    pub shortcut: Option<(Conv, BatchNorm)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// How a model's convolutions are realized.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelKind {
    Plain,
    Zoo { sources: usize, align: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: BackboneConfig,
    pub store: ParamStore<T>,
    pub kind: ModelKind,
    pub stem: Conv,
    pub stem_bn: BatchNorm,
    pub blocks: Vec<Block>,
    pub head: Head,
}

/// One convolution position of the architecture, independent of how it is realized.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSite {
    pub name: String,
    pub c_out: usize,
    pub c_in: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct BlockSite {
    prefix: String,
    conv1: ConvSite,
    conv2: ConvSite,
    shortcut: Option<ConvSite>,
}

fn site(name: String, c_out: usize, c_in: usize, kernel: usize, stride: usize) -> ConvSite {
    ConvSite { name, c_out, c_in, kernel, stride, padding: kernel / 2 }
}

fn layout(cfg: &BackboneConfig) -> (ConvSite, Vec<BlockSite>) {
    let stem = site("stem.conv".into(), cfg.stem_channels, cfg.in_channels, 3, 1);
    let mut blocks = Vec::new();
    let mut c_in = cfg.stem_channels;
    for (si, st) in cfg.stages.iter().enumerate() {
        for bi in 0..st.blocks {
            let stride = if si > 0 && bi == 0 { 2 } else { 1 };
            let prefix = format!("s{si}.b{bi}");
            let shortcut = (stride != 1 || c_in != st.channels)
                .then(|| site(format!("{prefix}.shortcut.conv"), st.channels, c_in, 1, stride));
            blocks.push(BlockSite {
                conv1: site(format!("{prefix}.conv1"), st.channels, c_in, 3, stride),
                conv2: site(format!("{prefix}.conv2"), st.channels, st.channels, 3, 1),
                shortcut,
                prefix,
            });
            c_in = st.channels;
        }
    }
    (stem, blocks)
}

fn bn_name(conv_name: &str) -> String {
    match conv_name.strip_suffix(".conv") {
        Some(p) => format!("{p}.bn"),
        None => conv_name.replace(".conv", ".bn"),
    }
}

fn kaiming<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let normal = Normal::new(0.0, libm::sqrt(2.0 / fan_in as f64)).expect("positive std");
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| T::of(normal.sample(rng))).collect())
}

fn init_head<T: Real>(store: &mut ParamStore<T>, features: usize, classes: usize, seed: u64) -> Result<Head> {
    let mut rng = stream(seed, Stream::Head);
    let bound = 1.0 / libm::sqrt(features as f64);
    let w = (0..classes * features).map(|_| T::of(rng.random_range(-bound..bound))).collect();
    Ok(Head {
        weight: store.add("head.weight", Tensor::from_parts(vec![classes, features], w), true)?,
        bias: store.add("head.bias", Tensor::zeros(&[classes]), true)?,
    })
}

/// Per-convolution construction callback used by both builders.
trait ConvFactory<T> {
    fn conv(&mut self, store: &mut ParamStore<T>, site: &ConvSite, slot: usize) -> Result<Conv>;
    fn bn(&mut self, store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<BatchNorm>;
}

fn assemble<T: Real, F: ConvFactory<T>>(
    cfg: &BackboneConfig,
    kind: ModelKind,
    factory: &mut F,
    seed: u64,
) -> Result<Model<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let (stem_site, block_sites) = layout(cfg);
    let mut slot = 0;
    let mut next = || {
        slot += 1;
        slot - 1
    };
    let stem = factory.conv(&mut store, &stem_site, next())?;
    let stem_bn = factory.bn(&mut store, "stem.bn", cfg.stem_channels)?;
    let mut blocks = Vec::new();
    for b in &block_sites {
        let conv1 = factory.conv(&mut store, &b.conv1, next())?;
        let bn1 = factory.bn(&mut store, &format!("{}.bn1", b.prefix), b.conv1.c_out)?;
        let conv2 = factory.conv(&mut store, &b.conv2, next())?;
        let bn2 = factory.bn(&mut store, &format!("{}.bn2", b.prefix), b.conv2.c_out)?;
        let shortcut = match &b.shortcut {
            Some(s) => {
                let c = factory.conv(&mut store, s, next())?;
                let bn = factory.bn(&mut store, &bn_name(&s.name), s.c_out)?;
                Some((c, bn))
            }
            None => None,
        };
        blocks.push(Block { conv1, bn1, conv2, bn2, shortcut });
    }
    let features = cfg.stages.last().map_or(cfg.stem_channels, |s| s.channels);
    let head = init_head(&mut store, features, cfg.classes, seed)?;
    Ok(Model { config: cfg.clone(), store, kind, stem, stem_bn, blocks, head })
}

struct PlainFactory<R> {
    rng: R,
}

impl<T: Real, R: Rng> ConvFactory<T> for PlainFactory<R> {
    fn conv(&mut self, store: &mut ParamStore<T>, s: &ConvSite, slot: usize) -> Result<Conv> {
        let w = kaiming(&[s.c_out, s.c_in, s.kernel, s.kernel], s.c_in * s.kernel * s.kernel, &mut self.rng);
        let weight = store.add(format!("{}.weight", s.name), w, true)?;
        Ok(Conv {
            slot,
            layer: ConvLayer::Plain(PlainConv {
                name: s.name.clone(),
                weight,
                bias: None,
                stride: s.stride,
                padding: s.padding,
                c_out: s.c_out,
                c_in: s.c_in,
                kernel: s.kernel,
            }),
        })
    }

    fn bn(&mut self, store: &mut ParamStore<T>, name: &str, c: usize) -> Result<BatchNorm> {
        BatchNorm::add(store, name, BatchNorm::fresh(c))
    }
}

/// Seeded plain backbone: 3×3 stem + BN + relu, residual basic blocks with
/// identity or 1×1 projection shortcuts, global average pool, affine head.
pub fn build_plain_backbone<T: Real>(cfg: &BackboneConfig, seed: u64) -> Result<Model<T>> {
    assemble(cfg, ModelKind::Plain, &mut PlainFactory { rng: stream(seed, Stream::Backbone) }, seed)
}

/// Options for [`convert_to_zoo`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ZooOptions {
    /// Channel alignment on spatial convolutions (1×1 convolutions follow
    /// `BackboneConfig::align_pointwise` in addition).
    pub align: bool,
}

impl Default for ZooOptions {
    fn default() -> Self {
        Self { align: true }
    }
}

struct ZooFactory<'a, R> {
    zoo: &'a [Checkpoint],
    align: bool,
    align_pointwise: bool,
    rng: R,
    next_index: usize,
    /// Skeletons get zero kernels and are filled by name afterwards.
    skeleton: Option<usize>,
}

impl<'a, T: Real, R: Rng> ConvFactory<T> for ZooFactory<'a, R> {
    fn conv(&mut self, store: &mut ParamStore<T>, s: &ConvSite, slot: usize) -> Result<Conv> {
        let shape = [s.c_out, s.c_in, s.kernel, s.kernel];
        let weights = match self.skeleton {
            Some(m) => vec![Tensor::zeros(&shape); m],
            None => self
                .zoo
                .iter()
                .map(|c| c.get(&format!("{}.weight", s.name)).expect("validated").to::<T>())
                .collect(),
        };
        let align = self.align && (s.kernel > 1 || self.align_pointwise);
        let layer = AdaAggLayer::new(
            store,
            &s.name,
            self.next_index,
            SourceWeights::new(weights, None)?,
            LayerSpec { stride: s.stride, padding: s.padding, align },
            &mut self.rng,
        )?;
        self.next_index += 1;
        Ok(Conv { slot, layer: ConvLayer::Zoo(layer) })
    }

    fn bn(&mut self, store: &mut ParamStore<T>, name: &str, c: usize) -> Result<BatchNorm> {
        if self.skeleton.is_some() {
            return BatchNorm::add(store, name, BatchNorm::fresh(c));
        }
        let field = |ck: &Checkpoint, f: &str| ck.get(&format!("{name}.{f}")).expect("validated").to::<T>();
        let states: Vec<BnState<T>> = self
            .zoo
            .iter()
            .map(|ck| BnState {
                gamma: field(ck, "gamma"),
                beta: field(ck, "beta"),
                running_mean: field(ck, "running_mean"),
                running_var: field(ck, "running_var"),
            })
            .collect();
        BatchNorm::add(store, name, zoo::bn_init_average(&states)?)
    }
}

fn is_head(name: &str) -> bool {
    name.starts_with("head.")
}

/// Body parameter names and shapes of the plain architecture.
pub fn body_signature(cfg: &BackboneConfig) -> Result<Vec<(String, Vec<usize>)>> {
    let reference = build_plain_backbone::<f32>(cfg, 0)?;
    Ok(reference
        .store
        .iter()
        .filter(|(_, p)| !is_head(&p.name))
        .map(|(_, p)| (p.name.clone(), p.tensor.shape().to_vec()))
        .collect())
}

/// Fast path: every checkpoint that records a body digest matches `cfg`.
pub fn zoo_compatible_by_digest(cfg: &BackboneConfig, zoo: &[Checkpoint]) -> Option<bool> {
    let want = cfg.digest();
    let mut all_known = true;
    for ck in zoo {
        match ck.meta("backbone_digest") {
            Some(d) if d != want => return Some(false),
            Some(_) => {}
            None => all_known = false,
        }
    }
    all_known.then_some(true)
}

/// Checks every checkpoint holds exactly the body parameters of `cfg`.
pub fn check_zoo(cfg: &BackboneConfig, zoo: &[Checkpoint]) -> Result<()> {
    if zoo.is_empty() {
        return Err(Error::ZooIncompatible { param: String::new(), reason: "empty zoo".into() });
    }
    let sig = body_signature(cfg)?;
    for (i, ck) in zoo.iter().enumerate() {
        for (name, shape) in &sig {
            match ck.get(name) {
                None => {
                    return Err(Error::ZooIncompatible { param: name.clone(), reason: format!("missing from source {i}") })
                }
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::ZooIncompatible {
                        param: name.clone(),
                        reason: format!("source {i} has shape {:?}, expected {:?}", t.shape(), shape),
                    })
                }
                Some(_) => {}
            }
        }
        if let Some((extra, _)) = ck.tensors.iter().find(|(n, _)| !is_head(n) && !sig.iter().any(|(s, _)| s == n)) {
            return Err(Error::ZooIncompatible { param: extra.clone(), reason: format!("unexpected in source {i}") });
        }
    }
    Ok(())
}

/// Replaces every convolution with an aggregation layer over the zoo's
/// kernels: identity alignment, gates at `1/m`, batch norms averaged
/// across sources, fresh head.
pub fn convert_to_zoo<T: Real>(
    cfg: &BackboneConfig,
    zoo: &[Checkpoint],
    opts: ZooOptions,
    seed: u64,
) -> Result<Model<T>> {
    cfg.validate()?;
    check_zoo(cfg, zoo)?;
    let mut f = ZooFactory {
        zoo,
        align: opts.align,
        align_pointwise: cfg.align_pointwise,
        rng: stream(seed, Stream::Gates),
        next_index: 0,
        skeleton: None,
    };
    assemble(cfg, ModelKind::Zoo { sources: zoo.len(), align: opts.align }, &mut f, seed)
}

impl<T: Real> Model<T> {
    pub fn convs(&self) -> Vec<&Conv> {
        let mut out = vec![&self.stem];
        for b in &self.blocks {
            out.push(&b.conv1);
            out.push(&b.conv2);
            if let Some((c, _)) = &b.shortcut {
                out.push(c);
            }
        }
        out
    }

    fn convs_mut(&mut self) -> Vec<&mut Conv> {
        let mut out = vec![&mut self.stem];
        for b in &mut self.blocks {
            out.push(&mut b.conv1);
            out.push(&mut b.conv2);
            if let Some((c, _)) = &mut b.shortcut {
                out.push(c);
            }
        }
        out
    }

    /// (conv, the batch norm that follows it), in forward order.
    pub fn conv_bn_pairs(&self) -> Vec<(&Conv, &BatchNorm)> {
        let mut out = vec![(&self.stem, &self.stem_bn)];
        for b in &self.blocks {
            out.push((&b.conv1, &b.bn1));
            out.push((&b.conv2, &b.bn2));
            if let Some((c, bn)) = &b.shortcut {
                out.push((c, bn));
            }
        }
        out
    }

    /// Tally row of the head (after every convolution).
    pub fn head_slot(&self) -> usize {
        self.convs().len()
    }

    pub fn zoo_layers(&self) -> Vec<&AdaAggLayer> {
        self.convs()
            .into_iter()
            .filter_map(|c| match &c.layer {
                ConvLayer::Zoo(z) => Some(z),
                ConvLayer::Plain(_) => None,
            })
            .collect()
    }

    pub fn num_sources(&self) -> Option<usize> {
        match self.kind {
            ModelKind::Zoo { sources, .. } => Some(sources),
            ModelKind::Plain => None,
        }
    }

    pub fn set_gate_mode(&mut self, mode: GateMode) {
        for c in self.convs_mut() {
            if let ConvLayer::Zoo(z) = &mut c.layer {
                z.gate_mode = mode.clone();
            }
        }
    }

    /// Marks every gating-network parameter trainable or frozen.
    pub fn set_gates_trainable(&mut self, trainable: bool) {
        let ids: Vec<ParamId> = self
            .zoo_layers()
            .iter()
            .flat_map(|z| z.gates.iter().flat_map(|g| g.param_ids()))
            .collect();
        for id in ids {
            self.store.set_trainable(id, trainable);
        }
    }

    pub fn head_features(&self) -> usize {
        self.store.get(self.head.weight).shape()[1]
    }

    /// Records the forward computation on `fwd` and returns the logits node.
    pub fn forward(&self, fwd: &mut Forward<'_, T>, x: NodeId) -> Result<NodeId> {
        let xs = fwd.graph.shape(x);
        let want = [self.config.in_channels, self.config.side, self.config.side];
        if xs.len() != 4 || xs[1..] != want {
            return Err(Error::Dimension { op: "model_forward", lhs: xs.to_vec(), rhs: want.to_vec() });
        }
        let h = self.stem.forward(fwd, x)?;
        let h = self.stem_bn.forward(fwd, h)?;
        let mut h = fwd.graph.relu(h);
        for b in &self.blocks {
            let o = b.conv1.forward(fwd, h)?;
            let o = b.bn1.forward(fwd, o)?;
            let o = fwd.graph.relu(o);
            let o = b.conv2.forward(fwd, o)?;
            let o = b.bn2.forward(fwd, o)?;
            let sc = match &b.shortcut {
                Some((c, bn)) => {
                    let s = c.forward(fwd, h)?;
                    bn.forward(fwd, s)?
                }
                None => h,
            };
            let sum = fwd.graph.add(o, sc)?;
            h = fwd.graph.relu(sum);
        }
        let (w, bias) = (fwd.param(self.head.weight), fwd.param(self.head.bias));
        fwd.graph.set_scope(self.head_slot(), MacKind::Base);
        let pooled = fwd.graph.global_avg_pool(h)?;
        let pooled = fwd.graph.flatten(pooled)?;
        let logits = fwd.graph.affine(pooled, w, bias)?;
        fwd.graph.clear_scope();
        Ok(logits)
    }

    /// Logits for `x` without touching the model. With `te`, every zoo
    /// layer uses its temporal-ensemble gates.
    pub fn logits(&self, x: &Tensor<T>, mode: Mode, te: Option<&TeState>) -> Result<Tensor<T>> {
        let mut fwd = Forward::new(&self.store, mode);
        fwd.frozen = te;
        fwd.precomputed_alignment = mode == Mode::Eval;
        let xn = fwd.graph.input(x.clone());
        let out = self.forward(&mut fwd, xn)?;
        Ok(fwd.graph.value(out).clone())
    }

    pub fn apply_buffer_updates(&mut self, updates: Vec<(ParamId, Tensor<T>)>) {
        for (id, t) in updates {
            *self.store.get_mut(id) = t;
        }
    }

    /// Pre-aggregates every zoo layer with its temporal-ensemble gates,
    /// yielding a plain model with identical frozen-gate outputs.
    pub fn collapse(&self, te: &TeState) -> Result<Model<T>> {
        if self.num_sources().is_none() {
            return Err(Error::State("only zoo models can be collapsed".into()));
        }
        let mut plain = build_plain_backbone::<T>(&self.config, 0)?;
        let mut targets = Vec::new();
        for (pc, sc) in plain.convs().iter().zip(self.convs()) {
            let ConvLayer::Plain(p) = &pc.layer else { unreachable!() };
            match &sc.layer {
                ConvLayer::Zoo(z) => {
                    let (w, b) = zoo::te_collapse(z, &self.store, te)?;
                    if b.is_some() {
                        return Err(Error::State("collapsed biases are not supported by the backbone".into()));
                    }
                    targets.push((p.weight, w));
                }
                ConvLayer::Plain(q) => targets.push((p.weight, self.store.get(q.weight).clone())),
            }
        }
        for (id, w) in targets {
            *plain.store.get_mut(id) = w;
        }
        let bn_ids: Vec<(ParamId, ParamId)> = plain
            .conv_bn_pairs()
            .iter()
            .zip(self.conv_bn_pairs())
            .flat_map(|((_, pb), (_, sb))| {
                [
                    (pb.gamma, sb.gamma),
                    (pb.beta, sb.beta),
                    (pb.running_mean, sb.running_mean),
                    (pb.running_var, sb.running_var),
                ]
            })
            .collect();
        for (dst, src) in bn_ids {
            *plain.store.get_mut(dst) = self.store.get(src).clone();
        }
        *plain.store.get_mut(plain.head.weight) = self.store.get(self.head.weight).clone();
        *plain.store.get_mut(plain.head.bias) = self.store.get(self.head.bias).clone();
        Ok(plain)
    }

    /// Checkpoint of every parameter; the head is left out unless asked for.
    pub fn to_checkpoint(&self, include_head: bool) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set_meta("config", self.config.encode());
        ck.set_meta("backbone_digest", self.config.digest());
        match &self.kind {
            ModelKind::Plain => ck.set_meta("kind", "plain"),
            ModelKind::Zoo { sources, align } => {
                ck.set_meta("kind", "zoo");
                ck.set_meta("sources", sources);
                ck.set_meta("align", align);
                if let Some(z) = self.zoo_layers().first() {
                    ck.set_meta("gate_mode", z.gate_mode.name());
                }
            }
        }
        for (_, p) in self.store.iter() {
            if include_head || !is_head(&p.name) {
                ck.tensors.push((p.name.clone(), AnyTensor::from_tensor(&p.tensor)));
            }
        }
        ck
    }

    /// Overwrites parameters from `ck` by name. Every tensor in `ck` must
    /// exist with the same shape; with `require_all` every model parameter
    /// must be present too.
    pub fn load_tensors(&mut self, ck: &Checkpoint, require_all: bool) -> Result<()> {
        for (name, t) in &ck.tensors {
            let id = self.store.find(name).ok_or_else(|| Error::ZooIncompatible {
                param: name.clone(),
                reason: "not a parameter of this model".into(),
            })?;
            if self.store.get(id).shape() != t.shape() {
                return Err(Error::ZooIncompatible {
                    param: name.clone(),
                    reason: format!("shape {:?}, expected {:?}", t.shape(), self.store.get(id).shape()),
                });
            }
            *self.store.get_mut(id) = t.to::<T>();
        }
        if require_all {
            if let Some((_, p)) = self.store.iter().find(|(_, p)| ck.get(&p.name).is_none()) {
                return Err(Error::ZooIncompatible { param: p.name.clone(), reason: "missing from checkpoint".into() });
            }
        }
        Ok(())
    }

    /// Rebuilds a model (plain or zoo) from a checkpoint written by
    /// [`Model::to_checkpoint`] with the head included.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Model<T>> {
        let cfg = BackboneConfig::decode(ck.meta("config").ok_or_else(|| Error::Config("checkpoint lacks `config`".into()))?)?;
        let mut model = match ck.meta("kind").unwrap_or("plain") {
            "plain" => build_plain_backbone::<T>(&cfg, 0)?,
            "zoo" => {
                let m: usize = ck
                    .meta("sources")
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Config("zoo checkpoint lacks `sources`".into()))?;
                let align = ck.meta("align") == Some("true");
                let mut f = ZooFactory {
                    zoo: &[],
                    align,
                    align_pointwise: cfg.align_pointwise,
                    rng: stream(0, Stream::Gates),
                    next_index: 0,
                    skeleton: Some(m),
                };
                let mut model = assemble(&cfg, ModelKind::Zoo { sources: m, align }, &mut f, 0)?;
                let mode = match ck.meta("gate_mode").unwrap_or("per_sample") {
                    "per_sample" => GateMode::PerSample,
                    "batch_average" => GateMode::BatchAverage,
                    "uniform" => GateMode::Uniform,
                    other => return Err(Error::Config(format!("unsupported stored gate mode `{other}`"))),
                };
                model.set_gate_mode(mode);
                model
            }
            other => return Err(Error::Config(format!("unknown model kind `{other}`"))),
        };
        model.load_tensors(ck, true)?;
        Ok(model)
    }

    /// Number of convolution kernels per layer actually held (m for zoo models).
    pub fn kernel_copies(&self) -> usize {
        self.num_sources().unwrap_or(1)
    }

    pub fn describe(&self) -> String {
        match &self.kind {
            ModelKind::Plain => "plain".to_string(),
            ModelKind::Zoo { sources, align } => format!("zoo(m={sources}, align={align})"),
        }
    }
}
