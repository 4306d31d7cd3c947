//! Analytic multiply-accumulate and parameter accounting.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::backbone::{ConvLayer, Model};
use crate::error::{Error, Result};
use crate::graph::{MacBreakdown, MacTally};
use crate::ops::conv_out_len;
use crate::params::{Forward, Mode};
use crate::tensor::{Real, Tensor};
use crate::zoo::{gate_hidden, TeState};

/// Dimensions of one convolution; `h`, `w` are its input spatial sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerDims {
    pub c_out: usize,
    pub c_in: usize,
    pub k: usize,
    pub h: usize,
    pub w: usize,
    pub stride: usize,
    pub padding: usize,
    pub m: usize,
}

impl LayerDims {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            conv_out_len(self.h, self.k, self.stride, self.padding).unwrap_or(0),
            conv_out_len(self.w, self.k, self.stride, self.padding).unwrap_or(0),
        )
    }

    pub fn weight_len(&self) -> u64 {
        (self.c_out * self.c_in * self.k * self.k) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    Train,
    Inference,
}

/// `H'·W'·K²·C_out·C_in` for one sample.
pub fn conv_base_macs(d: &LayerDims) -> u64 {
    let (ho, wo) = d.out_hw();
    (ho * wo) as u64 * d.weight_len()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Overhead {
    pub align: u64,
    pub gating: u64,
    pub aggregation: u64,
}

impl Overhead {
    pub fn total(&self) -> u64 {
        self.align + self.gating + self.aggregation
    }
}

/// Extra MACs of an aggregation layer over a plain convolution, per sample:
/// alignment `m·K²·C_out²·C_in` (training only: at inference the aligned
/// kernels are precomputed), gating `H·W·C_in + m·(C_in·hidden + hidden)`
/// and aggregation `m·K²·C_out·C_in`.
pub fn adaagg_overhead_macs(d: &LayerDims, phase: Phase, gate_hidden: usize) -> Overhead {
    let m = d.m as u64;
    let align = match phase {
        Phase::Train => m * d.weight_len() * d.c_out as u64,
        Phase::Inference => 0,
    };
    let hid = gate_hidden as u64;
    Overhead {
        align,
        gating: (d.h * d.w * d.c_in) as u64 + m * (d.c_in as u64 * hid + hid),
        aggregation: m * d.weight_len(),
    }
}

/// The order-of-magnitude gating cost `H·W·C_in + m·C_in²`.
pub fn gating_envelope_macs(d: &LayerDims) -> u64 {
    (d.h * d.w * d.c_in + d.m * d.c_in * d.c_in) as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamPhase {
    Train,
    InferenceFull,
    InferenceLite,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParamCounts {
    pub sources: u64,
    pub align: u64,
    pub gates: u64,
    pub bn: u64,
    pub head: u64,
}

impl ParamCounts {
    pub fn total(&self) -> u64 {
        self.sources + self.align + self.gates + self.bn + self.head
    }

    fn accumulate(&mut self, o: &ParamCounts) {
        self.sources += o.sources;
        self.align += o.align;
        self.gates += o.gates;
        self.bn += o.bn;
        self.head += o.head;
    }
}

/// Parameters of one gating network: reduce and expand affines with biases.
pub fn gate_params(c_in: usize) -> u64 {
    let h = gate_hidden(c_in) as u64;
    h * c_in as u64 + h + h + 1
}

/// Per-layer facts the accounting needs, read off a model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvInfo {
    pub name: String,
    pub slot: usize,
    pub dims: LayerDims,
    pub zoo: bool,
    pub aligned: bool,
    pub gated: bool,
    pub bn_channels: usize,
}

/// Walks the model's convolutions with their input sizes for a `side`×`side` input.
pub fn conv_infos<T: Real>(model: &Model<T>, side: usize) -> Result<Vec<ConvInfo>> {
    let mut out = Vec::new();
    let mut push = |conv: &crate::backbone::Conv, bn: usize, h: usize| -> Result<usize> {
        let (c_out, c_in, k, stride, padding) = conv.dims();
        let (m, zoo, aligned, gated) = match &conv.layer {
            ConvLayer::Plain(_) => (1, false, false, false),
            ConvLayer::Zoo(z) => (z.num_sources(), true, z.align_enabled(), z.gate_mode.uses_gating_nets()),
        };
        let dims = LayerDims { c_out, c_in, k, h, w: h, stride, padding, m };
        let (ho, _) = dims.out_hw();
        if ho == 0 {
            return Err(Error::Config(format!("input side {side} too small at `{}`", conv.name())));
        }
        out.push(ConvInfo { name: conv.name().into(), slot: conv.slot, dims, zoo, aligned, gated, bn_channels: bn });
        Ok(ho)
    };
    let mut h = push(&model.stem, model.stem_bn.channels, side)?;
    for b in &model.blocks {
        let mid = push(&b.conv1, b.bn1.channels, h)?;
        let next = push(&b.conv2, b.bn2.channels, mid)?;
        if let Some((c, bn)) = &b.shortcut {
            push(c, bn.channels, h)?;
        }
        h = next;
    }
    Ok(out)
}

fn layer_params(info: &ConvInfo, phase: ParamPhase) -> ParamCounts {
    let d = &info.dims;
    let w = d.weight_len();
    let mut p = ParamCounts { bn: 2 * info.bn_channels as u64, ..ParamCounts::default() };
    if !info.zoo || phase == ParamPhase::InferenceLite {
        p.sources = w;
        return p;
    }
    let m = d.m as u64;
    p.sources = m * w;
    if phase == ParamPhase::Train && info.aligned {
        p.align = m * (d.c_out * d.c_out) as u64;
    }
    p.gates = m * gate_params(d.c_in);
    p
}

fn head_dims<T: Real>(model: &Model<T>) -> (usize, usize) {
    let shape = model.store.get(model.head.weight).shape();
    (shape[0], shape[1])
}

/// Grouped parameter counts. Training counts every learnable tensor (batch
/// norm contributes its scale and shift); full inference folds alignments
/// into the source kernels; lite inference keeps one kernel per layer.
pub fn count_params<T: Real>(model: &Model<T>, phase: ParamPhase) -> ParamCounts {
    let infos = conv_infos(model, model.config.side).expect("model config was validated");
    let mut total = ParamCounts::default();
    for info in &infos {
        total.accumulate(&layer_params(info, phase));
    }
    let (classes, features) = head_dims(model);
    total.head = (classes * features + classes) as u64;
    total
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub layer: String,
    pub phase: &'static str,
    pub macs: MacBreakdown,
    pub params: ParamCounts,
    /// Order-of-magnitude gating cost, for comparison with the exact count.
    pub gating_envelope: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexityReport {
    pub rows: Vec<ReportRow>,
}

pub const PHASE_TRAIN: &str = "train";
pub const PHASE_INFERENCE: &str = "inference";
pub const PHASE_INFERENCE_LITE: &str = "inference_lite";
pub const REPORT_HEADER: &str =
    "layer,phase,base_macs,align_macs,gating_macs,agg_macs,params_sources,params_align,params_gates,params_bn,params_head";

fn layer_macs(info: &ConvInfo, phase: Phase, lite: bool) -> MacBreakdown {
    let d = &info.dims;
    let mut b = MacBreakdown { base: conv_base_macs(d), ..MacBreakdown::default() };
    if info.zoo && !lite {
        let o = adaagg_overhead_macs(d, phase, gate_hidden(d.c_in));
        b.align = if info.aligned { o.align } else { 0 };
        b.gating = if info.gated { o.gating } else { 0 };
        b.aggregation = o.aggregation;
    }
    b
}

impl ComplexityReport {
    /// Rows of one phase, per layer, excluding totals.
    pub fn layers(&self, phase: &str) -> Vec<&ReportRow> {
        self.rows.iter().filter(|r| r.phase == phase && r.layer != "total").collect()
    }

    pub fn total(&self, phase: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.phase == phase && r.layer == "total")
    }

    pub fn phases(&self) -> Vec<&'static str> {
        let mut p: Vec<&'static str> = Vec::new();
        for r in &self.rows {
            if !p.contains(&r.phase) {
                p.push(r.phase);
            }
        }
        p
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.layer,
                r.phase,
                r.macs.base,
                r.macs.align,
                r.macs.gating,
                r.macs.aggregation,
                r.params.sources,
                r.params.align,
                r.params.gates,
                r.params.bn,
                r.params.head
            ));
        }
        s
    }
}

/// Per-layer MACs (one sample of `side`×`side`) and parameters, with a
/// `total` row per phase. Zoo models get a third phase for the collapsed
/// lite model.
pub fn report<T: Real>(model: &Model<T>, side: usize) -> Result<ComplexityReport> {
    let infos = conv_infos(model, side)?;
    let (classes, features) = head_dims(model);
    let last_side = infos
        .iter()
        .rev()
        .find(|i| !i.name.contains("shortcut"))
        .map_or(side, |i| i.dims.out_hw().0);
    let head_macs = MacBreakdown { base: (last_side * last_side * features + classes * features) as u64, ..Default::default() };
    let head_params = ParamCounts { head: (classes * features + classes) as u64, ..Default::default() };
    let mut phases = vec![(PHASE_TRAIN, Phase::Train, ParamPhase::Train), (PHASE_INFERENCE, Phase::Inference, ParamPhase::InferenceFull)];
    if model.num_sources().is_some() {
        phases.push((PHASE_INFERENCE_LITE, Phase::Inference, ParamPhase::InferenceLite));
    }
    let mut rows = Vec::new();
    for (name, phase, pphase) in phases {
        let lite = pphase == ParamPhase::InferenceLite;
        let mut total_macs = MacBreakdown::default();
        let mut total_params = ParamCounts::default();
        for info in &infos {
            let macs = layer_macs(info, phase, lite);
            let params = layer_params(info, pphase);
            total_macs.accumulate(&macs);
            total_params.accumulate(&params);
            let gating_envelope = if info.zoo && info.gated && !lite { gating_envelope_macs(&info.dims) } else { 0 };
            rows.push(ReportRow { layer: info.name.clone(), phase: name, macs, params, gating_envelope });
        }
        total_macs.accumulate(&head_macs);
        total_params.accumulate(&head_params);
        rows.push(ReportRow { layer: "head".into(), phase: name, macs: head_macs, params: head_params, gating_envelope: 0 });
        rows.push(ReportRow { layer: "total".into(), phase: name, macs: total_macs, params: total_params, gating_envelope: 0 });
    }
    Ok(ComplexityReport { rows })
}

/// MACs actually executed by one forward pass of a single zero sample,
/// per tally row (convolutions in order, then the head). Train phase runs
/// the graph in train mode with in-graph alignment; inference runs eval
/// mode with precomputed alignment, optionally with frozen gates.
pub fn measure_macs<T: Real>(model: &Model<T>, phase: Phase, te: Option<&TeState>) -> Result<MacTally> {
    let c = &model.config;
    let x = Tensor::<T>::zeros(&[1, c.in_channels, c.side, c.side]);
    let mode = match phase {
        Phase::Train => Mode::Train,
        Phase::Inference => Mode::Eval,
    };
    let mut fwd = Forward::new(&model.store, mode);
    fwd.frozen = te;
    fwd.precomputed_alignment = phase == Phase::Inference;
    let xn = fwd.graph.input(x);
    model.forward(&mut fwd, xn)?;
    Ok(fwd.graph.tally().clone())
}
