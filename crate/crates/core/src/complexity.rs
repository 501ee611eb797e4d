//! Static parameter and FLOP counting.
//!
//! FLOPs are counted as multiply-accumulates (one MAC is one FLOP) and bias
//! adds are not counted, so a convolution costs exactly
//! `C_in * C_out * K^2 * H_out * W_out`. Element-wise costs per output element:
//!
//! | layer          | params                     | flops per element            |
//! |----------------|----------------------------|------------------------------|
//! | bn             | `2c`                       | 2                            |
//! | relu           | 0                          | 1                            |
//! | nam_channel    | `2c`                       | 8 (BN 2, two multiplies, sigmoid 4) |
//! | nam_spatial    | `2hw`                      | 8                            |
//! | residual add   | 0                          | 1                            |
//!
//! A FasterNet block is the sum of its PConv, bias-free expanding PWConv, BN,
//! ReLU, biased projecting PWConv and residual add. `gap_head` costs one add
//! per input element, one scaling per channel and `c * classes` MACs.
//!
//! These counts equal what [`crate::ops::FlopCounter`] observes when the
//! corresponding layer executes.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::blocks::{FasterNetSpec, PConvSpec};
use crate::error::{Error, Result};
use crate::graph::{FeatureShape, GraphSpec, LayerSpec};
use crate::nam::SIGMOID_FLOPS;
use crate::ops::ConvSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Pwconv,
    Pconv,
    Bn,
    Relu,
    NamChannel,
    NamSpatial,
    FasternetBlock,
    ResidualBegin,
    ResidualAdd,
    GapHead,
}

impl LayerKind {
    pub fn of(layer: &LayerSpec) -> Self {
        match layer {
            LayerSpec::Conv(_) => LayerKind::Conv,
            LayerSpec::PConv(_) => LayerKind::Pconv,
            LayerSpec::PwConv { .. } => LayerKind::Pwconv,
            LayerSpec::Bn { .. } => LayerKind::Bn,
            LayerSpec::Relu => LayerKind::Relu,
            LayerSpec::FasterNet(_) => LayerKind::FasternetBlock,
            LayerSpec::NamChannel { .. } => LayerKind::NamChannel,
            LayerSpec::NamSpatial { .. } => LayerKind::NamSpatial,
            LayerSpec::ResidualBegin => LayerKind::ResidualBegin,
            LayerSpec::ResidualEnd => LayerKind::ResidualAdd,
            LayerSpec::GapHead { .. } => LayerKind::GapHead,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Pwconv => "pwconv",
            LayerKind::Pconv => "pconv",
            LayerKind::Bn => "bn",
            LayerKind::Relu => "relu",
            LayerKind::NamChannel => "nam_channel",
            LayerKind::NamSpatial => "nam_spatial",
            LayerKind::FasternetBlock => "fasternet_block",
            LayerKind::ResidualBegin => "residual_begin",
            LayerKind::ResidualAdd => "residual_add",
            LayerKind::GapHead => "gap_head",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer_id: String,
    pub layer_kind: LayerKind,
    pub params: u64,
    pub flops: u64,
    pub out_shape: FeatureShape,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub name: String,
    pub input_shape: FeatureShape,
    pub rows: Vec<LayerCost>,
    pub total_params: u64,
    pub total_flops: u64,
}

impl ComplexityReport {
    pub fn params_millions(&self) -> f64 {
        self.total_params as f64 / 1e6
    }

    pub fn gflops(&self) -> f64 {
        self.total_flops as f64 / 1e9
    }
}

/// Percentage change between two reports; positive means `new` is smaller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffReport {
    pub base_params: u64,
    pub new_params: u64,
    pub base_flops: u64,
    pub new_flops: u64,
    pub param_delta_pct: f64,
    pub flops_delta_pct: f64,
}

pub fn conv_flops(spec: &ConvSpec, out_h: usize, out_w: usize) -> u64 {
    (spec.c_in * spec.c_out * spec.k * spec.k * out_h * out_w) as u64
}

pub fn conv_params(spec: &ConvSpec) -> u64 {
    (spec.c_out * spec.c_in * spec.k * spec.k + spec.c_out) as u64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PConvCost {
    pub flops: u64,
    /// `(c_p / c)^2`: PConv FLOPs over those of a full convolution.
    pub reduction_factor: f64,
}

/// Only the `c_p` convolved channels cost anything; pass-through is free.
pub fn pconv_cost(spec: &PConvSpec, out_h: usize, out_w: usize) -> PConvCost {
    let p = spec.partial_ratio();
    PConvCost {
        flops: (spec.c_p * spec.c_p * spec.k * spec.k * out_h * out_w) as u64,
        reduction_factor: p * p,
    }
}

pub fn pconv_params(spec: &PConvSpec) -> u64 {
    (spec.c_p * spec.c_p * spec.k * spec.k) as u64
}

/// Per-element cost of a NAM gate: BN, weight multiply, sigmoid, input multiply.
pub const NAM_FLOPS_PER_ELEMENT: u64 = 2 + 1 + SIGMOID_FLOPS + 1;

fn fasternet_cost(spec: &FasterNetSpec, x: FeatureShape) -> (u64, u64) {
    let (c, e) = (spec.channels() as u64, spec.hidden() as u64);
    let hw = x.plane() as u64;
    let params = pconv_params(&spec.pconv) + c * e + 2 * e + e * c + c;
    let flops = pconv_cost(&spec.pconv, x.h, x.w).flops
        + c * e * hw
        + 2 * e * hw
        + e * hw
        + e * c * hw
        + c * hw;
    (params, flops)
}

/// `(params, flops)` of one layer applied to input `x` producing `out`.
pub fn layer_cost(layer: &LayerSpec, x: FeatureShape, out: FeatureShape) -> (u64, u64) {
    let elems = x.elements() as u64;
    match *layer {
        LayerSpec::Conv(spec) => (conv_params(&spec), conv_flops(&spec, out.h, out.w)),
        LayerSpec::PConv(spec) => (pconv_params(&spec), pconv_cost(&spec, x.h, x.w).flops),
        LayerSpec::PwConv { c_in, c_out } => (
            (c_in * c_out + c_out) as u64,
            (c_in * c_out * x.plane()) as u64,
        ),
        LayerSpec::Bn { c } => (2 * c as u64, 2 * elems),
        LayerSpec::Relu => (0, elems),
        LayerSpec::FasterNet(spec) => fasternet_cost(&spec, x),
        LayerSpec::NamChannel { c } => (2 * c as u64, NAM_FLOPS_PER_ELEMENT * elems),
        LayerSpec::NamSpatial { h, w, .. } => (2 * (h * w) as u64, NAM_FLOPS_PER_ELEMENT * elems),
        LayerSpec::ResidualBegin => (0, 0),
        LayerSpec::ResidualEnd => (0, elems),
        LayerSpec::GapHead { classes } => {
            let c = x.c as u64;
            let k = classes as u64;
            (c * k + k, elems + c + c * k)
        }
    }
}

/// Walks `graph` from `input_shape`, costing every layer.
pub fn analyze_graph(graph: &GraphSpec, input_shape: FeatureShape) -> Result<ComplexityReport> {
    let shapes = graph.propagate(input_shape)?;
    let mut rows = Vec::with_capacity(graph.layers.len());
    let mut x = input_shape;
    for (i, (layer, &out)) in graph.layers.iter().zip(&shapes).enumerate() {
        let (params, flops) = layer_cost(layer, x, out);
        let kind = LayerKind::of(layer);
        rows.push(LayerCost {
            layer_id: format!("{:03}:{kind}", i + 1),
            layer_kind: kind,
            params,
            flops,
            out_shape: out,
        });
        x = out;
    }
    Ok(ComplexityReport {
        name: graph.name.clone(),
        input_shape,
        total_params: rows.iter().map(|r| r.params).sum(),
        total_flops: rows.iter().map(|r| r.flops).sum(),
        rows,
    })
}

fn reduction_pct(base: u64, new: u64) -> f64 {
    (base as f64 - new as f64) / base as f64 * 100.0
}

pub fn compare_reports(base: &ComplexityReport, new: &ComplexityReport) -> Result<DiffReport> {
    if base.total_params == 0 || base.total_flops == 0 {
        return Err(Error::degenerate(format!(
            "baseline `{}` has zero total params or flops; percentages are undefined",
            base.name
        )));
    }
    Ok(DiffReport {
        base_params: base.total_params,
        new_params: new.total_params,
        base_flops: base.total_flops,
        new_flops: new.total_flops,
        param_delta_pct: reduction_pct(base.total_params, new.total_params),
        flops_delta_pct: reduction_pct(base.total_flops, new.total_flops),
    })
}

/// Thousands-separated integer.
pub fn group_digits(v: u64) -> String {
    let s = v.to_string();
    let mut out = String::with_capacity(s.len() + s.len() / 3);
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

impl fmt::Display for ComplexityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "model {} (input {})", self.name, self.input_shape)?;
        writeln!(f, "{:<22} {:>14} {:>18}  out", "layer", "params", "flops")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<22} {:>14} {:>18}  {}",
                r.layer_id,
                group_digits(r.params),
                group_digits(r.flops),
                r.out_shape
            )?;
        }
        writeln!(
            f,
            "total_params {} ({:.3}M)",
            group_digits(self.total_params),
            self.params_millions()
        )?;
        write!(
            f,
            "total_flops {} ({:.3} GFLOPs, multiply-accumulates)",
            group_digits(self.total_flops),
            self.gflops()
        )
    }
}

fn direction(pct: f64) -> &'static str {
    if pct >= 0.0 {
        "reduction"
    } else {
        "increase"
    }
}

impl fmt::Display for DiffReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "params: {:.3}M -> {:.3}M  {} {:.2}%",
            self.base_params as f64 / 1e6,
            self.new_params as f64 / 1e6,
            direction(self.param_delta_pct),
            self.param_delta_pct.abs()
        )?;
        write!(
            f,
            "GFLOPs: {:.3} -> {:.3}  {} {:.2}%",
            self.base_flops as f64 / 1e9,
            self.new_flops as f64 / 1e9,
            direction(self.flops_delta_pct),
            self.flops_delta_pct.abs()
        )
    }
}
