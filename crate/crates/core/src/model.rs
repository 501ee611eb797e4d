//! Executable models built from a [`GraphSpec`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{FeatureShape, GraphSpec, LayerSpec};
use crate::init::seeded_rng;
use crate::layers::{
    BatchNormLayer, Conv2dLayer, FasterNetLayer, GapHeadLayer, Module, NamChannelLayer,
    NamSpatialLayer, PConvLayer, PwConvLayer, ReluLayer,
};
use crate::nam::{NamChannelParams, NamSpatialParams};
use crate::ops::{BNParams, FlopCounter, Meter, NoMeter};
use crate::tensor::{Shape, Tensor4};

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Layer {
    Conv(Conv2dLayer),
    PConv(PConvLayer),
    PwConv(PwConvLayer),
    Bn(BatchNormLayer),
    Relu(ReluLayer),
    FasterNet(FasterNetLayer),
    NamChannel(NamChannelLayer),
    NamSpatial(NamSpatialLayer),
    ResidualBegin,
    ResidualEnd,
    GapHead(GapHeadLayer),
}

impl Layer {
    /// Fresh parameters for `spec` fed by inputs of shape `input`.
    ///
    /// Convolution weights are `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, biases
    /// zero, BN `gamma = 1`, `beta = 0` with running statistics `(0, 1)`.
    pub fn init<R: Rng + ?Sized>(spec: &LayerSpec, input: FeatureShape, rng: &mut R) -> Self {
        match *spec {
            LayerSpec::Conv(s) => Layer::Conv(Conv2dLayer::init(s, rng)),
            LayerSpec::PConv(s) => Layer::PConv(PConvLayer::init(s, rng)),
            LayerSpec::PwConv { c_in, c_out } => {
                Layer::PwConv(PwConvLayer::init(c_in, c_out, true, rng))
            }
            LayerSpec::Bn { c } => Layer::Bn(BatchNormLayer::new(BNParams::identity(c))),
            LayerSpec::Relu => Layer::Relu(ReluLayer::default()),
            LayerSpec::FasterNet(s) => Layer::FasterNet(FasterNetLayer::init(s, rng)),
            LayerSpec::NamChannel { c } => {
                Layer::NamChannel(NamChannelLayer::new(NamChannelParams::new(c)))
            }
            LayerSpec::NamSpatial { h, w, .. } => {
                Layer::NamSpatial(NamSpatialLayer::new(NamSpatialParams::new(h, w)))
            }
            LayerSpec::ResidualBegin => Layer::ResidualBegin,
            LayerSpec::ResidualEnd => Layer::ResidualEnd,
            LayerSpec::GapHead { classes } => {
                Layer::GapHead(GapHeadLayer::init(input.c, classes, rng))
            }
        }
    }

    fn as_module(&mut self) -> Option<ModuleRef<'_>> {
        Some(match self {
            Layer::Conv(l) => ModuleRef::Conv(l),
            Layer::PConv(l) => ModuleRef::PConv(l),
            Layer::PwConv(l) => ModuleRef::PwConv(l),
            Layer::Bn(l) => ModuleRef::Bn(l),
            Layer::Relu(l) => ModuleRef::Relu(l),
            Layer::FasterNet(l) => ModuleRef::FasterNet(l),
            Layer::NamChannel(l) => ModuleRef::NamChannel(l),
            Layer::NamSpatial(l) => ModuleRef::NamSpatial(l),
            Layer::GapHead(l) => ModuleRef::GapHead(l),
            Layer::ResidualBegin | Layer::ResidualEnd => return None,
        })
    }
}

enum ModuleRef<'a> {
    Conv(&'a mut Conv2dLayer),
    PConv(&'a mut PConvLayer),
    PwConv(&'a mut PwConvLayer),
    Bn(&'a mut BatchNormLayer),
    Relu(&'a mut ReluLayer),
    FasterNet(&'a mut FasterNetLayer),
    NamChannel(&'a mut NamChannelLayer),
    NamSpatial(&'a mut NamSpatialLayer),
    GapHead(&'a mut GapHeadLayer),
}

macro_rules! dispatch {
    ($m:expr, $l:ident => $body:expr) => {
        match $m {
            ModuleRef::Conv($l) => $body,
            ModuleRef::PConv($l) => $body,
            ModuleRef::PwConv($l) => $body,
            ModuleRef::Bn($l) => $body,
            ModuleRef::Relu($l) => $body,
            ModuleRef::FasterNet($l) => $body,
            ModuleRef::NamChannel($l) => $body,
            ModuleRef::NamSpatial($l) => $body,
            ModuleRef::GapHead($l) => $body,
        }
    };
}

/// Parameters for one layer from its own seed.
pub fn init_params(spec: &LayerSpec, input: FeatureShape, seed: u64) -> Layer {
    Layer::init(spec, input, &mut seeded_rng(seed))
}

/// Output shape and executed operation count of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerProfile {
    pub out_shape: Shape,
    pub flops: u64,
}

/// A sequential model with optional nested residual spans.
#[derive(Debug, Clone)]
pub struct Model {
    graph: GraphSpec,
    layers: Vec<Layer>,
    skips: Vec<Tensor4>,
    grad_skips: Vec<Tensor4>,
}

/// Instantiates every layer of `graph` from a single seeded stream.
pub fn build_model(graph: &GraphSpec, seed: u64) -> Result<Model> {
    let shapes = graph.propagate(graph.input_shape)?;
    let mut rng = seeded_rng(seed);
    let mut x = graph.input_shape;
    let mut layers = Vec::with_capacity(graph.layers.len());
    for (spec, out) in graph.layers.iter().zip(shapes) {
        layers.push(Layer::init(spec, x, &mut rng));
        x = out;
    }
    Ok(Model {
        graph: graph.clone(),
        layers,
        skips: Vec::new(),
        grad_skips: Vec::new(),
    })
}

impl Model {
    pub fn graph(&self) -> &GraphSpec {
        &self.graph
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    fn check_input(&self, x: &Tensor4) -> Result<()> {
        let s = x.shape();
        let want = self.graph.input_shape;
        if (s.c, s.h, s.w) != (want.c, want.h, want.w) {
            return Err(Error::validation(format!(
                "model `{}` expects per-sample input {want}, got {}x{}x{}",
                self.graph.name, s.c, s.h, s.w
            )));
        }
        Ok(())
    }

    fn run<M: Meter>(
        &mut self,
        input: &Tensor4,
        training: bool,
        meter: &mut M,
        mut on_layer: impl FnMut(usize, &Tensor4, &M),
    ) -> Result<Tensor4> {
        self.check_input(input)?;
        self.skips.clear();
        let mut x = input.clone();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            x = match layer {
                Layer::ResidualBegin => {
                    self.skips.push(x.clone());
                    x
                }
                Layer::ResidualEnd => {
                    let skip = self
                        .skips
                        .pop()
                        .ok_or_else(|| Error::validation("unbalanced residual"))?;
                    x.zip_map(&skip, |a, b| {
                        meter.tick(1);
                        a + b
                    })?
                }
                other => {
                    let m = other.as_module().expect("parametric layer");
                    dispatch!(m, l => l.forward_metered(&x, training, meter)?)
                }
            };
            on_layer(i, &x, meter);
        }
        Ok(x)
    }

    /// Runs the model, metering each layer separately.
    pub fn forward_profiled(
        &mut self,
        input: &Tensor4,
        training: bool,
    ) -> Result<(Tensor4, Vec<LayerProfile>)> {
        let mut profiles = Vec::with_capacity(self.layers.len());
        let mut last = 0;
        let mut counter = FlopCounter::new();
        let y = self.run(input, training, &mut counter, |_, x, m| {
            profiles.push(LayerProfile {
                out_shape: x.shape(),
                flops: m.count - last,
            });
            last = m.count;
        })?;
        Ok((y, profiles))
    }
}

impl Module for Model {
    fn forward_metered<M: Meter>(
        &mut self,
        x: &Tensor4,
        training: bool,
        meter: &mut M,
    ) -> Result<Tensor4> {
        self.run(x, training, meter, |_, _, _| {})
    }

    fn forward(&mut self, x: &Tensor4, training: bool) -> Result<Tensor4> {
        self.run(x, training, &mut NoMeter, |_, _, _| {})
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        self.grad_skips.clear();
        let mut g = grad_out.clone();
        for layer in self.layers.iter_mut().rev() {
            g = match layer {
                Layer::ResidualEnd => {
                    self.grad_skips.push(g.clone());
                    g
                }
                Layer::ResidualBegin => {
                    let skip = self
                        .grad_skips
                        .pop()
                        .ok_or_else(|| Error::validation("unbalanced residual"))?;
                    g.add(&skip)?
                }
                other => {
                    let m = other.as_module().expect("parametric layer");
                    dispatch!(m, l => l.backward(&g)?)
                }
            };
        }
        Ok(g)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        for layer in &mut self.layers {
            if let Some(m) = layer.as_module() {
                dispatch!(m, l => l.visit_params(f));
            }
        }
    }
}

/// Mean softmax cross-entropy over `(n, classes, 1, 1)` logits, with its
/// gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor4, labels: &[usize]) -> Result<(f64, Tensor4)> {
    let s = logits.shape();
    if s.h != 1 || s.w != 1 {
        return Err(Error::validation(format!(
            "logits must be (n, classes, 1, 1), got {s}"
        )));
    }
    if labels.len() != s.n {
        return Err(Error::validation(format!(
            "label count {} does not match batch size {}",
            labels.len(),
            s.n
        )));
    }
    let mut grad = Tensor4::zeros(s);
    let mut loss = 0.0;
    for (n, &label) in labels.iter().enumerate() {
        if label >= s.c {
            return Err(Error::validation(format!(
                "label {label} out of range for {} classes",
                s.c
            )));
        }
        let row: Vec<f64> = (0..s.c).map(|c| logits.get(n, c, 0, 0)).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[label];
        for (c, v) in row.iter().enumerate() {
            let p = (v - log_z).exp();
            let target = if c == label { 1.0 } else { 0.0 };
            grad.set(n, c, 0, 0, (p - target) / s.n as f64);
        }
    }
    Ok((loss / s.n as f64, grad))
}
