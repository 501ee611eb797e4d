//! Stateful layers: parameters, accumulated gradients and the activations
//! cached between `forward` and `backward`.

use rand::Rng;

use crate::blocks::{
    fasternet_block_forward, fasternet_block_grad, pconv_grad, pconv_metered, pw_weight_shape,
    pwconv_grad, pwconv_metered, FasterNetBlockParams, FasterNetGrads, FasterNetSpec,
    FasterNetTrace, PConvSpec,
};
use crate::error::{expect_dim, Error, Result};
use crate::init::fan_in_uniform;
use crate::nam::{
    nam_channel_forward, nam_channel_grad, nam_spatial_forward, nam_spatial_grad, NamChannelParams,
    NamSpatialParams, NamTrace,
};
use crate::ops::{
    batchnorm_eval_grad, batchnorm_grad, batchnorm_metered, conv2d_grad, conv2d_metered, relu_grad,
    relu_metered, BNParams, BatchStats, ConvSpec, Meter, NoMeter, DEFAULT_BN_MOMENTUM,
};
use crate::tensor::{Shape, Tensor4};

/// A differentiable layer.
///
/// `backward` consumes the activations cached by the latest `forward` and
/// adds parameter gradients into the layer's gradient buffers.
pub trait Module {
    fn forward_metered<M: Meter>(
        &mut self,
        input: &Tensor4,
        training: bool,
        meter: &mut M,
    ) -> Result<Tensor4>;

    fn forward(&mut self, input: &Tensor4, training: bool) -> Result<Tensor4> {
        self.forward_metered(input, training, &mut NoMeter)
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4>;

    /// Calls `f(values, grads)` for every parameter buffer, in a fixed order.
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64]));

    fn zero_grad(&mut self) {
        self.visit_params(&mut |_, g| g.fill(0.0));
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |v, _| n += v.len());
        n
    }
}

fn no_cache() -> Error {
    Error::validation("backward called before forward")
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub spec: ConvSpec,
    pub weight: Tensor4,
    pub bias: Vec<f64>,
    grad_weight: Tensor4,
    grad_bias: Vec<f64>,
    input: Option<Tensor4>,
}

impl Conv2dLayer {
    pub fn new(spec: ConvSpec, weight: Tensor4, bias: Vec<f64>) -> Self {
        Conv2dLayer {
            grad_weight: Tensor4::zeros(weight.shape()),
            grad_bias: vec![0.0; bias.len()],
            spec,
            weight,
            bias,
            input: None,
        }
    }

    pub fn init<R: Rng + ?Sized>(spec: ConvSpec, rng: &mut R) -> Self {
        let w = fan_in_uniform(spec.kernel_shape(), spec.c_in * spec.k * spec.k, rng);
        Self::new(spec, w, vec![0.0; spec.c_out])
    }
}

impl Module for Conv2dLayer {
    fn forward_metered<M: Meter>(&mut self, x: &Tensor4, _: bool, m: &mut M) -> Result<Tensor4> {
        let y = conv2d_metered(x, &self.weight, &self.bias, &self.spec, m)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let x = self.input.as_ref().ok_or_else(no_cache)?;
        let g = conv2d_grad(x, &self.weight, &self.spec, grad_out)?;
        accumulate(self.grad_weight.data_mut(), g.kernel.data());
        accumulate(&mut self.grad_bias, &g.bias);
        Ok(g.input)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        f(self.weight.data_mut(), self.grad_weight.data_mut());
        f(&mut self.bias, &mut self.grad_bias);
    }
}

#[derive(Debug, Clone)]
pub struct PConvLayer {
    pub spec: PConvSpec,
    pub weight: Tensor4,
    grad_weight: Tensor4,
    input: Option<Tensor4>,
}

impl PConvLayer {
    pub fn new(spec: PConvSpec, weight: Tensor4) -> Self {
        PConvLayer {
            grad_weight: Tensor4::zeros(weight.shape()),
            spec,
            weight,
            input: None,
        }
    }

    pub fn init<R: Rng + ?Sized>(spec: PConvSpec, rng: &mut R) -> Self {
        Self::new(spec, spec.init_weights(rng))
    }
}

impl Module for PConvLayer {
    fn forward_metered<M: Meter>(&mut self, x: &Tensor4, _: bool, m: &mut M) -> Result<Tensor4> {
        let y = pconv_metered(x, &self.weight, &self.spec, m)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let x = self.input.as_ref().ok_or_else(no_cache)?;
        let (gi, gw) = pconv_grad(x, &self.weight, &self.spec, grad_out)?;
        accumulate(self.grad_weight.data_mut(), gw.data());
        Ok(gi)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        f(self.weight.data_mut(), self.grad_weight.data_mut());
    }
}

#[derive(Debug, Clone)]
pub struct PwConvLayer {
    pub weight: Tensor4,
    pub bias: Option<Vec<f64>>,
    grad_weight: Tensor4,
    grad_bias: Vec<f64>,
    input: Option<Tensor4>,
}

impl PwConvLayer {
    pub fn new(weight: Tensor4, bias: Option<Vec<f64>>) -> Self {
        let c_out = weight.shape().n;
        PwConvLayer {
            grad_weight: Tensor4::zeros(weight.shape()),
            grad_bias: vec![0.0; if bias.is_some() { c_out } else { 0 }],
            weight,
            bias,
            input: None,
        }
    }

    pub fn init<R: Rng + ?Sized>(c_in: usize, c_out: usize, bias: bool, rng: &mut R) -> Self {
        let w = fan_in_uniform(pw_weight_shape(c_in, c_out), c_in, rng);
        Self::new(w, bias.then(|| vec![0.0; c_out]))
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape().c
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape().n
    }
}

impl Module for PwConvLayer {
    fn forward_metered<M: Meter>(&mut self, x: &Tensor4, _: bool, m: &mut M) -> Result<Tensor4> {
        let y = pwconv_metered(x, &self.weight, self.bias.as_deref(), m)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let x = self.input.as_ref().ok_or_else(no_cache)?;
        let (gi, gw, gb) = pwconv_grad(x, &self.weight, grad_out)?;
        accumulate(self.grad_weight.data_mut(), gw.data());
        if self.bias.is_some() {
            accumulate(&mut self.grad_bias, &gb);
        }
        Ok(gi)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        f(self.weight.data_mut(), self.grad_weight.data_mut());
        if let Some(b) = self.bias.as_mut() {
            f(b, &mut self.grad_bias);
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormLayer {
    pub params: BNParams,
    pub momentum: f64,
    grad_gamma: Vec<f64>,
    grad_beta: Vec<f64>,
    cache: Option<(Tensor4, BatchStats, bool)>,
}

impl BatchNormLayer {
    pub fn new(params: BNParams) -> Self {
        let c = params.channels();
        BatchNormLayer {
            params,
            momentum: DEFAULT_BN_MOMENTUM,
            grad_gamma: vec![0.0; c],
            grad_beta: vec![0.0; c],
            cache: None,
        }
    }
}

impl Module for BatchNormLayer {
    fn forward_metered<M: Meter>(
        &mut self,
        x: &Tensor4,
        training: bool,
        m: &mut M,
    ) -> Result<Tensor4> {
        let (y, stats) = batchnorm_metered(x, &self.params, training, m)?;
        if training {
            self.params.update_running(&stats, self.momentum);
        }
        self.cache = Some((x.clone(), stats, training));
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let (x, stats, training) = self.cache.as_ref().ok_or_else(no_cache)?;
        let (gi, gg, gb) = if *training {
            batchnorm_grad(x, &self.params, stats, grad_out)?
        } else {
            batchnorm_eval_grad(x, &self.params, grad_out)?
        };
        accumulate(&mut self.grad_gamma, &gg);
        accumulate(&mut self.grad_beta, &gb);
        Ok(gi)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        f(&mut self.params.gamma, &mut self.grad_gamma);
        f(&mut self.params.beta, &mut self.grad_beta);
    }
}

#[derive(Debug, Clone, Default)]
pub struct ReluLayer {
    input: Option<Tensor4>,
}

impl Module for ReluLayer {
    fn forward_metered<M: Meter>(&mut self, x: &Tensor4, _: bool, m: &mut M) -> Result<Tensor4> {
        self.input = Some(x.clone());
        Ok(relu_metered(x, m))
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        relu_grad(self.input.as_ref().ok_or_else(no_cache)?, grad_out)
    }

    fn visit_params(&mut self, _: &mut dyn FnMut(&mut [f64], &mut [f64])) {}
}

fn zero_fasternet_grads(p: &FasterNetBlockParams) -> FasterNetGrads {
    FasterNetGrads {
        pconv: Tensor4::zeros(p.pconv.shape()),
        pw1: Tensor4::zeros(p.pw1.shape()),
        bn1_gamma: vec![0.0; p.bn1.channels()],
        bn1_beta: vec![0.0; p.bn1.channels()],
        pw2: Tensor4::zeros(p.pw2.shape()),
        pw2_bias: vec![0.0; p.pw2_bias.len()],
    }
}

#[derive(Debug, Clone)]
pub struct FasterNetLayer {
    pub params: FasterNetBlockParams,
    pub momentum: f64,
    grads: FasterNetGrads,
    trace: Option<FasterNetTrace>,
}

impl FasterNetLayer {
    pub fn new(params: FasterNetBlockParams) -> Self {
        FasterNetLayer {
            grads: zero_fasternet_grads(&params),
            params,
            momentum: DEFAULT_BN_MOMENTUM,
            trace: None,
        }
    }

    pub fn init<R: Rng + ?Sized>(spec: FasterNetSpec, rng: &mut R) -> Self {
        Self::new(FasterNetBlockParams::init(spec, rng))
    }
}

impl Module for FasterNetLayer {
    fn forward_metered<M: Meter>(
        &mut self,
        x: &Tensor4,
        training: bool,
        m: &mut M,
    ) -> Result<Tensor4> {
        let (y, trace) = fasternet_block_forward(x, &self.params, training, m)?;
        if training {
            self.params
                .bn1
                .update_running(&trace.bn_stats, self.momentum);
        }
        self.trace = Some(trace);
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let trace = self.trace.as_ref().ok_or_else(no_cache)?;
        let (gi, g) = fasternet_block_grad(&self.params, trace, grad_out)?;
        accumulate(self.grads.pconv.data_mut(), g.pconv.data());
        accumulate(self.grads.pw1.data_mut(), g.pw1.data());
        accumulate(&mut self.grads.bn1_gamma, &g.bn1_gamma);
        accumulate(&mut self.grads.bn1_beta, &g.bn1_beta);
        accumulate(self.grads.pw2.data_mut(), g.pw2.data());
        accumulate(&mut self.grads.pw2_bias, &g.pw2_bias);
        Ok(gi)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        let (p, g) = (&mut self.params, &mut self.grads);
        f(p.pconv.data_mut(), g.pconv.data_mut());
        f(p.pw1.data_mut(), g.pw1.data_mut());
        f(&mut p.bn1.gamma, &mut g.bn1_gamma);
        f(&mut p.bn1.beta, &mut g.bn1_beta);
        f(p.pw2.data_mut(), g.pw2.data_mut());
        f(&mut p.pw2_bias, &mut g.pw2_bias);
    }
}

/// Shared state of the two attention layers.
#[derive(Debug, Clone)]
struct AttentionState {
    grad_gamma: Vec<f64>,
    grad_beta: Vec<f64>,
    trace: Option<NamTrace>,
}

impl AttentionState {
    fn new(units: usize) -> Self {
        AttentionState {
            grad_gamma: vec![0.0; units],
            grad_beta: vec![0.0; units],
            trace: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NamChannelLayer {
    pub params: NamChannelParams,
    pub momentum: f64,
    state: AttentionState,
}

impl NamChannelLayer {
    pub fn new(params: NamChannelParams) -> Self {
        NamChannelLayer {
            state: AttentionState::new(params.bn.channels()),
            params,
            momentum: DEFAULT_BN_MOMENTUM,
        }
    }
}

impl Module for NamChannelLayer {
    fn forward_metered<M: Meter>(
        &mut self,
        x: &Tensor4,
        training: bool,
        m: &mut M,
    ) -> Result<Tensor4> {
        let (y, trace) = nam_channel_forward(x, &self.params, training, m)?;
        if training {
            self.params.bn.update_running(trace.stats(), self.momentum);
        }
        self.state.trace = Some(trace);
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let trace = self.state.trace.as_ref().ok_or_else(no_cache)?;
        let (gi, g) = nam_channel_grad(&self.params, trace, grad_out)?;
        accumulate(&mut self.state.grad_gamma, &g.gamma);
        accumulate(&mut self.state.grad_beta, &g.beta);
        Ok(gi)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        f(&mut self.params.bn.gamma, &mut self.state.grad_gamma);
        f(&mut self.params.bn.beta, &mut self.state.grad_beta);
    }
}

#[derive(Debug, Clone)]
pub struct NamSpatialLayer {
    pub params: NamSpatialParams,
    pub momentum: f64,
    state: AttentionState,
}

impl NamSpatialLayer {
    pub fn new(params: NamSpatialParams) -> Self {
        NamSpatialLayer {
            state: AttentionState::new(params.bn.channels()),
            params,
            momentum: DEFAULT_BN_MOMENTUM,
        }
    }
}

impl Module for NamSpatialLayer {
    fn forward_metered<M: Meter>(
        &mut self,
        x: &Tensor4,
        training: bool,
        m: &mut M,
    ) -> Result<Tensor4> {
        let (y, trace) = nam_spatial_forward(x, &self.params, training, m)?;
        if training {
            self.params.bn.update_running(trace.stats(), self.momentum);
        }
        self.state.trace = Some(trace);
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let trace = self.state.trace.as_ref().ok_or_else(no_cache)?;
        let (gi, g) = nam_spatial_grad(&self.params, trace, grad_out)?;
        accumulate(&mut self.state.grad_gamma, &g.gamma);
        accumulate(&mut self.state.grad_beta, &g.beta);
        Ok(gi)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        f(&mut self.params.bn.gamma, &mut self.state.grad_gamma);
        f(&mut self.params.bn.beta, &mut self.state.grad_beta);
    }
}

/// Global average pooling followed by a pointwise projection to class logits.
/// Output shape is `(n, classes, 1, 1)`.
#[derive(Debug, Clone)]
pub struct GapHeadLayer {
    pub proj: PwConvLayer,
    input_shape: Option<Shape>,
}

impl GapHeadLayer {
    pub fn init<R: Rng + ?Sized>(channels: usize, classes: usize, rng: &mut R) -> Self {
        GapHeadLayer {
            proj: PwConvLayer::init(channels, classes, true, rng),
            input_shape: None,
        }
    }
}

/// Spatial mean per channel: one tick per summed element plus one per channel
/// for the final scaling.
pub fn global_avg_pool<M: Meter>(x: &Tensor4, meter: &mut M) -> Tensor4 {
    let s = x.shape();
    let scale = 1.0 / s.plane() as f64;
    Tensor4::from_fn(Shape::new(s.n, s.c, 1, 1), |n, c, _, _| {
        let mut acc = 0.0;
        for v in x.plane(n, c) {
            acc += v;
            meter.tick(1);
        }
        meter.tick(1);
        acc * scale
    })
}

impl Module for GapHeadLayer {
    fn forward_metered<M: Meter>(
        &mut self,
        x: &Tensor4,
        training: bool,
        m: &mut M,
    ) -> Result<Tensor4> {
        expect_dim("gap_head input channel", self.proj.c_in(), x.shape().c)?;
        let pooled = global_avg_pool(x, m);
        self.input_shape = Some(x.shape());
        self.proj.forward_metered(&pooled, training, m)
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let s = self.input_shape.ok_or_else(no_cache)?;
        let g_pooled = self.proj.backward(grad_out)?;
        let scale = 1.0 / s.plane() as f64;
        Ok(Tensor4::from_fn(s, |n, c, _, _| {
            g_pooled.get(n, c, 0, 0) * scale
        }))
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        self.proj.visit_params(f);
    }
}
