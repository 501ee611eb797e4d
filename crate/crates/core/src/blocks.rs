//! Partial convolution, pointwise convolution and the FasterNet block.
//!
//! A FasterNet block computes
//!
//! ```text
//! out = x + pw2(relu(bn1(pw1(pconv(x)))))
//! ```
//!
//! where `pconv` convolves only the first `c_p` channels and copies the rest,
//! `pw1` expands `c -> e*c` without bias and `pw2` projects back with bias.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{expect_dim, Error, Result};
use crate::init::{fan_in_uniform, seeded_rng};
use crate::ops::{
    batchnorm_eval_grad, batchnorm_grad, batchnorm_metered, conv2d_grad, conv2d_metered, relu_grad,
    relu_metered, BNParams, BatchStats, ConvSpec, Meter, NoMeter,
};
use crate::tensor::{Shape, Tensor4};

/// Partial convolution geometry. The first `c_p` of `c` channels are
/// convolved with stride 1 and same padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PConvSpec {
    pub c: usize,
    pub c_p: usize,
    pub k: usize,
}

impl PConvSpec {
    pub fn new(c: usize, c_p: usize, k: usize) -> Result<Self> {
        let spec = PConvSpec { c, c_p, k };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_p == 0 || self.c_p > self.c {
            return Err(Error::validation(format!(
                "pconv requires 1 <= c_p <= c, got c_p={} c={}",
                self.c_p, self.c
            )));
        }
        if self.k.is_multiple_of(2) {
            return Err(Error::validation(format!(
                "pconv kernel size must be odd, got {}",
                self.k
            )));
        }
        Ok(())
    }

    /// `c_p / c`, in `(0, 1]`.
    pub fn partial_ratio(&self) -> f64 {
        self.c_p as f64 / self.c as f64
    }

    pub fn padding(&self) -> usize {
        (self.k - 1) / 2
    }

    /// The convolution applied to the leading `c_p` channels.
    pub fn conv_spec(&self) -> ConvSpec {
        ConvSpec::new(self.c_p, self.c_p, self.k, 1, self.padding())
    }

    pub fn weight_shape(&self) -> Shape {
        self.conv_spec().kernel_shape()
    }

    pub fn init_weights<R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor4 {
        fan_in_uniform(self.weight_shape(), self.c_p * self.k * self.k, rng)
    }
}

fn leading_channels(input: &Tensor4, count: usize) -> Tensor4 {
    let s = input.shape();
    let mut out = Tensor4::zeros(Shape::new(s.n, count, s.h, s.w));
    for n in 0..s.n {
        for c in 0..count {
            out.plane_mut(n, c).copy_from_slice(input.plane(n, c));
        }
    }
    out
}

pub fn pconv(input: &Tensor4, weights: &Tensor4, spec: &PConvSpec) -> Result<Tensor4> {
    pconv_metered(input, weights, spec, &mut NoMeter)
}

/// Convolves channels `[0, c_p)` and copies channels `[c_p, c)` unchanged.
pub fn pconv_metered<M: Meter>(
    input: &Tensor4,
    weights: &Tensor4,
    spec: &PConvSpec,
    meter: &mut M,
) -> Result<Tensor4> {
    spec.validate()?;
    expect_dim("pconv input channel", spec.c, input.shape().c)?;
    let head = leading_channels(input, spec.c_p);
    let bias = vec![0.0; spec.c_p];
    let conv = conv2d_metered(&head, weights, &bias, &spec.conv_spec(), meter)?;
    let mut out = input.clone();
    for n in 0..input.shape().n {
        for c in 0..spec.c_p {
            out.plane_mut(n, c).copy_from_slice(conv.plane(n, c));
        }
    }
    Ok(out)
}

/// Returns `(grad_input, grad_weights)`.
pub fn pconv_grad(
    input: &Tensor4,
    weights: &Tensor4,
    spec: &PConvSpec,
    grad_out: &Tensor4,
) -> Result<(Tensor4, Tensor4)> {
    spec.validate()?;
    expect_dim("pconv input channel", spec.c, input.shape().c)?;
    grad_out.expect_shape(input.shape(), "pconv grad_out")?;
    let head = leading_channels(input, spec.c_p);
    let g_head = leading_channels(grad_out, spec.c_p);
    let g = conv2d_grad(&head, weights, &spec.conv_spec(), &g_head)?;
    let mut gi = grad_out.clone();
    for n in 0..input.shape().n {
        for c in 0..spec.c_p {
            gi.plane_mut(n, c).copy_from_slice(g.input.plane(n, c));
        }
    }
    Ok((gi, g.kernel))
}

/// Shape of a pointwise weight matrix `(c_out, c_in)`, stored as a
/// `(c_out, c_in, 1, 1)` kernel.
pub fn pw_weight_shape(c_in: usize, c_out: usize) -> Shape {
    Shape::new(c_out, c_in, 1, 1)
}

pub fn pwconv(input: &Tensor4, weights: &Tensor4, bias: Option<&[f64]>) -> Result<Tensor4> {
    pwconv_metered(input, weights, bias, &mut NoMeter)
}

/// Per-pixel channel mixing: `out[co] = bias[co] + sum_ci w[co, ci] * x[ci]`.
pub fn pwconv_metered<M: Meter>(
    input: &Tensor4,
    weights: &Tensor4,
    bias: Option<&[f64]>,
    meter: &mut M,
) -> Result<Tensor4> {
    let s = input.shape();
    let ws = weights.shape();
    if ws.h != 1 || ws.w != 1 {
        return Err(Error::validation(format!(
            "pwconv weights must be (c_out, c_in, 1, 1), got {ws}"
        )));
    }
    expect_dim("pwconv input channel", ws.c, s.c)?;
    if let Some(b) = bias {
        expect_dim("pwconv bias length", ws.n, b.len())?;
    }
    let mut out = Tensor4::zeros(Shape::new(s.n, ws.n, s.h, s.w));
    for n in 0..s.n {
        for co in 0..ws.n {
            let dst = out.plane_mut(n, co);
            if let Some(b) = bias {
                dst.fill(b[co]);
            }
            for ci in 0..s.c {
                let wv = weights.get(co, ci, 0, 0);
                for (d, x) in dst.iter_mut().zip(input.plane(n, ci)) {
                    *d += wv * x;
                    meter.tick(1);
                }
            }
        }
    }
    Ok(out)
}

/// Returns `(grad_input, grad_weights, grad_bias)`; the bias gradient is
/// computed whether or not the forward pass used a bias.
pub fn pwconv_grad(
    input: &Tensor4,
    weights: &Tensor4,
    grad_out: &Tensor4,
) -> Result<(Tensor4, Tensor4, Vec<f64>)> {
    let s = input.shape();
    let ws = weights.shape();
    expect_dim("pwconv input channel", ws.c, s.c)?;
    grad_out.expect_shape(Shape::new(s.n, ws.n, s.h, s.w), "pwconv grad_out")?;
    let mut gi = Tensor4::zeros(s);
    let mut gw = Tensor4::zeros(ws);
    let mut gb = vec![0.0; ws.n];
    for n in 0..s.n {
        for co in 0..ws.n {
            let g = grad_out.plane(n, co);
            gb[co] += g.iter().sum::<f64>();
            for ci in 0..s.c {
                let wv = weights.get(co, ci, 0, 0);
                let x = input.plane(n, ci);
                let mut acc = 0.0;
                for (d, (gv, xv)) in gi.plane_mut(n, ci).iter_mut().zip(g.iter().zip(x)) {
                    acc += gv * xv;
                    *d += gv * wv;
                }
                gw.data_mut()[ws.index(co, ci, 0, 0)] += acc;
            }
        }
    }
    Ok((gi, gw, gb))
}

/// Block geometry: the partial convolution plus the expansion factor `e`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FasterNetSpec {
    pub pconv: PConvSpec,
    pub expansion: usize,
}

pub const DEFAULT_EXPANSION: usize = 2;

impl FasterNetSpec {
    pub fn new(c: usize, c_p: usize, k: usize, expansion: usize) -> Result<Self> {
        if expansion == 0 {
            return Err(Error::validation("fasternet expansion must be >= 1"));
        }
        Ok(FasterNetSpec {
            pconv: PConvSpec::new(c, c_p, k)?,
            expansion,
        })
    }

    pub fn channels(&self) -> usize {
        self.pconv.c
    }

    pub fn hidden(&self) -> usize {
        self.pconv.c * self.expansion
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FasterNetBlockParams {
    pub spec: FasterNetSpec,
    pub pconv: Tensor4,
    pub pw1: Tensor4,
    pub bn1: BNParams,
    pub pw2: Tensor4,
    pub pw2_bias: Vec<f64>,
}

impl FasterNetBlockParams {
    pub fn init<R: Rng + ?Sized>(spec: FasterNetSpec, rng: &mut R) -> Self {
        let (c, hidden) = (spec.channels(), spec.hidden());
        FasterNetBlockParams {
            spec,
            pconv: spec.pconv.init_weights(rng),
            pw1: fan_in_uniform(pw_weight_shape(c, hidden), c, rng),
            bn1: BNParams::identity(hidden),
            pw2: fan_in_uniform(pw_weight_shape(hidden, c), hidden, rng),
            pw2_bias: vec![0.0; c],
        }
    }

    pub fn init_seeded(spec: FasterNetSpec, seed: u64) -> Self {
        Self::init(spec, &mut seeded_rng(seed))
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct FasterNetTrace {
    pub input: Tensor4,
    pub pconv_out: Tensor4,
    pub pw1_out: Tensor4,
    pub bn_stats: BatchStats,
    pub bn_out: Tensor4,
    pub relu_out: Tensor4,
    pub training: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FasterNetGrads {
    pub pconv: Tensor4,
    pub pw1: Tensor4,
    pub bn1_gamma: Vec<f64>,
    pub bn1_beta: Vec<f64>,
    pub pw2: Tensor4,
    pub pw2_bias: Vec<f64>,
}

pub fn fasternet_block(
    input: &Tensor4,
    params: &FasterNetBlockParams,
    training: bool,
) -> Result<Tensor4> {
    Ok(fasternet_block_forward(input, params, training, &mut NoMeter)?.0)
}

/// Forward pass returning the output and the trace needed by
/// [`fasternet_block_grad`]. The residual add ticks once per element.
pub fn fasternet_block_forward<M: Meter>(
    input: &Tensor4,
    params: &FasterNetBlockParams,
    training: bool,
    meter: &mut M,
) -> Result<(Tensor4, FasterNetTrace)> {
    let spec = &params.spec;
    expect_dim("fasternet input channel", spec.channels(), input.shape().c)?;
    let pconv_out = pconv_metered(input, &params.pconv, &spec.pconv, meter)?;
    let pw1_out = pwconv_metered(&pconv_out, &params.pw1, None, meter)?;
    let (bn_out, bn_stats) = batchnorm_metered(&pw1_out, &params.bn1, training, meter)?;
    let relu_out = relu_metered(&bn_out, meter);
    let branch = pwconv_metered(&relu_out, &params.pw2, Some(&params.pw2_bias), meter)?;
    let out = input.zip_map(&branch, |a, b| {
        meter.tick(1);
        a + b
    })?;
    let trace = FasterNetTrace {
        input: input.clone(),
        pconv_out,
        pw1_out,
        bn_stats,
        bn_out,
        relu_out,
        training,
    };
    Ok((out, trace))
}

/// Returns `(grad_input, parameter gradients)`.
pub fn fasternet_block_grad(
    params: &FasterNetBlockParams,
    trace: &FasterNetTrace,
    grad_out: &Tensor4,
) -> Result<(Tensor4, FasterNetGrads)> {
    grad_out.expect_shape(trace.input.shape(), "fasternet grad_out")?;
    let (g_relu, g_pw2, g_pw2_bias) = pwconv_grad(&trace.relu_out, &params.pw2, grad_out)?;
    let g_bn = relu_grad(&trace.bn_out, &g_relu)?;
    let (g_pw1_out, g_gamma, g_beta) = if trace.training {
        batchnorm_grad(&trace.pw1_out, &params.bn1, &trace.bn_stats, &g_bn)?
    } else {
        batchnorm_eval_grad(&trace.pw1_out, &params.bn1, &g_bn)?
    };
    let (g_pconv_out, g_pw1, _) = pwconv_grad(&trace.pconv_out, &params.pw1, &g_pw1_out)?;
    let (g_in_branch, g_pconv) = pconv_grad(
        &trace.input,
        &params.pconv,
        &params.spec.pconv,
        &g_pconv_out,
    )?;
    let gi = grad_out.add(&g_in_branch)?;
    Ok((
        gi,
        FasterNetGrads {
            pconv: g_pconv,
            pw1: g_pw1,
            bn1_gamma: g_gamma,
            bn1_beta: g_beta,
            pw2: g_pw2,
            pw2_bias: g_pw2_bias,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::seeded_rng;
    use crate::ops::{conv2d, FlopCounter};

    #[test]
    fn pconv_spec_validation() {
        assert!(PConvSpec::new(64, 128, 3).is_err());
        assert!(PConvSpec::new(4, 0, 3).is_err());
        assert!(PConvSpec::new(4, 2, 2).is_err());
        let s = PConvSpec::new(64, 16, 3).unwrap();
        assert_eq!(s.partial_ratio(), 0.25);
        assert_eq!(s.padding(), 1);
    }

    #[test]
    fn pconv_passes_trailing_channels_through() {
        let mut rng = seeded_rng(21);
        let spec = PConvSpec::new(4, 2, 3).unwrap();
        let x = Tensor4::random_uniform(Shape::new(2, 4, 5, 5), -1.0, 1.0, &mut rng);
        let y = pconv(&x, &spec.init_weights(&mut rng), &spec).unwrap();
        assert_eq!(y.shape(), x.shape());
        for n in 0..2 {
            for c in 2..4 {
                assert_eq!(y.plane(n, c), x.plane(n, c));
            }
            assert_ne!(y.plane(n, 0), x.plane(n, 0));
        }
    }

    #[test]
    fn full_ratio_pconv_is_conv2d() {
        let mut rng = seeded_rng(22);
        let spec = PConvSpec::new(3, 3, 3).unwrap();
        let x = Tensor4::random_uniform(Shape::new(1, 3, 6, 6), -1.0, 1.0, &mut rng);
        let w = spec.init_weights(&mut rng);
        let a = pconv(&x, &w, &spec).unwrap();
        let b = conv2d(&x, &w, &[0.0; 3], &spec.conv_spec()).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-6);
    }

    #[test]
    fn pconv_flops_are_quadratic_in_ratio() {
        // c=64, c_p=16, k=3 on a 56x56 map: 16*16*9*56*56 = 7,225,344 MACs;
        // the full convolution costs 64*64*9*56*56 = 115,605,504.
        let spec = PConvSpec::new(64, 16, 3).unwrap();
        let x = Tensor4::zeros(Shape::new(1, 64, 56, 56));
        let w = Tensor4::zeros(spec.weight_shape());
        let mut m = FlopCounter::new();
        pconv_metered(&x, &w, &spec, &mut m).unwrap();
        assert_eq!(m.count, 7_225_344);
        assert_eq!(m.count * 16, 115_605_504);
    }

    #[test]
    fn pwconv_identity_sum_and_bias_cases() {
        let mut rng = seeded_rng(23);
        let x = Tensor4::random_uniform(Shape::new(2, 3, 4, 4), -1.0, 1.0, &mut rng);
        let eye = Tensor4::from_fn(pw_weight_shape(3, 3), |o, i, _, _| (o == i) as u8 as f64);
        assert_eq!(pwconv(&x, &eye, Some(&[0.0; 3])).unwrap(), x);

        let x2 = Tensor4::random_uniform(Shape::new(1, 2, 3, 3), -1.0, 1.0, &mut rng);
        let sum = Tensor4::filled(pw_weight_shape(2, 1), 1.0);
        let y = pwconv(&x2, &sum, Some(&[0.0])).unwrap();
        for (i, v) in y.data().iter().enumerate() {
            assert_eq!(*v, x2.plane(0, 0)[i] + x2.plane(0, 1)[i]);
        }

        let zero = Tensor4::zeros(pw_weight_shape(3, 2));
        let y = pwconv(&x, &zero, Some(&[1.5, -2.0])).unwrap();
        assert!(y.plane(1, 0).iter().all(|&v| v == 1.5));
        assert!(y.plane(1, 1).iter().all(|&v| v == -2.0));
    }

    #[test]
    fn pwconv_matches_unit_kernel_conv() {
        let mut rng = seeded_rng(24);
        let x = Tensor4::random_uniform(Shape::new(2, 3, 4, 5), -1.0, 1.0, &mut rng);
        let w = Tensor4::random_uniform(pw_weight_shape(3, 4), -1.0, 1.0, &mut rng);
        let b = [0.1, 0.2, 0.3, 0.4];
        let a = pwconv(&x, &w, Some(&b)).unwrap();
        let c = conv2d(&x, &w, &b, &ConvSpec::new(3, 4, 1, 1, 0)).unwrap();
        assert!(a.max_abs_diff(&c) < 1e-12);
    }

    #[test]
    fn pwconv_channel_mismatch() {
        let x = Tensor4::zeros(Shape::new(1, 3, 2, 2));
        let w = Tensor4::zeros(pw_weight_shape(2, 2));
        assert!(matches!(pwconv(&x, &w, None), Err(Error::Validation(_))));
    }

    #[test]
    fn block_preserves_shape_and_zero_branch_is_identity() {
        let spec = FasterNetSpec::new(8, 2, 3, 2).unwrap();
        let mut p = FasterNetBlockParams::init_seeded(spec, 5);
        let x = Tensor4::random_uniform(Shape::new(1, 8, 16, 16), -1.0, 1.0, &mut seeded_rng(6));
        let y = fasternet_block(&x, &p, true).unwrap();
        assert_eq!(y.shape(), x.shape());
        p.pw2 = Tensor4::zeros(p.pw2.shape());
        p.pw2_bias = vec![0.0; 8];
        assert_eq!(fasternet_block(&x, &p, true).unwrap(), x);
        assert_eq!(fasternet_block(&x, &p, false).unwrap(), x);
    }

    #[test]
    fn block_rejects_wrong_channels() {
        let p = FasterNetBlockParams::init_seeded(FasterNetSpec::new(8, 2, 3, 2).unwrap(), 5);
        assert!(fasternet_block(&Tensor4::zeros(Shape::new(1, 6, 4, 4)), &p, true).is_err());
    }

    #[test]
    fn init_is_deterministic_with_bn_identity() {
        let spec = FasterNetSpec::new(8, 4, 3, 2).unwrap();
        let a = FasterNetBlockParams::init_seeded(spec, 1);
        assert_eq!(a, FasterNetBlockParams::init_seeded(spec, 1));
        assert!(a.bn1.gamma.iter().all(|&g| g == 1.0));
        assert!(a.bn1.beta.iter().all(|&b| b == 0.0));
        assert!(a.pw2_bias.iter().all(|&b| b == 0.0));
    }
}
