//! Normalization-based attention.
//!
//! Each submodule batch-normalizes its input, scales the normalized map by
//! importance weights `w_i = |gamma_i| / sum_j |gamma_j|` taken from its own
//! BN scale factors, and gates the input with a sigmoid:
//!
//! ```text
//! out = x * sigmoid(w * BN(x))
//! ```
//!
//! The channel variant normalizes per channel. The spatial variant treats every
//! `(h, w)` position as a normalization unit with statistics over batch and
//! channels; it is the channel variant applied to `(n, h*w, c, 1)` data.

use serde::{Deserialize, Serialize};

use crate::error::{expect_dim, Error, Result};
use crate::ops::{
    batchnorm_eval_grad, batchnorm_grad, batchnorm_metered, sigmoid, BNParams, BatchStats, Meter,
    NoMeter,
};
use crate::tensor::Tensor4;

/// Metered cost of one sigmoid evaluation.
pub const SIGMOID_FLOPS: u64 = 4;

/// Normalized absolute importance scores. Fails when every scale is zero.
pub fn nam_weights(scales: &[f64]) -> Result<Vec<f64>> {
    if scales.is_empty() {
        return Err(Error::validation("nam_weights needs at least one scale"));
    }
    let total: f64 = scales.iter().map(|g| g.abs()).sum();
    if total == 0.0 {
        return Err(Error::degenerate("all attention scale factors are zero"));
    }
    Ok(scales.iter().map(|g| g.abs() / total).collect())
}

/// Gradient of [`nam_weights`] pulled back to the scales. The subgradient of
/// `|s|` at zero is taken as 0.
fn nam_weights_grad(scales: &[f64], weights: &[f64], grad_weights: &[f64]) -> Vec<f64> {
    let total: f64 = scales.iter().map(|g| g.abs()).sum();
    let dot: f64 = weights.iter().zip(grad_weights).map(|(w, g)| w * g).sum();
    scales
        .iter()
        .zip(grad_weights)
        .map(|(&s, g)| {
            let sign = if s == 0.0 { 0.0 } else { s.signum() };
            sign * (g - dot) / total
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamChannelParams {
    pub bn: BNParams,
}

impl NamChannelParams {
    pub fn new(channels: usize) -> Self {
        NamChannelParams {
            bn: BNParams::identity(channels),
        }
    }
}

/// Spatial attention parameters bound to a fixed `(h, w)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamSpatialParams {
    pub h: usize,
    pub w: usize,
    pub bn: BNParams,
}

impl NamSpatialParams {
    pub fn new(h: usize, w: usize) -> Self {
        NamSpatialParams {
            h,
            w,
            bn: BNParams::identity(h * w),
        }
    }
}

/// Activations saved by a forward pass. For the spatial variant the tensors
/// are in transposed `(n, h*w, c, 1)` layout.
#[derive(Debug, Clone)]
pub struct NamTrace {
    input: Tensor4,
    normalized: Tensor4,
    stats: BatchStats,
    weights: Vec<f64>,
    gate: Tensor4,
    training: bool,
}

impl NamTrace {
    /// Normalization statistics used by the forward pass.
    pub fn stats(&self) -> &BatchStats {
        &self.stats
    }
}

/// Gradients for the attention's BN scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct NamGrads {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

fn gate_forward<M: Meter>(
    input: &Tensor4,
    bn: &BNParams,
    training: bool,
    meter: &mut M,
) -> Result<(Tensor4, NamTrace)> {
    let (normalized, stats) = batchnorm_metered(input, bn, training, meter)?;
    let weights = nam_weights(&bn.gamma)?;
    let s = input.shape();
    let mut gate = normalized.clone();
    let mut out = input.clone();
    for n in 0..s.n {
        for (c, &wc) in weights.iter().enumerate() {
            let g = gate.plane_mut(n, c);
            for v in g.iter_mut() {
                *v = sigmoid(wc * *v);
                meter.tick(1 + SIGMOID_FLOPS);
            }
            for (o, gv) in out.plane_mut(n, c).iter_mut().zip(g.iter()) {
                *o *= gv;
                meter.tick(1);
            }
        }
    }
    let trace = NamTrace {
        input: input.clone(),
        normalized,
        stats,
        weights,
        gate,
        training,
    };
    Ok((out, trace))
}

fn gate_grad(bn: &BNParams, trace: &NamTrace, grad_out: &Tensor4) -> Result<(Tensor4, NamGrads)> {
    let s = trace.input.shape();
    grad_out.expect_shape(s, "nam grad_out")?;
    let mut g_norm = Tensor4::zeros(s);
    let mut g_weights = vec![0.0; s.c];
    let mut gi = Tensor4::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let x = trace.input.plane(n, c);
            let gate = trace.gate.plane(n, c);
            let y = trace.normalized.plane(n, c);
            let go = grad_out.plane(n, c);
            let wc = trace.weights[c];
            let dst = g_norm.plane_mut(n, c);
            let gi_plane = gi.plane_mut(n, c);
            for i in 0..x.len() {
                let dz = go[i] * x[i] * gate[i] * (1.0 - gate[i]);
                g_weights[c] += dz * y[i];
                dst[i] = dz * wc;
                gi_plane[i] = go[i] * gate[i];
            }
        }
    }
    let (gi_bn, mut g_gamma, g_beta) = if trace.training {
        batchnorm_grad(&trace.input, bn, &trace.stats, &g_norm)?
    } else {
        batchnorm_eval_grad(&trace.input, bn, &g_norm)?
    };
    let through_weights = nam_weights_grad(&bn.gamma, &trace.weights, &g_weights);
    for (g, extra) in g_gamma.iter_mut().zip(through_weights) {
        *g += extra;
    }
    Ok((
        gi.add(&gi_bn)?,
        NamGrads {
            gamma: g_gamma,
            beta: g_beta,
        },
    ))
}

pub fn nam_channel(input: &Tensor4, params: &NamChannelParams, training: bool) -> Result<Tensor4> {
    Ok(nam_channel_forward(input, params, training, &mut NoMeter)?.0)
}

pub fn nam_channel_forward<M: Meter>(
    input: &Tensor4,
    params: &NamChannelParams,
    training: bool,
    meter: &mut M,
) -> Result<(Tensor4, NamTrace)> {
    expect_dim("nam_channel channel", params.bn.channels(), input.shape().c)?;
    gate_forward(input, &params.bn, training, meter)
}

pub fn nam_channel_grad(
    params: &NamChannelParams,
    trace: &NamTrace,
    grad_out: &Tensor4,
) -> Result<(Tensor4, NamGrads)> {
    gate_grad(&params.bn, trace, grad_out)
}

fn check_spatial(input: &Tensor4, params: &NamSpatialParams) -> Result<()> {
    let s = input.shape();
    if (s.h, s.w) != (params.h, params.w) {
        return Err(Error::validation(format!(
            "nam_spatial spatial size mismatch: bound to {}x{}, got {}x{}",
            params.h, params.w, s.h, s.w
        )));
    }
    expect_dim(
        "nam_spatial parameter length",
        params.h * params.w,
        params.bn.channels(),
    )
}

pub fn nam_spatial(input: &Tensor4, params: &NamSpatialParams, training: bool) -> Result<Tensor4> {
    Ok(nam_spatial_forward(input, params, training, &mut NoMeter)?.0)
}

pub fn nam_spatial_forward<M: Meter>(
    input: &Tensor4,
    params: &NamSpatialParams,
    training: bool,
    meter: &mut M,
) -> Result<(Tensor4, NamTrace)> {
    check_spatial(input, params)?;
    let (out, trace) = gate_forward(&input.channels_to_positions(), &params.bn, training, meter)?;
    Ok((out.positions_to_channels(params.h, params.w)?, trace))
}

pub fn nam_spatial_grad(
    params: &NamSpatialParams,
    trace: &NamTrace,
    grad_out: &Tensor4,
) -> Result<(Tensor4, NamGrads)> {
    check_spatial(grad_out, params)?;
    let (gi, grads) = gate_grad(&params.bn, trace, &grad_out.channels_to_positions())?;
    Ok((gi.positions_to_channels(params.h, params.w)?, grads))
}

/// Channel attention followed by spatial attention.
pub fn nam_serial(
    input: &Tensor4,
    channel: &NamChannelParams,
    spatial: &NamSpatialParams,
    training: bool,
) -> Result<Tensor4> {
    nam_spatial(&nam_channel(input, channel, training)?, spatial, training)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::seeded_rng;
    use crate::tensor::Shape;

    #[test]
    fn weights_normalize_absolute_scales() {
        assert_eq!(nam_weights(&[1.0; 4]).unwrap(), vec![0.25; 4]);
        assert_eq!(nam_weights(&[1.0, 3.0]).unwrap(), vec![0.25, 0.75]);
        assert_eq!(nam_weights(&[-1.0, 3.0]).unwrap(), vec![0.25, 0.75]);
    }

    #[test]
    fn weights_reject_degenerate_scales() {
        assert!(matches!(
            nam_weights(&[0.0, 0.0]),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(nam_weights(&[]), Err(Error::Validation(_))));
    }

    #[test]
    fn single_channel_zero_input_gates_at_half() {
        let x = Tensor4::zeros(Shape::new(1, 1, 1, 1));
        let p = NamChannelParams {
            bn: BNParams {
                gamma: vec![1.0],
                beta: vec![0.0],
                running_mean: vec![0.0],
                running_var: vec![1.0],
                eps: f64::MIN_POSITIVE,
            },
        };
        let (y, trace) = nam_channel_forward(&x, &p, false, &mut NoMeter).unwrap();
        assert_eq!(trace.weights, vec![1.0]);
        assert_eq!(trace.gate.data(), &[0.5]);
        assert_eq!(y.data(), &[0.0]);
    }

    #[test]
    fn attention_is_shape_preserving_and_bounded() {
        let mut rng = seeded_rng(31);
        let x = Tensor4::random_uniform(Shape::new(2, 8, 5, 5), -3.0, 3.0, &mut rng);
        let mut ch = NamChannelParams::new(8);
        let mut sp = NamSpatialParams::new(5, 5);
        for g in ch.bn.gamma.iter_mut().chain(sp.bn.gamma.iter_mut()) {
            *g = rand::Rng::random_range(&mut rng, -2.0..2.0);
        }
        for training in [true, false] {
            for y in [
                nam_channel(&x, &ch, training).unwrap(),
                nam_spatial(&x, &sp, training).unwrap(),
                nam_serial(&x, &ch, &sp, training).unwrap(),
            ] {
                assert_eq!(y.shape(), x.shape());
                assert!(y
                    .data()
                    .iter()
                    .zip(x.data())
                    .all(|(a, b)| a.abs() <= b.abs()));
            }
        }
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let x = Tensor4::zeros(Shape::new(1, 4, 3, 3));
        assert!(nam_channel(&x, &NamChannelParams::new(3), true).is_err());
        assert!(nam_spatial(&x, &NamSpatialParams::new(3, 4), true).is_err());
    }

    #[test]
    fn unit_spatial_extent_reduces_to_channel_attention() {
        let mut rng = seeded_rng(32);
        let x = Tensor4::random_uniform(Shape::new(3, 5, 1, 1), -2.0, 2.0, &mut rng);
        let mut sp = NamSpatialParams::new(1, 1);
        sp.bn.gamma = vec![1.7];
        sp.bn.beta = vec![-0.3];
        let ch = NamChannelParams { bn: sp.bn.clone() };
        let via_spatial = nam_spatial(&x, &sp, true).unwrap();
        // (n, c, 1, 1) -> (n, 1, c, 1): one "channel" whose plane holds all c values.
        let transposed = x.channels_to_positions();
        let via_channel = nam_channel(&transposed, &ch, true)
            .unwrap()
            .positions_to_channels(1, 1)
            .unwrap();
        assert!(via_spatial.max_abs_diff(&via_channel) < 1e-15);
    }

    #[test]
    fn equal_gamma_commutes_with_channel_permutation() {
        let mut rng = seeded_rng(33);
        let x = Tensor4::random_uniform(Shape::new(2, 4, 3, 3), -2.0, 2.0, &mut rng);
        let p = NamChannelParams::new(4);
        let perm = [2, 0, 3, 1];
        let permute =
            |t: &Tensor4| Tensor4::from_fn(t.shape(), |n, c, h, w| t.get(n, perm[c], h, w));
        let a = permute(&nam_channel(&x, &p, true).unwrap());
        let b = nam_channel(&permute(&x), &p, true).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-15);
    }
}
