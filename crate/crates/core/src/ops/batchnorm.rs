//! Per-channel batch normalization: `gamma * (x - mean) / sqrt(var + eps) + beta`.

use serde::{Deserialize, Serialize};

use crate::error::{expect_dim, Error, Result};
use crate::ops::{Meter, NoMeter};
use crate::tensor::Tensor4;

pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

/// Learnable affine parameters plus running statistics for inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BNParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
}

impl BNParams {
    /// `gamma = 1`, `beta = 0`, running statistics `(0, 1)`.
    pub fn identity(channels: usize) -> Self {
        BNParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: DEFAULT_BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        expect_dim("bn beta length", c, self.beta.len())?;
        expect_dim("bn running_mean length", c, self.running_mean.len())?;
        expect_dim("bn running_var length", c, self.running_var.len())?;
        if c == 0 {
            return Err(Error::validation("bn needs at least one channel"));
        }
        if self.running_var.iter().any(|&v| v < 0.0) {
            return Err(Error::validation("bn running_var entries must be >= 0"));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::validation("bn eps must be > 0"));
        }
        Ok(())
    }

    /// Exponential moving average toward the batch statistics.
    pub fn update_running(&mut self, stats: &BatchStats, momentum: f64) {
        for (r, m) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        for (r, v) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (1.0 - momentum) * *r + momentum * v;
        }
    }
}

/// Per-channel mean and population variance used by a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn channel_stats(input: &Tensor4) -> BatchStats {
    let s = input.shape();
    let count = (s.n * s.plane()) as f64;
    let mut mean = vec![0.0; s.c];
    let mut var = vec![0.0; s.c];
    for c in 0..s.c {
        let mut sum = 0.0;
        for n in 0..s.n {
            sum += input.plane(n, c).iter().sum::<f64>();
        }
        let mu = sum / count;
        let mut sq = 0.0;
        for n in 0..s.n {
            sq += input
                .plane(n, c)
                .iter()
                .map(|x| (x - mu) * (x - mu))
                .sum::<f64>();
        }
        mean[c] = mu;
        var[c] = sq / count;
    }
    BatchStats { mean, var }
}

pub fn batchnorm(
    input: &Tensor4,
    params: &BNParams,
    training: bool,
) -> Result<(Tensor4, BatchStats)> {
    batchnorm_metered(input, params, training, &mut NoMeter)
}

/// Normalizes with batch statistics when `training`, running statistics
/// otherwise. Returns the statistics that were used.
///
/// The per-element transform is a fused `x * a + b`, metered as 2 operations.
pub fn batchnorm_metered<M: Meter>(
    input: &Tensor4,
    params: &BNParams,
    training: bool,
    meter: &mut M,
) -> Result<(Tensor4, BatchStats)> {
    params.validate()?;
    let s = input.shape();
    expect_dim("bn channel", params.channels(), s.c)?;
    let stats = if training {
        channel_stats(input)
    } else {
        BatchStats {
            mean: params.running_mean.clone(),
            var: params.running_var.clone(),
        }
    };
    let mut out = input.clone();
    for c in 0..s.c {
        let a = params.gamma[c] / (stats.var[c] + params.eps).sqrt();
        let b = params.beta[c] - stats.mean[c] * a;
        for n in 0..s.n {
            for x in out.plane_mut(n, c) {
                *x = *x * a + b;
                meter.tick(2);
            }
        }
    }
    Ok((out, stats))
}

/// Gradients of the training-mode transform, differentiating through the
/// batch mean and variance. Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batchnorm_grad(
    input: &Tensor4,
    params: &BNParams,
    stats: &BatchStats,
    grad_out: &Tensor4,
) -> Result<(Tensor4, Vec<f64>, Vec<f64>)> {
    let s = input.shape();
    expect_dim("bn channel", params.channels(), s.c)?;
    expect_dim("bn stats length", s.c, stats.mean.len())?;
    grad_out.expect_shape(s, "bn grad_out")?;
    let m = (s.n * s.plane()) as f64;
    let mut gi = Tensor4::zeros(s);
    let mut gg = vec![0.0; s.c];
    let mut gb = vec![0.0; s.c];
    for c in 0..s.c {
        let inv = 1.0 / (stats.var[c] + params.eps).sqrt();
        let mu = stats.mean[c];
        let (mut sum_g, mut sum_gx) = (0.0, 0.0);
        for n in 0..s.n {
            for (x, g) in input.plane(n, c).iter().zip(grad_out.plane(n, c)) {
                sum_g += g;
                sum_gx += g * (x - mu) * inv;
            }
        }
        gg[c] = sum_gx;
        gb[c] = sum_g;
        let k = params.gamma[c] * inv / m;
        for n in 0..s.n {
            let xs = input.plane(n, c);
            let gs = grad_out.plane(n, c);
            for (i, d) in gi.plane_mut(n, c).iter_mut().enumerate() {
                let xhat = (xs[i] - mu) * inv;
                *d = k * (m * gs[i] - sum_g - xhat * sum_gx);
            }
        }
    }
    Ok((gi, gg, gb))
}

/// Gradients of the inference-mode transform, where the statistics are
/// constants.
pub fn batchnorm_eval_grad(
    input: &Tensor4,
    params: &BNParams,
    grad_out: &Tensor4,
) -> Result<(Tensor4, Vec<f64>, Vec<f64>)> {
    let s = input.shape();
    expect_dim("bn channel", params.channels(), s.c)?;
    grad_out.expect_shape(s, "bn grad_out")?;
    let mut gi = Tensor4::zeros(s);
    let mut gg = vec![0.0; s.c];
    let mut gb = vec![0.0; s.c];
    for c in 0..s.c {
        let inv = 1.0 / (params.running_var[c] + params.eps).sqrt();
        let mu = params.running_mean[c];
        for n in 0..s.n {
            let xs = input.plane(n, c);
            let gs = grad_out.plane(n, c);
            for (i, d) in gi.plane_mut(n, c).iter_mut().enumerate() {
                gg[c] += gs[i] * (xs[i] - mu) * inv;
                gb[c] += gs[i];
                *d = gs[i] * params.gamma[c] * inv;
            }
        }
    }
    Ok((gi, gg, gb))
}
