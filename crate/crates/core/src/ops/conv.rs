//! Direct 2-D cross-correlation over explicitly zero-padded input.

use serde::{Deserialize, Serialize};

use crate::error::{expect_dim, Error, Result};
use crate::ops::{Meter, NoMeter};
use crate::tensor::{Shape, Tensor4};

/// Geometry of a square-kernel convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(c_in: usize, c_out: usize, k: usize, stride: usize, padding: usize) -> Self {
        ConvSpec {
            c_in,
            c_out,
            k,
            stride,
            padding,
        }
    }

    /// Stride 1 with padding `(k - 1) / 2`.
    pub fn same(c_in: usize, c_out: usize, k: usize) -> Self {
        Self::new(c_in, c_out, k, 1, (k - 1) / 2)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("c_in", self.c_in),
            ("c_out", self.c_out),
            ("k", self.k),
            ("stride", self.stride),
        ] {
            if v == 0 {
                return Err(Error::validation(format!("conv {name} must be >= 1")));
            }
        }
        Ok(())
    }

    /// Output size along one axis: `floor((len + 2p - k) / s) + 1`.
    pub fn out_len(&self, len: usize) -> Result<usize> {
        let padded = len + 2 * self.padding;
        if padded < self.k {
            return Err(Error::validation(format!(
                "kernel size {} exceeds padded input extent {padded}",
                self.k
            )));
        }
        Ok((padded - self.k) / self.stride + 1)
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((self.out_len(h)?, self.out_len(w)?))
    }

    pub fn kernel_shape(&self) -> Shape {
        Shape::new(self.c_out, self.c_in, self.k, self.k)
    }
}

/// Gradients of [`conv2d`] with respect to each of its arguments.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor4,
    pub kernel: Tensor4,
    pub bias: Vec<f64>,
}

fn validate_args(input: &Tensor4, kernel: &Tensor4, bias: &[f64], spec: &ConvSpec) -> Result<()> {
    spec.validate()?;
    expect_dim("conv input channel", spec.c_in, input.shape().c)?;
    kernel.expect_shape(spec.kernel_shape(), "conv kernel")?;
    expect_dim("conv bias length", spec.c_out, bias.len())?;
    Ok(())
}

fn pad(input: &Tensor4, p: usize) -> Tensor4 {
    if p == 0 {
        return input.clone();
    }
    let s = input.shape();
    let mut out = Tensor4::zeros(Shape::new(s.n, s.c, s.h + 2 * p, s.w + 2 * p));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = input.plane(n, c);
            let dst = out.plane_mut(n, c);
            let pw = s.w + 2 * p;
            for h in 0..s.h {
                dst[(h + p) * pw + p..(h + p) * pw + p + s.w]
                    .copy_from_slice(&src[h * s.w..(h + 1) * s.w]);
            }
        }
    }
    out
}

pub fn conv2d(input: &Tensor4, kernel: &Tensor4, bias: &[f64], spec: &ConvSpec) -> Result<Tensor4> {
    conv2d_metered(input, kernel, bias, spec, &mut NoMeter)
}

/// Cross-correlation (no kernel flip) with zero padding.
///
/// Every kernel tap is evaluated against the padded input, so the meter sees
/// exactly `c_in * c_out * k^2 * h_out * w_out` multiply-accumulates. Bias
/// adds are not ticked.
pub fn conv2d_metered<M: Meter>(
    input: &Tensor4,
    kernel: &Tensor4,
    bias: &[f64],
    spec: &ConvSpec,
    meter: &mut M,
) -> Result<Tensor4> {
    validate_args(input, kernel, bias, spec)?;
    let s = input.shape();
    let (ho, wo) = spec.out_hw(s.h, s.w)?;
    let xp = pad(input, spec.padding);
    let pw = xp.shape().w;
    let (k, st) = (spec.k, spec.stride);
    let mut out = Tensor4::zeros(Shape::new(s.n, spec.c_out, ho, wo));
    for n in 0..s.n {
        for co in 0..spec.c_out {
            let plane = out.plane_mut(n, co);
            plane.fill(bias[co]);
            for ci in 0..spec.c_in {
                let src = xp.plane(n, ci);
                for kh in 0..k {
                    for kw in 0..k {
                        let wv = kernel.get(co, ci, kh, kw);
                        for oh in 0..ho {
                            let row = &src[(oh * st + kh) * pw..];
                            let dst = &mut plane[oh * wo..(oh + 1) * wo];
                            for (ow, d) in dst.iter_mut().enumerate() {
                                *d += wv * row[ow * st + kw];
                                meter.tick(1);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact gradients of [`conv2d`] for cotangent `grad_out`.
pub fn conv2d_grad(
    input: &Tensor4,
    kernel: &Tensor4,
    spec: &ConvSpec,
    grad_out: &Tensor4,
) -> Result<ConvGrads> {
    spec.validate()?;
    expect_dim("conv input channel", spec.c_in, input.shape().c)?;
    kernel.expect_shape(spec.kernel_shape(), "conv kernel")?;
    let s = input.shape();
    let (ho, wo) = spec.out_hw(s.h, s.w)?;
    grad_out.expect_shape(Shape::new(s.n, spec.c_out, ho, wo), "conv grad_out")?;

    let xp = pad(input, spec.padding);
    let ps = xp.shape();
    let (k, st, p) = (spec.k, spec.stride, spec.padding);
    let mut gxp = Tensor4::zeros(ps);
    let mut gk = Tensor4::zeros(spec.kernel_shape());
    let mut gb = vec![0.0; spec.c_out];

    for n in 0..s.n {
        for co in 0..spec.c_out {
            let g = grad_out.plane(n, co);
            gb[co] += g.iter().sum::<f64>();
            for ci in 0..spec.c_in {
                let src = xp.plane(n, ci);
                for kh in 0..k {
                    for kw in 0..k {
                        let wv = kernel.get(co, ci, kh, kw);
                        let mut acc = 0.0;
                        let dst = gxp.plane_mut(n, ci);
                        for oh in 0..ho {
                            let base = (oh * st + kh) * ps.w + kw;
                            for ow in 0..wo {
                                let gv = g[oh * wo + ow];
                                acc += gv * src[base + ow * st];
                                dst[base + ow * st] += gv * wv;
                            }
                        }
                        let i = spec.kernel_shape().index(co, ci, kh, kw);
                        gk.data_mut()[i] += acc;
                    }
                }
            }
        }
    }

    let gi = if p == 0 {
        gxp
    } else {
        Tensor4::from_fn(s, |n, c, h, w| gxp.get(n, c, h + p, w + p))
    };
    Ok(ConvGrads {
        input: gi,
        kernel: gk,
        bias: gb,
    })
}
