//! Central finite-difference verification of analytic gradients.
//!
//! The scalar probed is `L(x, theta) = sum(r * f(x; theta))` for a seeded random
//! cotangent `r`, so the analytic side is one `backward(r)` call.

use rand::seq::index::sample;
use rand::Rng;
use serde::Serialize;

use crate::blocks::{FasterNetSpec, PConvSpec};
use crate::error::{Error, Result};
use crate::init::seeded_rng;
use crate::layers::{
    BatchNormLayer, Conv2dLayer, FasterNetLayer, Module, NamChannelLayer, NamSpatialLayer,
    PConvLayer, PwConvLayer, ReluLayer,
};
use crate::nam::{NamChannelParams, NamSpatialParams};
use crate::ops::{BNParams, ConvSpec, Meter};
use crate::tensor::{Shape, Tensor4};

/// Finite-difference step on 64-bit values.
pub const FD_STEP: f64 = 1e-5;
/// Below this magnitude the absolute error is reported instead of the relative one.
pub const REL_FLOOR: f64 = 1e-8;
/// Coordinates beyond this count are subsampled.
pub const MAX_CHECKED: usize = 400;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradReport {
    pub unit_name: String,
    pub max_rel_error: f64,
    pub param_count_checked: usize,
    pub passed: bool,
}

/// Relative error `|a - b| / max(|a|, |b|)`, or `|a - b|` when both are tiny.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    let denom = analytic.abs().max(numeric.abs());
    if denom < REL_FLOOR {
        diff
    } else {
        diff / denom
    }
}

#[derive(Debug, Clone, Copy)]
enum Coord {
    Input(usize),
    Param(usize),
}

fn read_param<U: Module>(unit: &mut U, index: usize) -> f64 {
    let mut offset = 0;
    let mut out = 0.0;
    unit.visit_params(&mut |v, _| {
        if (offset..offset + v.len()).contains(&index) {
            out = v[index - offset];
        }
        offset += v.len();
    });
    out
}

fn write_param<U: Module>(unit: &mut U, index: usize, value: f64) {
    let mut offset = 0;
    unit.visit_params(&mut |v, _| {
        if (offset..offset + v.len()).contains(&index) {
            v[index - offset] = value;
        }
        offset += v.len();
    });
}

fn param_grads<U: Module>(unit: &mut U) -> Vec<f64> {
    let mut out = Vec::new();
    unit.visit_params(&mut |_, g| out.extend_from_slice(g));
    out
}

fn probe<U: Module>(unit: &mut U, x: &Tensor4, r: &Tensor4) -> Result<f64> {
    let y = unit.forward(x, true)?;
    y.ensure_finite("forward output")?;
    Ok(y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum())
}

/// Checks `unit` on a seeded random input of `input_shape` in training mode.
pub fn gradcheck<U: Module>(
    name: &str,
    unit: &mut U,
    input_shape: Shape,
    seed: u64,
    tolerance: f64,
) -> Result<GradReport> {
    let mut rng = seeded_rng(seed);
    let x = Tensor4::random_uniform(input_shape, -1.0, 1.0, &mut rng);
    gradcheck_at(name, unit, &x, &mut rng, tolerance)
}

/// Checks `unit` at a caller-supplied input.
pub fn gradcheck_at<U: Module, R: Rng>(
    name: &str,
    unit: &mut U,
    input: &Tensor4,
    rng: &mut R,
    tolerance: f64,
) -> Result<GradReport> {
    if tolerance.is_nan() || tolerance <= 0.0 {
        return Err(Error::validation("gradcheck tolerance must be > 0"));
    }
    input.ensure_finite("gradcheck input")?;
    unit.zero_grad();
    let y = unit.forward(input, true)?;
    y.ensure_finite("forward output")?;
    let r = Tensor4::random_uniform(y.shape(), -1.0, 1.0, rng);
    let grad_input = unit.backward(&r)?;
    grad_input.ensure_finite("input gradient")?;
    let grad_params = param_grads(unit);
    if let Some(i) = grad_params.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("parameter gradient #{i}")));
    }

    let n_in = input.data().len();
    let total = n_in + grad_params.len();
    let picks: Vec<usize> = if total <= MAX_CHECKED {
        (0..total).collect()
    } else {
        let mut v = sample(rng, total, MAX_CHECKED).into_vec();
        v.sort_unstable();
        v
    };

    let mut x = input.clone();
    let mut max_err: f64 = 0.0;
    let mut params_checked = 0;
    for &p in &picks {
        let coord = if p < n_in {
            Coord::Input(p)
        } else {
            Coord::Param(p - n_in)
        };
        let (analytic, numeric) = match coord {
            Coord::Input(i) => {
                let orig = x.data()[i];
                x.data_mut()[i] = orig + FD_STEP;
                let lp = probe(unit, &x, &r)?;
                x.data_mut()[i] = orig - FD_STEP;
                let lm = probe(unit, &x, &r)?;
                x.data_mut()[i] = orig;
                (grad_input.data()[i], (lp - lm) / (2.0 * FD_STEP))
            }
            Coord::Param(j) => {
                params_checked += 1;
                let orig = read_param(unit, j);
                write_param(unit, j, orig + FD_STEP);
                let lp = probe(unit, &x, &r)?;
                write_param(unit, j, orig - FD_STEP);
                let lm = probe(unit, &x, &r)?;
                write_param(unit, j, orig);
                (grad_params[j], (lp - lm) / (2.0 * FD_STEP))
            }
        };
        if !numeric.is_finite() {
            return Err(Error::NonFinite(format!("finite difference at {coord:?}")));
        }
        max_err = max_err.max(relative_error(analytic, numeric));
    }
    Ok(GradReport {
        unit_name: name.to_string(),
        max_rel_error: max_err,
        param_count_checked: params_checked,
        passed: max_err <= tolerance,
    })
}

/// Random BN parameters with scales bounded away from zero, so the attention
/// weights stay differentiable.
fn random_bn<R: Rng>(channels: usize, rng: &mut R) -> BNParams {
    let mut bn = BNParams::identity(channels);
    for g in &mut bn.gamma {
        let mag = rng.random_range(0.5..1.5);
        *g = if rng.random_bool(0.5) { mag } else { -mag };
    }
    for b in &mut bn.beta {
        *b = rng.random_range(-0.5..0.5);
    }
    bn
}

/// A small chain of layers checked as one unit.
pub struct Composite3 {
    pub conv: Conv2dLayer,
    pub block: FasterNetLayer,
    pub attention: NamChannelLayer,
}

impl Module for Composite3 {
    fn forward_metered<M: Meter>(
        &mut self,
        x: &Tensor4,
        training: bool,
        m: &mut M,
    ) -> Result<Tensor4> {
        let y = self.conv.forward_metered(x, training, m)?;
        let y = self.block.forward_metered(&y, training, m)?;
        self.attention.forward_metered(&y, training, m)
    }

    fn backward(&mut self, g: &Tensor4) -> Result<Tensor4> {
        let g = self.attention.backward(g)?;
        let g = self.block.backward(&g)?;
        self.conv.backward(&g)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        self.conv.visit_params(f);
        self.block.visit_params(f);
        self.attention.visit_params(f);
    }
}

/// Runs the standard gradient suite: every differentiable layer kind plus a
/// conv -> FasterNet -> NAM composite.
pub fn standard_suite(seed: u64, tolerance: f64) -> Result<Vec<GradReport>> {
    let mut rng = seeded_rng(seed);
    let mut reports = Vec::new();

    let mut conv = Conv2dLayer::init(ConvSpec::new(2, 3, 3, 1, 1), &mut rng);
    reports.push(gradcheck(
        "conv2d",
        &mut conv,
        Shape::new(1, 2, 5, 5),
        seed,
        tolerance,
    )?);

    let mut strided = Conv2dLayer::init(ConvSpec::new(2, 2, 3, 2, 1), &mut rng);
    reports.push(gradcheck(
        "conv2d_stride2",
        &mut strided,
        Shape::new(2, 2, 5, 5),
        seed,
        tolerance,
    )?);

    let mut bn = BatchNormLayer::new(random_bn(3, &mut rng));
    reports.push(gradcheck(
        "batchnorm",
        &mut bn,
        Shape::new(2, 3, 4, 4),
        seed,
        tolerance,
    )?);

    let mut relu = ReluLayer::default();
    reports.push(gradcheck(
        "relu",
        &mut relu,
        Shape::new(1, 2, 3, 3),
        seed,
        tolerance,
    )?);

    let mut pw = PwConvLayer::init(4, 3, true, &mut rng);
    reports.push(gradcheck(
        "pwconv",
        &mut pw,
        Shape::new(2, 4, 3, 3),
        seed,
        tolerance,
    )?);

    let mut pc = PConvLayer::init(PConvSpec::new(4, 2, 3)?, &mut rng);
    reports.push(gradcheck(
        "pconv",
        &mut pc,
        Shape::new(1, 4, 5, 5),
        seed,
        tolerance,
    )?);

    let mut block = FasterNetLayer::init(FasterNetSpec::new(4, 2, 3, 2)?, &mut rng);
    block.params.bn1 = random_bn(8, &mut rng);
    reports.push(gradcheck(
        "fasternet_block",
        &mut block,
        Shape::new(2, 4, 4, 4),
        seed,
        tolerance,
    )?);

    let mut ch = NamChannelLayer::new(NamChannelParams {
        bn: random_bn(3, &mut rng),
    });
    reports.push(gradcheck(
        "nam_channel",
        &mut ch,
        Shape::new(2, 3, 3, 3),
        seed,
        tolerance,
    )?);

    let mut sp = NamSpatialLayer::new(NamSpatialParams {
        h: 3,
        w: 3,
        bn: random_bn(9, &mut rng),
    });
    reports.push(gradcheck(
        "nam_spatial",
        &mut sp,
        Shape::new(2, 3, 3, 3),
        seed,
        tolerance,
    )?);

    let mut composite = Composite3 {
        conv: Conv2dLayer::init(ConvSpec::same(2, 4, 3), &mut rng),
        block: FasterNetLayer::init(FasterNetSpec::new(4, 2, 3, 2)?, &mut rng),
        attention: NamChannelLayer::new(NamChannelParams {
            bn: random_bn(4, &mut rng),
        }),
    };
    reports.push(gradcheck(
        "composite_conv_fasternet_nam",
        &mut composite,
        Shape::new(2, 2, 4, 4),
        seed,
        tolerance,
    )?);

    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `y = w * x` elementwise with one scalar weight.
    struct ScaleUnit {
        w: Vec<f64>,
        gw: Vec<f64>,
        x: Option<Tensor4>,
        corrupt: f64,
    }

    impl Module for ScaleUnit {
        fn forward_metered<M: Meter>(
            &mut self,
            x: &Tensor4,
            _: bool,
            _: &mut M,
        ) -> Result<Tensor4> {
            self.x = Some(x.clone());
            Ok(x.scale(self.w[0]))
        }

        fn backward(&mut self, g: &Tensor4) -> Result<Tensor4> {
            let x = self.x.as_ref().unwrap();
            self.gw[0] += self.corrupt
                * x.data()
                    .iter()
                    .zip(g.data())
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            Ok(g.scale(self.w[0] * self.corrupt))
        }

        fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
            f(&mut self.w, &mut self.gw);
        }
    }

    fn scale_unit(corrupt: f64) -> ScaleUnit {
        ScaleUnit {
            w: vec![0.7],
            gw: vec![0.0],
            x: None,
            corrupt,
        }
    }

    #[test]
    fn linear_unit_matches_to_rounding() {
        let rep = gradcheck(
            "linear",
            &mut scale_unit(1.0),
            Shape::new(1, 1, 2, 3),
            1,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed);
        assert!(rep.max_rel_error < 1e-9, "{}", rep.max_rel_error);
        assert_eq!(rep.param_count_checked, 1);
    }

    #[test]
    fn corrupted_backward_is_detected() {
        let rep = gradcheck(
            "corrupt",
            &mut scale_unit(2.0),
            Shape::new(1, 1, 2, 3),
            1,
            1e-4,
        )
        .unwrap();
        assert!(!rep.passed);
        assert!(rep.max_rel_error > 0.4);
    }

    #[test]
    fn non_finite_forward_is_a_hard_failure() {
        let mut u = scale_unit(1.0);
        u.w[0] = f64::INFINITY;
        let err = gradcheck("inf", &mut u, Shape::new(1, 1, 1, 2), 1, 1e-4).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn rejects_non_positive_tolerance() {
        assert!(gradcheck("t", &mut scale_unit(1.0), Shape::new(1, 1, 1, 1), 1, 0.0).is_err());
    }

    #[test]
    fn relative_error_floor() {
        assert!((relative_error(1e-10, 3e-10) - 2e-10).abs() < 1e-24);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }

    #[test]
    fn large_units_are_subsampled() {
        let mut conv = Conv2dLayer::init(ConvSpec::same(4, 4, 3), &mut seeded_rng(2));
        let rep = gradcheck("big", &mut conv, Shape::new(2, 4, 8, 8), 3, 1e-4).unwrap();
        assert!(rep.passed, "{rep:?}");
        assert!(rep.param_count_checked > 0 && rep.param_count_checked < 148);
    }
}
