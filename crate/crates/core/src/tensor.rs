//! Dense rank-4 tensors in `(n, c, h, w)` row-major order.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};

/// Dimensions of a [`Tensor4`]: batch, channels, rows, columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of elements in one `(h, w)` plane.
    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub const fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    fn check(&self) -> Result<()> {
        if self.n == 0 || self.c == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::validation(format!(
                "all tensor dimensions must be >= 1, got {self}"
            )));
        }
        Ok(())
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// A dense 64-bit tensor of rank 4.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        shape.check()?;
        if data.len() != shape.len() {
            return Err(Error::validation(format!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.len()
            )));
        }
        Ok(Tensor4 { shape, data })
    }

    /// Panics if any dimension is zero.
    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    /// Panics if any dimension is zero.
    pub fn filled(shape: Shape, value: f64) -> Self {
        shape.check().expect("invalid tensor shape");
        Tensor4 {
            shape,
            data: vec![value; shape.len()],
        }
    }

    /// Builds a tensor by evaluating `f(n, c, h, w)` at every index.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        shape.check().expect("invalid tensor shape");
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor4 { shape, data }
    }

    /// Entries drawn uniformly from `[lo, hi)`.
    pub fn random_uniform<R: Rng + ?Sized>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_, _, _, _| rng.random_range(lo..hi))
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.shape.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f64) {
        let i = self.shape.index(n, c, h, w);
        self.data[i] = v;
    }

    /// Contiguous `(h, w)` plane for sample `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Tensor4 {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Elementwise combination of two equally shaped tensors.
    pub fn zip_map(&self, other: &Tensor4, mut f: impl FnMut(f64, f64) -> f64) -> Result<Tensor4> {
        self.expect_shape(other.shape, "tensor")?;
        Ok(Tensor4 {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor4) -> Result<Tensor4> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn scale(&self, k: f64) -> Tensor4 {
        self.map(|x| x * k)
    }

    /// Swaps the channel axis with the flattened spatial axes:
    /// `(n, c, h, w)` becomes `(n, h*w, c, 1)`.
    pub fn channels_to_positions(&self) -> Tensor4 {
        let s = self.shape;
        let out = Shape::new(s.n, s.plane(), s.c, 1);
        let mut data = vec![0.0; s.len()];
        for n in 0..s.n {
            for c in 0..s.c {
                for p in 0..s.plane() {
                    data[out.index(n, p, c, 0)] = self.data[(n * s.c + c) * s.plane() + p];
                }
            }
        }
        Tensor4 { shape: out, data }
    }

    /// Inverse of [`channels_to_positions`](Self::channels_to_positions) for
    /// a target spatial size `(h, w)`.
    pub fn positions_to_channels(&self, h: usize, w: usize) -> Result<Tensor4> {
        let s = self.shape;
        if s.c != h * w || s.w != 1 {
            return Err(Error::validation(format!(
                "cannot restore spatial size {h}x{w} from {s}"
            )));
        }
        let out = Shape::new(s.n, s.h, h, w);
        let mut data = vec![0.0; s.len()];
        for n in 0..s.n {
            for p in 0..s.c {
                for c in 0..s.h {
                    data[(n * out.c + c) * out.plane() + p] = self.data[s.index(n, p, c, 0)];
                }
            }
        }
        Ok(Tensor4 { shape: out, data })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn expect_shape(&self, expected: Shape, what: &str) -> Result<()> {
        if self.shape != expected {
            let dim = if self.shape.n != expected.n {
                "batch"
            } else if self.shape.c != expected.c {
                "channel"
            } else if self.shape.h != expected.h {
                "height"
            } else {
                "width"
            };
            return Err(Error::validation(format!(
                "{what} {dim} dimension mismatch: expected {expected}, got {}",
                self.shape
            )));
        }
        Ok(())
    }

    /// Fails with the location of the first NaN or infinity, if any.
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if let Some(i) = self.data.iter().position(|x| !x.is_finite()) {
            let s = self.shape;
            let w = i % s.w;
            let h = (i / s.w) % s.h;
            let c = (i / s.plane()) % s.c;
            let n = i / (s.c * s.plane());
            return Err(Error::NonFinite(format!(
                "{what}[{n}, {c}, {h}, {w}] = {}",
                self.data[i]
            )));
        }
        Ok(())
    }
}
