//! Small dense building blocks shared by the model stages.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::flops;

/// Row-major token features: one row per token, one column per channel.
pub type FeatureMatrix = Array2<f64>;

/// `y = x W + b` with `W` stored as (in, out).
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    /// Uniform(-1/sqrt(in), 1/sqrt(in)) weights and zero bias, rounded to f32.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            weight: uniform((input, output), bound, rng),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape(
                "linear input",
                format!("{} columns", self.input_dim()),
                format!("{} columns", x.ncols()),
            ));
        }
        flops::add((x.nrows() * self.input_dim() * self.output_dim()) as u64);
        Ok(x.dot(&self.weight) + &self.bias)
    }

    pub fn forward_row(&self, x: ArrayView1<f64>) -> Array1<f64> {
        flops::add((self.input_dim() * self.output_dim()) as u64);
        x.dot(&self.weight) + &self.bias
    }
}

pub(crate) fn uniform<R: Rng + ?Sized>(shape: (usize, usize), bound: f64, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || round_f32(rng.random_range(-bound..bound)))
}

/// Round to the nearest f32 so weights survive the on-disk format unchanged.
pub fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub const RMS_EPS: f64 = 1e-6;

/// Row-wise RMS normalisation with a per-channel scale.
pub fn rms_norm(x: &Array2<f64>, scale: &Array1<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        row.iter_mut().zip(scale.iter()).for_each(|(v, s)| *v *= inv * s);
    }
    flops::add(2 * x.len() as u64);
    out
}

/// Numerically stable softmax of a slice, in place.
pub fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}
