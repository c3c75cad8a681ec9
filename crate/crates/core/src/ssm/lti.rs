use crate::error::{Error, Result};

/// Below this `|a * delta|` the input factor uses its Taylor series.
pub const SERIES_THRESHOLD: f64 = 1e-4;

/// Continuous system `h' = A h + B x` with diagonal `A`.
#[derive(Clone, Debug, PartialEq)]
pub struct LtiSystem {
    /// Diagonal of `A`.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteLti {
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
}

/// `(exp(a*delta), (exp(a*delta) - 1) / a)` for one diagonal entry. The
/// second factor tends to `delta` as `a -> 0`.
#[inline]
pub fn zoh_coefficients(a: f64, delta: f64) -> (f64, f64) {
    let s = a * delta;
    let a_bar = s.exp();
    let factor = if s.abs() < SERIES_THRESHOLD {
        delta * (1.0 + s * (0.5 + s * (1.0 / 6.0 + s / 24.0)))
    } else {
        s.exp_m1() / a
    };
    (a_bar, factor)
}

pub fn zoh_discretize(sys: &LtiSystem) -> Result<DiscreteLti> {
    if sys.a.len() != sys.b.len() {
        return Err(Error::shape("zoh input matrix", sys.a.len(), sys.b.len()));
    }
    if !(sys.delta > 0.0) || !sys.delta.is_finite() {
        return Err(Error::InvalidInput(format!("zoh: delta must be > 0, got {}", sys.delta)));
    }
    let (a_bar, b_bar) = sys
        .a
        .iter()
        .zip(&sys.b)
        .map(|(&a, &b)| {
            let (ab, f) = zoh_coefficients(a, sys.delta);
            (ab, f * b)
        })
        .unzip();
    Ok(DiscreteLti { a_bar, b_bar })
}

/// Impulse response `K[i] = C A_bar^i B_bar`.
pub fn lti_kernel(sys: &DiscreteLti, c: &[f64], len: usize) -> Vec<f64> {
    let mut state = sys.b_bar.clone();
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        out.push(state.iter().zip(c).map(|(s, c)| s * c).sum());
        state.iter_mut().zip(&sys.a_bar).for_each(|(s, a)| *s *= a);
    }
    out
}

/// Recurrent evaluation from `h_0 = 0`: `h_{k+1} = A_bar h_k + B_bar x_k`,
/// `y_k = C h_{k+1}`.
pub fn lti_scan(sys: &DiscreteLti, c: &[f64], x: &[f64]) -> Vec<f64> {
    let mut h = vec![0.0; sys.a_bar.len()];
    x.iter()
        .map(|&xk| {
            let mut y = 0.0;
            for n in 0..h.len() {
                h[n] = sys.a_bar[n] * h[n] + sys.b_bar[n] * xk;
                y += c[n] * h[n];
            }
            y
        })
        .collect()
}

/// Causal convolution `y_k = sum_{i<=k} K[i] x_{k-i}`.
pub fn causal_convolve(x: &[f64], kernel: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|k| (0..=k.min(kernel.len().saturating_sub(1))).map(|i| kernel[i] * x[k - i]).sum())
        .collect()
}
