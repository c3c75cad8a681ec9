use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use super::lti::{zoh_coefficients, SERIES_THRESHOLD};
use crate::error::{Error, Result};
use crate::flops;
use crate::nn::{round_f32, sigmoid, softplus, softplus_inv, FeatureMatrix, Linear};

/// Block length of [`selective_scan_chunked`].
pub const CHUNK: usize = 16;

/// Input-dependent scan parameters for `C` channels with `d` states each.
///
/// Per token `x` (a row of `C` features):
/// `B(x) = x W_B + b_B`, `C(x) = x W_C + b_C` (both shared across channels),
/// `delta(x) = softplus(x W_delta + b_delta)` (one step per channel), and the
/// state matrix is `A[c, n] = -exp(a_log[c, n])`.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectiveParams {
    pub a_log: Array2<f64>,
    pub b_proj: Linear,
    pub c_proj: Linear,
    pub delta_proj: Linear,
}

impl SelectiveParams {
    pub fn zeros(channels: usize, state: usize) -> Self {
        Self {
            a_log: Array2::zeros((channels, state)),
            b_proj: Linear::zeros(channels, state),
            c_proj: Linear::zeros(channels, state),
            delta_proj: Linear::zeros(channels, channels),
        }
    }

    /// `a_log[c, n] = ln(n + 1)`, step bias so that `softplus` lands
    /// log-uniformly in [1e-3, 1e-1], uniform projections.
    pub fn init<R: Rng + ?Sized>(channels: usize, state: usize, rng: &mut R) -> Self {
        let a_log = Array2::from_shape_fn((channels, state), |(_, n)| round_f32(((n + 1) as f64).ln()));
        let b_proj = Linear::init(channels, state, rng);
        let c_proj = Linear::init(channels, state, rng);
        let mut delta_proj = Linear::init(channels, channels, rng);
        let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
        delta_proj
            .bias
            .iter_mut()
            .for_each(|b| *b = round_f32(softplus_inv(rng.random_range(lo..hi).exp())));
        Self {
            a_log,
            b_proj,
            c_proj,
            delta_proj,
        }
    }

    pub fn channels(&self) -> usize {
        self.a_log.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.a_log.ncols()
    }

    pub fn check(&self) -> Result<()> {
        let (c, d) = self.a_log.dim();
        let ok = self.b_proj.weight.dim() == (c, d)
            && self.b_proj.bias.len() == d
            && self.c_proj.weight.dim() == (c, d)
            && self.c_proj.bias.len() == d
            && self.delta_proj.weight.dim() == (c, c)
            && self.delta_proj.bias.len() == c;
        if !ok {
            return Err(Error::shape(
                "selective scan parameters",
                format!("channels {c}, state {d}"),
                format!(
                    "B {:?}, C {:?}, delta {:?}",
                    self.b_proj.weight.dim(),
                    self.c_proj.weight.dim(),
                    self.delta_proj.weight.dim()
                ),
            ));
        }
        Ok(())
    }

    fn state_matrix(&self) -> Array2<f64> {
        self.a_log.mapv(|v| -v.exp())
    }

    /// Visit every tensor with a stable name, for serialisation.
    pub fn tensors(&self) -> Vec<(&'static str, &Array2<f64>)> {
        vec![
            ("a_log", &self.a_log),
            ("b_proj.weight", &self.b_proj.weight),
            ("c_proj.weight", &self.c_proj.weight),
            ("delta_proj.weight", &self.delta_proj.weight),
        ]
    }

    pub fn biases(&self) -> Vec<(&'static str, &Array1<f64>)> {
        vec![
            ("b_proj.bias", &self.b_proj.bias),
            ("c_proj.bias", &self.c_proj.bias),
            ("delta_proj.bias", &self.delta_proj.bias),
        ]
    }

    /// Flattened view of every parameter, in a fixed order.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (_, t) in self.tensors() {
            out.extend(t.iter());
        }
        for (_, b) in self.biases() {
            out.extend(b.iter());
        }
        out
    }

    /// Inverse of [`SelectiveParams::flat`].
    pub fn set_flat(&mut self, v: &[f64]) {
        let mut it = v.iter().copied();
        for t in [
            &mut self.a_log,
            &mut self.b_proj.weight,
            &mut self.c_proj.weight,
            &mut self.delta_proj.weight,
        ] {
            t.iter_mut().for_each(|x| *x = it.next().expect("flat length"));
        }
        for b in [
            &mut self.b_proj.bias,
            &mut self.c_proj.bias,
            &mut self.delta_proj.bias,
        ] {
            b.iter_mut().for_each(|x| *x = it.next().expect("flat length"));
        }
    }
}

/// Analytic MAC count of one [`selective_scan`] call.
pub fn selective_scan_macs(rows: usize, channels: usize, state: usize) -> u64 {
    let proj = rows * channels * (2 * state + channels);
    let recur = 3 * rows * channels * state;
    (proj + recur) as u64
}

struct Projected {
    b: Array2<f64>,
    c: Array2<f64>,
    pre_delta: Array2<f64>,
    delta: Array2<f64>,
}

fn project(p: &SelectiveParams, x: &FeatureMatrix) -> Result<Projected> {
    p.check()?;
    if x.ncols() != p.channels() {
        return Err(Error::shape("selective scan input", p.channels(), x.ncols()));
    }
    if x.nrows() == 0 {
        return Err(Error::InvalidInput("selective scan: need at least one token".into()));
    }
    let b = p.b_proj.forward(x)?;
    let c = p.c_proj.forward(x)?;
    let pre_delta = p.delta_proj.forward(x)?;
    let delta = pre_delta.mapv(softplus);
    Ok(Projected { b, c, pre_delta, delta })
}

fn check_row(y: ndarray::ArrayView1<f64>, h: &Array2<f64>, token: usize) -> Result<()> {
    if y.iter().all(|v| v.is_finite()) && h.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericalOverflow { token })
    }
}

/// Sequential selective scan from `h_0 = 0`. For each channel `c`:
/// `h_{k+1} = A_bar(x_k) h_k + B_bar(x_k) x_k[c]`, `y_k[c] = C(x_k) . h_{k+1}`,
/// with `A_bar`, `B_bar` the zero-order hold of `A[c]` at step `delta_c(x_k)`.
pub fn selective_scan(p: &SelectiveParams, x: &FeatureMatrix) -> Result<FeatureMatrix> {
    let proj = project(p, x)?;
    let a = p.state_matrix();
    let (rows, channels) = x.dim();
    let state = p.state_dim();
    let mut h = Array2::<f64>::zeros((channels, state));
    let mut y = Array2::<f64>::zeros((rows, channels));
    for k in 0..rows {
        for c in 0..channels {
            let dt = proj.delta[[k, c]];
            let u = x[[k, c]];
            let mut acc = 0.0;
            for n in 0..state {
                let (a_bar, f) = zoh_coefficients(a[[c, n]], dt);
                let hn = a_bar * h[[c, n]] + f * proj.b[[k, n]] * u;
                h[[c, n]] = hn;
                acc += proj.c[[k, n]] * hn;
            }
            y[[k, c]] = acc;
        }
        check_row(y.row(k), &h, k)?;
    }
    flops::add(3 * (rows * channels * state) as u64);
    Ok(y)
}

/// Blocked evaluation: inside each block of [`CHUNK`] tokens the scan runs
/// from a zero state, and the state carried in from earlier blocks is added
/// back through the cumulative decay of the block.
pub fn selective_scan_chunked(p: &SelectiveParams, x: &FeatureMatrix) -> Result<FeatureMatrix> {
    let proj = project(p, x)?;
    let a = p.state_matrix();
    let (rows, channels) = x.dim();
    let state = p.state_dim();
    let mut carry = Array2::<f64>::zeros((channels, state));
    let mut y = Array2::<f64>::zeros((rows, channels));
    let mut local = Array2::<f64>::zeros((channels, state));
    let mut decay = Array2::<f64>::zeros((channels, state));
    let mut start = 0;
    while start < rows {
        let end = (start + CHUNK).min(rows);
        local.fill(0.0);
        decay.fill(1.0);
        for k in start..end {
            for c in 0..channels {
                let dt = proj.delta[[k, c]];
                let u = x[[k, c]];
                let mut acc_local = 0.0;
                let mut acc_carry = 0.0;
                for n in 0..state {
                    let (a_bar, f) = zoh_coefficients(a[[c, n]], dt);
                    local[[c, n]] = a_bar * local[[c, n]] + f * proj.b[[k, n]] * u;
                    decay[[c, n]] *= a_bar;
                    acc_local += proj.c[[k, n]] * local[[c, n]];
                    acc_carry += proj.c[[k, n]] * decay[[c, n]] * carry[[c, n]];
                }
                y[[k, c]] = acc_local + acc_carry;
            }
            if y.row(k).iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericalOverflow { token: k });
            }
        }
        carry.zip_mut_with(&decay, |cv, d| *cv *= d);
        carry += &local;
        if carry.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalOverflow { token: end - 1 });
        }
        start = end;
    }
    Ok(y)
}

/// Reverse-mode gradients of `sum(upstream * selective_scan(p, x))` with
/// respect to `x` and every parameter (returned in a [`SelectiveParams`]).
pub fn selective_scan_backward(
    p: &SelectiveParams,
    x: &FeatureMatrix,
    upstream: &FeatureMatrix,
) -> Result<(FeatureMatrix, SelectiveParams)> {
    if upstream.dim() != x.dim() {
        return Err(Error::shape(
            "selective scan upstream gradient",
            format!("{:?}", x.dim()),
            format!("{:?}", upstream.dim()),
        ));
    }
    let proj = project(p, x)?;
    let a = p.state_matrix();
    let (rows, channels) = x.dim();
    let state = p.state_dim();

    // Forward pass, keeping every state h_1..h_rows (index k holds h_{k+1}).
    let mut states = Vec::with_capacity(rows);
    let mut h = Array2::<f64>::zeros((channels, state));
    for k in 0..rows {
        for c in 0..channels {
            for n in 0..state {
                let (a_bar, f) = zoh_coefficients(a[[c, n]], proj.delta[[k, c]]);
                h[[c, n]] = a_bar * h[[c, n]] + f * proj.b[[k, n]] * x[[k, c]];
            }
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalOverflow { token: k });
        }
        states.push(h.clone());
    }

    let mut gx = Array2::<f64>::zeros((rows, channels));
    let mut g_a = Array2::<f64>::zeros((channels, state));
    let mut g_b = Array2::<f64>::zeros((rows, state));
    let mut g_c = Array2::<f64>::zeros((rows, state));
    let mut g_pre = Array2::<f64>::zeros((rows, channels));
    let mut gh = Array2::<f64>::zeros((channels, state));
    let zero = Array2::<f64>::zeros((channels, state));

    for k in (0..rows).rev() {
        let h_next = &states[k];
        let h_prev = if k == 0 { &zero } else { &states[k - 1] };
        for c in 0..channels {
            let dt = proj.delta[[k, c]];
            let u = x[[k, c]];
            let gy = upstream[[k, c]];
            let mut g_dt = 0.0;
            for n in 0..state {
                let an = a[[c, n]];
                let (a_bar, f) = zoh_coefficients(an, dt);
                let bn = proj.b[[k, n]];
                g_c[[k, n]] += gy * h_next[[c, n]];
                let g = gh[[c, n]] + gy * proj.c[[k, n]];
                let g_abar = g * h_prev[[c, n]];
                let g_f = g * bn * u;
                g_b[[k, n]] += g * f * u;
                gx[[k, c]] += g * f * bn;
                // d a_bar / d dt = a a_bar; d f / d dt = a_bar
                g_dt += g_abar * an * a_bar + g_f * a_bar;
                // d a_bar / d a = dt a_bar; d f / d a = (dt a_bar - f) / a
                let s = an * dt;
                let df_da = if s.abs() < SERIES_THRESHOLD {
                    dt * dt * (0.5 + s * (1.0 / 3.0 + s / 8.0))
                } else {
                    (dt * a_bar - f) / an
                };
                g_a[[c, n]] += g_abar * dt * a_bar + g_f * df_da;
                gh[[c, n]] = g * a_bar;
            }
            g_pre[[k, c]] = g_dt * sigmoid(proj.pre_delta[[k, c]]);
        }
    }

    // Chain through the projections.
    gx += &g_b.dot(&p.b_proj.weight.t());
    gx += &g_c.dot(&p.c_proj.weight.t());
    gx += &g_pre.dot(&p.delta_proj.weight.t());
    let grads = SelectiveParams {
        a_log: &g_a * &a,
        b_proj: Linear {
            weight: x.t().dot(&g_b),
            bias: g_b.sum_axis(Axis(0)),
        },
        c_proj: Linear {
            weight: x.t().dot(&g_c),
            bias: g_c.sum_axis(Axis(0)),
        },
        delta_proj: Linear {
            weight: x.t().dot(&g_pre),
            bias: g_pre.sum_axis(Axis(0)),
        },
    };
    Ok((gx, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(c: usize, d: usize, seed: u64) -> SelectiveParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = SelectiveParams::init(c, d, &mut rng);
        p.a_log.iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
        for b in [&mut p.b_proj.bias, &mut p.c_proj.bias] {
            b.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
        p.delta_proj.bias.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        p
    }

    fn random_input(rows: usize, c: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, c), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let p = random_params(4, 3, 1);
        let y = selective_scan(&p, &Array2::zeros((10, 4))).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_token_closed_form() {
        // d = 1, C = 1: y = C(x) * B_bar(x) * x with B_bar = (exp(a dt) - 1) / a * B(x).
        let p = SelectiveParams {
            a_log: array![[0.3f64.ln()]],
            b_proj: Linear {
                weight: array![[0.8]],
                bias: array![0.1],
            },
            c_proj: Linear {
                weight: array![[-0.4]],
                bias: array![0.9],
            },
            delta_proj: Linear {
                weight: array![[0.5]],
                bias: array![0.2],
            },
        };
        let x = 1.5;
        let a = -0.3;
        let dt = (1.0f64 + (0.5 * x + 0.2f64).exp()).ln();
        let b = 0.8 * x + 0.1;
        let c = -0.4 * x + 0.9;
        let expected = c * ((a * dt).exp() - 1.0) / a * b * x;
        let y = selective_scan(&p, &array![[x]]).unwrap();
        assert!((y[[0, 0]] - expected).abs() < 1e-14);
    }

    #[test]
    fn chunked_matches_sequential() {
        for (rows, seed) in [(1, 0), (15, 1), (16, 2), (17, 3), (128, 4)] {
            let p = random_params(8, 4, seed);
            let x = random_input(rows, 8, seed + 100);
            let a = selective_scan(&p, &x).unwrap();
            let b = selective_scan_chunked(&p, &x).unwrap();
            let diff = (&a - &b).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(diff <= 1e-6, "rows {rows}: {diff}");
        }
    }

    #[test]
    fn overflow_reports_token() {
        let p = random_params(2, 2, 5);
        let mut x = random_input(4, 2, 6);
        x[[2, 1]] = f64::INFINITY;
        assert!(matches!(selective_scan(&p, &x), Err(Error::NumericalOverflow { token: 2 })));
        assert!(matches!(
            selective_scan_chunked(&p, &x),
            Err(Error::NumericalOverflow { token: 2 })
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = random_params(3, 2, 7);
        let x = random_input(5, 3, 8);
        let (gx, gp) = selective_scan_backward(&p, &x, &Array2::zeros((5, 3))).unwrap();
        assert!(gx.iter().all(|v| *v == 0.0));
        assert!(gp.flat().iter().all(|v| *v == 0.0));
        assert!(selective_scan_backward(&p, &x, &Array2::zeros((4, 3))).is_err());
    }

    #[test]
    fn single_token_gradient_matches_hand_derivation() {
        // y = c(x) * phi(a, dt(x)) * b(x) * x with scalar everything.
        let (wa, wb, bb, wc, bc, wd, bd) = (0.2f64, 0.7, -0.2, 0.3, 0.6, -0.9, 0.4);
        let p = SelectiveParams {
            a_log: array![[wa]],
            b_proj: Linear {
                weight: array![[wb]],
                bias: array![bb],
            },
            c_proj: Linear {
                weight: array![[wc]],
                bias: array![bc],
            },
            delta_proj: Linear {
                weight: array![[wd]],
                bias: array![bd],
            },
        };
        let x = 0.8;
        let a = -wa.exp();
        let z = wd * x + bd;
        let dt = softplus(z);
        let e = (a * dt).exp();
        let phi = (e - 1.0) / a;
        let (b, c) = (wb * x + bb, wc * x + bc);
        let dphi_ddt = e;
        let dphi_da = (dt * e - phi) / a;
        let dy_ddt = c * b * x * dphi_ddt;
        let dy_dx = wc * phi * b * x + c * phi * wb * x + c * phi * b + dy_ddt * sigmoid(z) * wd;
        let dy_dalog = c * b * x * dphi_da * a;

        let (gx, gp) = selective_scan_backward(&p, &array![[x]], &array![[1.0]]).unwrap();
        assert!((gx[[0, 0]] - dy_dx).abs() < 1e-12);
        assert!((gp.a_log[[0, 0]] - dy_dalog).abs() < 1e-12);
        assert!((gp.c_proj.bias[0] - phi * b * x).abs() < 1e-12);
        assert!((gp.b_proj.weight[[0, 0]] - c * phi * x * x).abs() < 1e-12);
        assert!((gp.delta_proj.bias[0] - dy_ddt * sigmoid(z)).abs() < 1e-12);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let p = random_params(3, 2, 11);
        let x = random_input(6, 3, 12);
        let up = random_input(6, 3, 13);
        let loss = |p: &SelectiveParams, x: &FeatureMatrix| (selective_scan(p, x).unwrap() * &up).sum();
        let (gx, gp) = selective_scan_backward(&p, &x, &up).unwrap();
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[i] += h;
            xm.as_slice_mut().unwrap()[i] -= h;
            let fd = (loss(&p, &xp) - loss(&p, &xm)) / (2.0 * h);
            let an = gx.as_slice().unwrap()[i];
            assert!((fd - an).abs() <= 1e-6 * fd.abs().max(1.0), "x[{i}]: {fd} vs {an}");
        }
        let flat = p.flat();
        let g = gp.flat();
        for i in 0..flat.len() {
            let mut pp = p.clone();
            let mut pm = p.clone();
            let mut v = flat.clone();
            v[i] += h;
            pp.set_flat(&v);
            v[i] -= 2.0 * h;
            pm.set_flat(&v);
            let fd = (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-6 * fd.abs().max(1.0), "param {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn cost_is_linear_in_tokens() {
        let sizes = [128usize, 512, 2048, 8192];
        let macs: Vec<f64> = sizes.iter().map(|&n| selective_scan_macs(n, 32, 16) as f64).collect();
        let xs: Vec<f64> = sizes.iter().map(|&n| (n as f64).ln()).collect();
        let ys: Vec<f64> = macs.iter().map(|m| m.ln()).collect();
        let slope = (ys[3] - ys[0]) / (xs[3] - xs[0]);
        assert!(slope <= 1.1);
        let p = random_params(4, 2, 3);
        let x = random_input(64, 4, 4);
        let (_, measured) = flops::measure(|| selective_scan(&p, &x).unwrap());
        assert_eq!(measured, selective_scan_macs(64, 4, 2));
    }
}
