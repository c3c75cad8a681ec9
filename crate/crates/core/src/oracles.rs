//! Slow reference implementations used by the self-check. They share no
//! code with the kernels they check.

use ndarray::Array2;
use rand::Rng;

use crate::geometry::{Box7, Point3};

/// Dense matrix exponential by scaling and squaring with a Taylor series.
pub fn expm(m: &Array2<f64>) -> Array2<f64> {
    let n = m.nrows();
    let norm = m.rows().into_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let mut squarings = 0;
    let mut scale = 1.0;
    while norm * scale > 0.25 {
        scale *= 0.5;
        squarings += 1;
    }
    let a = m * scale;
    let mut result = Array2::<f64>::eye(n);
    let mut term = Array2::<f64>::eye(n);
    for k in 1..=30 {
        term = term.dot(&a) / k as f64;
        result += &term;
    }
    for _ in 0..squarings {
        result = result.dot(&result);
    }
    result
}

/// Zero-order hold of `h' = diag(a) h + b x` through the exponential of the
/// augmented matrix `[[A, B], [0, 0]] * delta`.
pub fn zoh_dense(a: &[f64], b: &[f64], delta: f64) -> (Vec<f64>, Vec<f64>) {
    let d = a.len();
    let mut m = Array2::<f64>::zeros((d + 1, d + 1));
    for i in 0..d {
        m[[i, i]] = a[i] * delta;
        m[[i, d]] = b[i] * delta;
    }
    let e = expm(&m);
    ((0..d).map(|i| e[[i, i]]).collect(), (0..d).map(|i| e[[i, d]]).collect())
}

/// `y_k = sum_i (sum_n c_n a_n^i b_n) x_{k-i}`.
pub fn lti_direct(a_bar: &[f64], b_bar: &[f64], c: &[f64], x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|k| {
            let mut y = 0.0;
            for i in 0..=k {
                let mut kern = 0.0;
                for n in 0..a_bar.len() {
                    kern += c[n] * a_bar[n].powi(i as i32) * b_bar[n];
                }
                y += kern * x[k - i];
            }
            y
        })
        .collect()
}

/// Indices of the `k` nearest references by full sort (ties to the lower
/// index), repeated cyclically when there are fewer than `k`.
pub fn knn_sorted(q: Point3, refs: &[Point3], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..refs.len()).collect();
    let d = |i: usize| {
        let (dx, dy, dz) = (q.x - refs[i].x, q.y - refs[i].y, q.z - refs[i].z);
        dx * dx + dy * dy + dz * dz
    };
    order.sort_by(|&i, &j| d(i).partial_cmp(&d(j)).unwrap().then(i.cmp(&j)));
    let take = k.min(order.len());
    (0..k).map(|m| order[m % take]).collect()
}

/// Propagation output and neighbor weights with every sum written out.
/// `proj` is (2C, C) with rows `[history; token]`.
#[allow(clippy::too_many_arguments)]
pub fn propagate_elementwise(
    coords: &[Point3],
    tokens: &Array2<f64>,
    history_coords: &[Point3],
    history: &Array2<f64>,
    k: usize,
    proj: &Array2<f64>,
    bias: &[f64],
    alpha: &[f64],
    beta: &[f64],
) -> (Array2<f64>, Vec<Array2<f64>>) {
    let c = tokens.ncols();
    let mut out = Array2::<f64>::zeros((coords.len(), c));
    let mut all_w = Vec::new();
    for (j, q) in coords.iter().enumerate() {
        let nb = knn_sorted(*q, history_coords, k);
        let mut f_hat = Array2::<f64>::zeros((k, c));
        for (m, &i) in nb.iter().enumerate() {
            for ch in 0..c {
                let mut v = bias[ch];
                for r in 0..c {
                    v += history[[i, r]] * proj[[r, ch]];
                    v += tokens[[j, r]] * proj[[c + r, ch]];
                }
                f_hat[[m, ch]] = alpha[ch] * v + beta[ch];
            }
        }
        let mut w = Array2::<f64>::zeros((k, c));
        for ch in 0..c {
            let mx = (0..k).map(|m| f_hat[[m, ch]]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..k).map(|m| (f_hat[[m, ch]] - mx).exp()).sum();
            for m in 0..k {
                w[[m, ch]] = (f_hat[[m, ch]] - mx).exp() / z;
                out[[j, ch]] += w[[m, ch]] * f_hat[[m, ch]];
            }
        }
        all_w.push(w);
    }
    (out, all_w)
}

/// One attention group, every product written as a loop.
pub fn attention_elementwise(
    z: &Array2<f64>,
    e: &Array2<f64>,
    wq: &Array2<f64>,
    wk: &Array2<f64>,
    wv: &Array2<f64>,
    scaled: bool,
) -> Array2<f64> {
    let (n, h) = z.dim();
    let m = e.nrows();
    let lin = |x: &Array2<f64>, w: &Array2<f64>, row: usize, col: usize| (0..h).map(|r| x[[row, r]] * w[[r, col]]).sum::<f64>();
    let mut out = Array2::<f64>::zeros((n, h));
    for i in 0..n {
        let mut logits = vec![0.0; m];
        for (jj, l) in logits.iter_mut().enumerate() {
            for col in 0..h {
                *l += lin(z, wq, i, col) * lin(e, wk, jj, col);
            }
            if scaled {
                *l /= (h as f64).sqrt();
            }
        }
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        for (jj, l) in logits.iter().enumerate() {
            let a = (l - mx).exp() / denom;
            for col in 0..h {
                out[[i, col]] += a * lin(e, wv, jj, col);
            }
        }
    }
    out
}

fn inside(b: &Box7, p: [f64; 3]) -> bool {
    let (s, c) = b.theta.sin_cos();
    let (dx, dy) = (p[0] - b.cx, p[1] - b.cy);
    let u = c * dx + s * dy;
    let v = -s * dx + c * dy;
    u.abs() <= b.l / 2.0 && v.abs() <= b.w / 2.0 && (p[2] - b.cz).abs() <= b.h / 2.0
}

fn sample_in<R: Rng + ?Sized>(b: &Box7, rng: &mut R) -> [f64; 3] {
    let u = (rng.random::<f64>() - 0.5) * b.l;
    let v = (rng.random::<f64>() - 0.5) * b.w;
    let z = (rng.random::<f64>() - 0.5) * b.h;
    let (s, c) = b.theta.sin_cos();
    [b.cx + c * u - s * v, b.cy + s * u + c * v, b.cz + z]
}

/// IoU from the fraction of uniform samples in `a` that land in `b`.
pub fn iou_monte_carlo<R: Rng + ?Sized>(a: &Box7, b: &Box7, samples: usize, rng: &mut R) -> f64 {
    let hits = (0..samples).filter(|_| inside(b, sample_in(a, rng))).count();
    let va = a.w * a.l * a.h;
    let vb = b.w * b.l * b.h;
    let inter = va * hits as f64 / samples as f64;
    inter / (va + vb - inter)
}

/// Mean over the 101 thresholds `k/100` of the fraction with IoU above.
pub fn success_brute(ious: &[f64]) -> f64 {
    let mut total = 0.0;
    for k in 0..=100 {
        let t = k as f64 / 100.0;
        let mut above = 0usize;
        for v in ious {
            if *v > t {
                above += 1;
            }
        }
        total += above as f64 / ious.len() as f64;
    }
    total / 101.0
}

/// Mean over the 101 thresholds `cap*k/100` of the fraction with error below.
pub fn precision_brute(errors: &[f64], cap: f64) -> f64 {
    let mut total = 0.0;
    for k in 0..=100 {
        let t = cap * k as f64 / 100.0;
        let mut below = 0usize;
        for v in errors {
            if *v < t {
                below += 1;
            }
        }
        total += below as f64 / errors.len() as f64;
    }
    total / 101.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expm_of_rotation_generator() {
        let t = 0.7f64;
        let m = ndarray::array![[0.0, -t], [t, 0.0]];
        let e = expm(&m);
        assert!((e[[0, 0]] - t.cos()).abs() < 1e-14);
        assert!((e[[1, 0]] - t.sin()).abs() < 1e-14);
    }

    #[test]
    fn zoh_scalar() {
        let (a, b) = zoh_dense(&[-2.0], &[3.0], 0.5);
        assert!((a[0] - (-1.0f64).exp()).abs() < 1e-14);
        assert!((b[0] - 3.0 * (1.0 - (-1.0f64).exp()) / 2.0).abs() < 1e-14);
    }

    #[test]
    fn brute_metrics_hand_values() {
        assert!((success_brute(&[1.0]) - 100.0 / 101.0).abs() < 1e-15);
        assert_eq!(success_brute(&[0.0]), 0.0);
        assert!((precision_brute(&[0.0], 2.0) - 100.0 / 101.0).abs() < 1e-15);
    }
}
