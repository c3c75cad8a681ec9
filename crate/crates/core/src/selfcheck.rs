//! Embedded oracle suite. Each check compares a kernel with an independent
//! reference from [`crate::oracles`] on seeded random instances.
//!
//! With fault injection on, every check tampers with one value of the
//! kernel output before comparing, so a working harness reports failures.

use std::time::Instant;

use ndarray::{s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{Config, NeighborSoftmax};
use crate::evalbench::{aggregate, precision_auc, success_auc, ClassScore};
use crate::geometry::{iou3d, Box7, Point3};
use crate::gfem::{grouped_cross_attention, split_channels, GfemWeights, GroupWeights};
use crate::localize::{bce_with_logits, losses_grad_check, smooth_l1, LocalizeOutput, Targets, HEAD_OUTPUTS};
use crate::mip::{propagate, MipWeights};
use crate::oracles;
use crate::ssm::{
    causal_convolve, lti_kernel, lti_scan, selective_scan, selective_scan_backward, selective_scan_chunked, zoh_discretize,
    LtiSystem, SelectiveParams,
};
use crate::synthgen::{generate, preset};
use crate::train::{collect_samples, fit_head};
use crate::weights::ModelWeights;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

pub type CheckFn = fn(bool) -> (bool, String);

/// Every check in run order.
pub const CHECKS: [(&str, CheckFn); 8] = [
    ("zoh_vs_expm", check_zoh),
    ("lti_scan_vs_convolution", check_lti),
    ("selective_scan", check_selective),
    ("propagation", check_propagation),
    ("grouped_attention", check_gfem),
    ("iou_monte_carlo", check_iou),
    ("metrics_brute_force", check_metrics),
    ("losses", check_losses),
];

pub fn run_check(name: &str, inject_fault: bool) -> Option<CheckOutcome> {
    let (name, f) = CHECKS.iter().find(|(n, _)| *n == name)?;
    let start = Instant::now();
    let (passed, detail) = f(inject_fault);
    Some(CheckOutcome {
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn run_all(inject_fault: bool) -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .map(|(n, _)| run_check(n, inject_fault).expect("listed check"))
        .collect()
}

pub fn report_text(outcomes: &[CheckOutcome]) -> String {
    let mut out = String::new();
    for o in outcomes {
        let tag = if o.passed { "PASS" } else { "FAIL" };
        out.push_str(&format!("{tag} {:<26} {:>7.2}s  {}\n", o.name, o.seconds, o.detail));
    }
    out
}

fn tamper(on: bool, v: &mut f64) {
    if on {
        *v += 0.05 * v.abs().max(1.0);
    }
}

fn rel(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / b.abs().max(floor)
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn rand_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

fn rand_points(n: usize, rng: &mut ChaCha8Rng) -> Vec<Point3> {
    (0..n)
        .map(|_| Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect()
}

/// 200 diagonal systems against the exponential of the augmented matrix;
/// the first 20 carry one entry small enough for the series branch.
pub fn check_zoh(fault: bool) -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    let mut series = 0;
    for i in 0..200 {
        let d = rng.random_range(1..=8);
        let mut a: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..=5.0)).collect();
        let b: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let delta = 1.0 - rng.random::<f64>();
        if i < 20 {
            a[0] = rng.random_range(-1e-6..1e-6);
            series += 1;
        }
        let mut got = zoh_discretize(&LtiSystem { a: a.clone(), b: b.clone(), delta }).expect("valid system");
        if i == 0 {
            tamper(fault, &mut got.a_bar[0]);
        }
        let (ea, eb) = oracles::zoh_dense(&a, &b, delta);
        for n in 0..d {
            worst = worst.max(rel(got.a_bar[n], ea[n], 1e-12)).max(rel(got.b_bar[n], eb[n], 1e-12));
        }
    }
    (worst <= 1e-6, format!("200 systems ({series} near-zero), max rel err {worst:.2e}"))
}

/// Recurrence against the convolution with its own kernel and against a
/// direct power-series convolution, length 256.
pub fn check_lti(fault: bool) -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let d = rng.random_range(1..=8);
        let sys = LtiSystem {
            a: (0..d).map(|_| rng.random_range(-5.0..-0.01)).collect(),
            b: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            delta: 1.0 - rng.random::<f64>(),
        };
        let c: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
        let disc = zoh_discretize(&sys).expect("valid system");
        let mut y = lti_scan(&disc, &c, &x);
        if i == 0 {
            tamper(fault, &mut y[0]);
        }
        let conv = causal_convolve(&x, &lti_kernel(&disc, &c, x.len()));
        let direct = oracles::lti_direct(&disc.a_bar, &disc.b_bar, &c, &x);
        for reference in [&conv, &direct] {
            let scale = reference.iter().map(|v| v.abs()).fold(1e-300, f64::max);
            let err = y.iter().zip(reference.iter()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max) / scale;
            worst = worst.max(err);
        }
    }
    (worst <= 1e-5, format!("100 systems, length 256, max rel err {worst:.2e}"))
}

fn random_selective(c: usize, d: usize, rng: &mut ChaCha8Rng) -> SelectiveParams {
    let mut p = SelectiveParams::init(c, d, rng);
    p.a_log.iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
    for b in [&mut p.b_proj.bias, &mut p.c_proj.bias] {
        b.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    }
    p.delta_proj.bias.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    p
}

/// Sequential against chunked on 50 instances (128 x 32, d = 16), then the
/// analytic backward against central differences on 20 small instances.
pub fn check_selective(fault: bool) -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut fwd = 0.0f64;
    for i in 0..50 {
        let p = random_selective(32, 16, &mut rng);
        let x = rand_matrix(128, 32, &mut rng);
        let mut seq = selective_scan(&p, &x).expect("finite scan");
        if i == 0 {
            tamper(fault, &mut seq[[0, 0]]);
        }
        let chunked = selective_scan_chunked(&p, &x).expect("finite scan");
        fwd = fwd.max(max_abs_diff(&seq, &chunked));
    }
    const H: f64 = 1e-6;
    let mut bwd = 0.0f64;
    for i in 0..20 {
        let p = random_selective(3, 2, &mut rng);
        let x = rand_matrix(6, 3, &mut rng);
        let up = rand_matrix(6, 3, &mut rng);
        let loss = |p: &SelectiveParams, x: &Array2<f64>| (&selective_scan(p, x).expect("finite scan") * &up).sum();
        let (gx, gp) = selective_scan_backward(&p, &x, &up).expect("finite scan");
        let mut analytic: Vec<f64> = gx.iter().copied().chain(gp.flat()).collect();
        if i == 0 {
            tamper(fault, &mut analytic[0]);
        }
        let mut fd = Vec::with_capacity(analytic.len());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[r, c]] += H;
            let mut xm = x.clone();
            xm[[r, c]] -= H;
            fd.push((loss(&p, &xp) - loss(&p, &xm)) / (2.0 * H));
        }
        let flat = p.flat();
        for idx in 0..flat.len() {
            let mut pp = p.clone();
            let mut v = flat.clone();
            v[idx] += H;
            pp.set_flat(&v);
            let plus = loss(&pp, &x);
            v[idx] -= 2.0 * H;
            pp.set_flat(&v);
            fd.push((plus - loss(&pp, &x)) / (2.0 * H));
        }
        for (a, f) in analytic.iter().zip(&fd) {
            bwd = bwd.max((a - f).abs() / a.abs().max(f.abs()).max(1e-4));
        }
    }
    (
        fwd <= 1e-6 && bwd <= 1e-3,
        format!("chunked max abs diff {fwd:.2e}; backward max rel err {bwd:.2e}"),
    )
}

/// 50 instances with 8 tokens, k = 4, C = 8 and three history frames.
pub fn check_propagation(fault: bool) -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let cfg = Config {
        channels: 8,
        neighbors: 4,
        neighbor_softmax: NeighborSoftmax::PerChannel,
        ..Config::small()
    };
    let (n, k, c, frames) = (8, 4, 8, 3);
    let mut diff = 0.0f64;
    let mut sum_err = 0.0f64;
    for i in 0..50 {
        let mut w = MipWeights::init(c, &mut rng);
        w.alpha = Array1::from_shape_simple_fn(c, || rng.random_range(0.5..1.5));
        w.beta = Array1::from_shape_simple_fn(c, || rng.random_range(-0.5..0.5));
        let q = rand_points(n, &mut rng);
        let z = rand_matrix(n, c, &mut rng);
        let hq = rand_points(frames * n, &mut rng);
        let hf = rand_matrix(frames * n, c, &mut rng);
        let mut got = propagate(&q, &z, &hq, &hf, &cfg, &w).expect("valid instance");
        if i == 0 {
            tamper(fault, &mut got.features[[0, 0]]);
        }
        let (expect, weights) = oracles::propagate_elementwise(
            &q,
            &z,
            &hq,
            &hf,
            k,
            &w.proj.weight,
            w.proj.bias.as_slice().expect("contiguous"),
            w.alpha.as_slice().expect("contiguous"),
            w.beta.as_slice().expect("contiguous"),
        );
        diff = diff.max(max_abs_diff(&got.features, &expect));
        for j in 0..n {
            diff = diff.max(max_abs_diff(&got.weights.slice(s![j, .., ..]).to_owned(), &weights[j]));
            for ch in 0..c {
                sum_err = sum_err.max((got.weights.slice(s![j, .., ch]).sum() - 1.0).abs());
            }
        }
    }
    (
        diff <= 1e-6 && sum_err <= 1e-6,
        format!("50 instances, max abs diff {diff:.2e}, weight sum err {sum_err:.2e}"),
    )
}

/// Elementwise attention per group, then 50 trials that rewrite the second
/// group's inputs and weights and watch the first group's output.
pub fn check_gfem(fault: bool) -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let (n, m, c) = (8, 24, 8);
    let mut diff = 0.0f64;
    for i in 0..50 {
        let w = GfemWeights::init(c, &mut rng);
        let z = rand_matrix(n, c, &mut rng);
        let e = rand_matrix(m, c, &mut rng);
        let scaled = i % 2 == 0;
        let mut got = grouped_cross_attention(&z, &e, &w, scaled).expect("valid instance");
        if i == 0 {
            tamper(fault, &mut got[[0, 0]]);
        }
        let (z1, z2) = split_channels(&z).expect("even channels");
        let (e1, e2) = split_channels(&e).expect("even channels");
        for (g, (zg, eg)) in [(z1, e1), (z2, e2)].iter().enumerate() {
            let gw = &w.groups[g];
            let expect = oracles::attention_elementwise(zg, eg, &gw.query, &gw.key, &gw.value, scaled);
            let cols = g * c / 2..(g + 1) * c / 2;
            diff = diff.max(max_abs_diff(&got.slice(s![.., cols]).to_owned(), &expect));
        }
    }
    let mut indep = 0.0f64;
    for i in 0..50 {
        let w = GfemWeights::init(c, &mut rng);
        let z = rand_matrix(n, c, &mut rng);
        let e = rand_matrix(m, c, &mut rng);
        let mut base = grouped_cross_attention(&z, &e, &w, true).expect("valid instance");
        if i == 0 {
            tamper(fault, &mut base[[0, 0]]);
        }
        let mut z2 = z.clone();
        let mut e2 = e.clone();
        z2.slice_mut(s![.., c / 2..]).assign(&rand_matrix(n, c / 2, &mut rng));
        e2.slice_mut(s![.., c / 2..]).assign(&rand_matrix(m, c / 2, &mut rng));
        let mut w2 = w.clone();
        w2.groups[1] = GroupWeights::init(c / 2, &mut rng);
        let other = grouped_cross_attention(&z2, &e2, &w2, true).expect("valid instance");
        indep = indep.max(max_abs_diff(
            &base.slice(s![.., ..c / 2]).to_owned(),
            &other.slice(s![.., ..c / 2]).to_owned(),
        ));
    }
    (
        diff <= 1e-6 && indep <= 1e-7,
        format!("oracle max abs diff {diff:.2e}; untouched group change {indep:.2e}"),
    )
}

/// 100 random rotated pairs against 10^5-sample Monte Carlo, plus unit
/// cubes offset by half an edge.
pub fn check_iou(fault: bool) -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let mut size = || rng.random_range(1.0..4.0);
        let (w1, l1, h1, w2, l2, h2) = (size(), size(), size(), size(), size(), size());
        let a = Box7::new(
            Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5)),
            w1,
            l1,
            h1,
            rng.random_range(-3.1..3.1),
        );
        let b = Box7::new(
            a.center() + Point3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(-0.5..0.5)),
            w2,
            l2,
            h2,
            rng.random_range(-3.1..3.1),
        );
        let mut got = iou3d(&a, &b);
        if i == 0 {
            tamper(fault, &mut got);
        }
        worst = worst.max((got - oracles::iou_monte_carlo(&a, &b, 100_000, &mut rng)).abs());
    }
    let cube = Box7::new(Point3::new(0.0, 0.0, 0.0), 1.0, 1.0, 1.0, 0.0);
    let shifted = Box7::new(Point3::new(0.5, 0.0, 0.0), 1.0, 1.0, 1.0, 0.0);
    let third = (iou3d(&cube, &shifted) - 1.0 / 3.0).abs();
    (
        worst <= 0.01 && third <= 1e-9,
        format!("100 pairs, max abs err {worst:.4}; offset cube err {third:.1e}"),
    )
}

/// 1000 random score sets against brute-force grids (exact equality) and
/// the frame-weighted mean over counts 6424/6088/1248/308.
pub fn check_metrics(fault: bool) -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let cap = 2.0;
    let mut mismatches = 0;
    for i in 0..1000 {
        let len = rng.random_range(1..=60);
        // Some values sit exactly on grid thresholds.
        let ious: Vec<f64> = (0..len)
            .map(|_| if rng.random_bool(0.2) { rng.random_range(0..=100) as f64 / 100.0 } else { rng.random::<f64>() })
            .collect();
        let errors: Vec<f64> = (0..len)
            .map(|_| if rng.random_bool(0.2) { cap * rng.random_range(0..=100) as f64 / 100.0 } else { rng.random_range(0.0..3.0) })
            .collect();
        let mut s = success_auc(&ious).expect("valid ious").auc;
        if i == 0 {
            tamper(fault, &mut s);
        }
        let p = precision_auc(&errors, cap).expect("valid errors").auc;
        if s != oracles::success_brute(&ious) || p != oracles::precision_brute(&errors, cap) {
            mismatches += 1;
        }
    }
    let counts = [6424usize, 6088, 1248, 308];
    let mut agg_err = 0.0f64;
    for _ in 0..100 {
        let rows: Vec<ClassScore> = counts
            .iter()
            .enumerate()
            .map(|(i, &frames)| ClassScore {
                class: format!("class{i}"),
                frames,
                success: rng.random_range(0.0..100.0),
                precision: rng.random_range(0.0..100.0),
            })
            .collect();
        let table = aggregate(&rows).expect("non-empty");
        let total: f64 = counts.iter().map(|c| *c as f64).sum();
        let s: f64 = rows.iter().map(|r| r.frames as f64 * r.success).sum::<f64>() / total;
        let p: f64 = rows.iter().map(|r| r.frames as f64 * r.precision).sum::<f64>() / total;
        agg_err = agg_err.max((table.mean.success - s).abs()).max((table.mean.precision - p).abs());
        if table.mean.frames != 14068 {
            agg_err = f64::INFINITY;
        }
    }
    (
        mismatches == 0 && agg_err <= 1e-9,
        format!("{mismatches}/1000 AUC mismatches; weighted mean err {agg_err:.1e}"),
    )
}

/// Finite-difference checks of every loss term, closed-form spot values,
/// and a 200-step head fit on an 8-frame segment.
pub fn check_losses(fault: bool) -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let cfg = Config::small();
    let mut worst = [0.0f64; 5];
    let mut grads_ok = true;
    for _ in 0..5 {
        let n = 12;
        let coords: Vec<Point3> = (0..n)
            .map(|_| Point3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0)))
            .collect();
        let out = LocalizeOutput::from_matrix(&Array2::from_shape_simple_fn((n, HEAD_OUTPUTS), || rng.random_range(-1.5..1.5)));
        let t = Targets {
            mask: (0..n).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect(),
            center: Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0),
            dtheta: rng.random_range(-0.5..0.5),
        };
        let r = losses_grad_check(&coords, &out, &t, &cfg).expect("valid instance");
        grads_ok &= r.passed;
        for (w, e) in worst.iter_mut().zip(r.max_rel_error) {
            *w = w.max(e);
        }
    }
    let mut ln2 = bce_with_logits(0.0, 1.0);
    tamper(fault, &mut ln2);
    let spot = (ln2 - 2f64.ln()).abs() <= 1e-9
        && (bce_with_logits(0.0, 0.0) - 2f64.ln()).abs() <= 1e-9
        && (smooth_l1(0.5, 1.0) - 0.125).abs() <= 1e-9;

    let fit = (|| {
        let w = ModelWeights::init(&cfg, 5).ok()?;
        let mut t = generate(&preset("car-straight")?).ok()?;
        t.frames.truncate(8);
        t.gt.truncate(8);
        let samples = collect_samples(&t, &cfg, &w).ok()?;
        let mut head = w.head.clone();
        fit_head(&samples, &mut head, &cfg, 200, 1e-2).ok()
    })();
    let (fit_ok, ratio) = match &fit {
        Some(r) => (r.last <= 0.5 * r.initial, r.last / r.initial),
        None => (false, f64::NAN),
    };
    let worst_all = worst.iter().cloned().fold(0.0, f64::max);
    (
        grads_ok && spot && fit_ok,
        format!("grad max rel err {worst_all:.1e}; spot values {}; fit loss ratio {ratio:.3}", if spot { "ok" } else { "off" }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn faults_flip_every_check() {
        for name in ["zoh_vs_expm", "metrics_brute_force", "grouped_attention"] {
            assert!(run_check(name, false).unwrap().passed, "{name}");
            assert!(!run_check(name, true).unwrap().passed, "{name}");
        }
        assert!(run_check("nope", false).is_none());
    }
}
