//! One-pass metrics, frame-weighted aggregation, operation counts and the
//! throughput benchmark.
//!
//! Both AUC curves use a 101-point uniform threshold grid with strict
//! inequalities: success counts `iou > t` for `t` in `{0, 0.01, ..., 1}`,
//! precision counts `error < t` for `t` in `{0, cap/100, ..., cap}`. The
//! AUC is the plain mean of the 101 fractions, so a perfect run scores
//! 100/101 on both.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::memory::{MemoryBank, MemoryFrame};
use crate::mip::{flops_mip, mip_forward};
use crate::nn::FeatureMatrix;
use crate::pointops::Cloud;
use crate::weights::ModelWeights;

pub const GRID_POINTS: usize = 101;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricCurve {
    pub thresholds: Vec<f64>,
    pub fractions: Vec<f64>,
    pub auc: f64,
}

/// Threshold `k` of a grid ending at `cap`.
pub fn grid_threshold(k: usize, cap: f64) -> f64 {
    cap * (k as f64) / 100.0
}

fn curve(thresholds: Vec<f64>, counts: impl Iterator<Item = usize>, n: usize) -> MetricCurve {
    let fractions: Vec<f64> = counts.map(|c| c as f64 / n as f64).collect();
    let auc = fractions.iter().sum::<f64>() / GRID_POINTS as f64;
    MetricCurve {
        thresholds,
        fractions,
        auc,
    }
}

pub fn success_auc(ious: &[f64]) -> Result<MetricCurve> {
    if ious.is_empty() {
        return Err(Error::InvalidInput("success: no frames".into()));
    }
    if let Some(v) = ious.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidInput(format!("success: IoU {v} outside [0, 1]")));
    }
    let mut sorted = ious.to_vec();
    sorted.sort_by(f64::total_cmp);
    let thresholds: Vec<f64> = (0..GRID_POINTS).map(|k| grid_threshold(k, 1.0)).collect();
    let counts: Vec<usize> = thresholds
        .iter()
        .map(|&t| sorted.len() - sorted.partition_point(|v| *v <= t))
        .collect();
    Ok(curve(thresholds, counts.into_iter(), sorted.len()))
}

pub fn precision_auc(errors: &[f64], cap: f64) -> Result<MetricCurve> {
    if errors.is_empty() {
        return Err(Error::InvalidInput("precision: no frames".into()));
    }
    if !(cap > 0.0 && cap.is_finite()) {
        return Err(Error::InvalidInput(format!("precision: cap {cap}")));
    }
    if let Some(v) = errors.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::InvalidInput(format!("precision: center error {v}")));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let thresholds: Vec<f64> = (0..GRID_POINTS).map(|k| grid_threshold(k, cap)).collect();
    let counts: Vec<usize> = thresholds
        .iter()
        .map(|&t| sorted.partition_point(|v| *v < t))
        .collect();
    Ok(curve(thresholds, counts.into_iter(), sorted.len()))
}

/// Scores of one class (or one tracklet) with its frame count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: String,
    pub frames: usize,
    pub success: f64,
    pub precision: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateTable {
    /// One row per class, sorted by class name.
    pub classes: Vec<ClassScore>,
    /// Frame-weighted mean over the classes.
    pub mean: ClassScore,
}

fn weighted(rows: &[&ClassScore], class: String) -> ClassScore {
    let frames: usize = rows.iter().map(|r| r.frames).sum();
    let mut success = 0.0;
    let mut precision = 0.0;
    for r in rows {
        success += r.success * r.frames as f64;
        precision += r.precision * r.frames as f64;
    }
    let denom = frames.max(1) as f64;
    ClassScore {
        class,
        frames,
        success: success / denom,
        precision: precision / denom,
    }
}

/// Merge rows per class by frame weighting, then weight the classes by
/// their frame counts for the mean.
pub fn aggregate(rows: &[ClassScore]) -> Result<AggregateTable> {
    if rows.is_empty() {
        return Err(Error::InvalidInput("aggregate: no rows".into()));
    }
    let mut by_class: BTreeMap<&str, Vec<&ClassScore>> = BTreeMap::new();
    for r in rows {
        by_class.entry(r.class.as_str()).or_default().push(r);
    }
    let classes: Vec<ClassScore> = by_class
        .into_iter()
        .map(|(c, rs)| if rs.len() == 1 { rs[0].clone() } else { weighted(&rs, c.to_string()) })
        .collect();
    let refs: Vec<&ClassScore> = classes.iter().collect();
    let mean = weighted(&refs, "mean".into());
    Ok(AggregateTable { classes, mean })
}

impl AggregateTable {
    /// Fixed-width text table.
    pub fn to_text(&self) -> String {
        let mut out = format!("{:<14}{:>8}{:>10}{:>11}\n", "class", "frames", "success", "precision");
        for r in self.classes.iter().chain(std::iter::once(&self.mean)) {
            out.push_str(&format!("{:<14}{:>8}{:>10.2}{:>11.2}\n", r.class, r.frames, r.success, r.precision));
        }
        out
    }
}

/// The quadratic part of [`flops_attention_baseline`]: `2 * rho * n^2 * C`.
pub fn attention_quadratic_term(cfg: &Config, n: usize) -> u64 {
    2 * (cfg.memory_size as u64) * (n as u64) * (n as u64) * cfg.channels as u64
}

/// One cross-attention pass from all `n` current points to `rho * n`
/// history points: query/key/value projections plus the score and mixing
/// products.
pub fn flops_attention_baseline(cfg: &Config, n: usize) -> u64 {
    let c = cfg.channels as u64;
    let n64 = n as u64;
    let hist = cfg.memory_size as u64 * n64;
    (n64 + 2 * hist) * c * c + attention_quadratic_term(cfg, n)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub n: usize,
    pub flops_ours: u64,
    pub flops_attn: u64,
    pub steps_per_sec: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub slope_ours: f64,
    pub slope_attn: f64,
    pub slope_time: f64,
}

pub const DEFAULT_BENCH_SIZES: [usize; 5] = [512, 1024, 2048, 4096, 8192];

/// Random scene of `n` points and a full memory bank, as benchmarked.
pub fn bench_inputs(cfg: &Config, n: usize, seed: u64) -> Result<(Cloud, MemoryBank)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pt = |r: &mut ChaCha8Rng| Point3::new(r.random_range(-4.0..4.0), r.random_range(-4.0..4.0), r.random_range(-1.0..1.0));
    let cloud = Cloud::new((0..n).map(|_| pt(&mut rng)).collect());
    let mut bank = MemoryBank::new(cfg.memory_size);
    for t in 0..cfg.memory_size {
        let coords = (0..cfg.tokens).map(|_| pt(&mut rng)).collect();
        let features = FeatureMatrix::from_shape_simple_fn((cfg.tokens, cfg.channels), || rng.random_range(-1.0..1.0));
        let mask = (0..cfg.tokens).map(|_| rng.random()).collect();
        bank.push(MemoryFrame::new(coords, features, mask)?, t as u64)?;
    }
    Ok((cloud, bank))
}

/// Median wall-clock steps per second of one full forward on `n` points.
pub fn measure_steps_per_sec(cfg: &Config, weights: &ModelWeights, n: usize, reps: usize) -> Result<f64> {
    let (cloud, bank) = bench_inputs(cfg, n, n as u64)?;
    let warm = Instant::now();
    while warm.elapsed().as_secs_f64() < 0.5 {
        std::hint::black_box(mip_forward(&cloud, &bank, cfg, weights)?);
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        std::hint::black_box(mip_forward(&cloud, &bank, cfg, weights)?);
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    Ok(1.0 / times[times.len() / 2].max(1e-12))
}

pub fn run_bench(cfg: &Config, weights: &ModelWeights, sizes: &[usize], reps: usize) -> Result<BenchReport> {
    if sizes.is_empty() || sizes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput("bench sizes must be non-empty and ascending".into()));
    }
    if reps < 3 {
        return Err(Error::InvalidInput("bench needs at least 3 repetitions".into()));
    }
    let mut rows = Vec::with_capacity(sizes.len());
    for &n in sizes {
        rows.push(BenchRow {
            n,
            flops_ours: flops_mip(cfg, n),
            flops_attn: flops_attention_baseline(cfg, n),
            steps_per_sec: measure_steps_per_sec(cfg, weights, n, reps)?,
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let slope = |f: &dyn Fn(&BenchRow) -> f64| {
        if rows.len() < 2 {
            f64::NAN
        } else {
            loglog_slope(&xs, &rows.iter().map(f).collect::<Vec<_>>())
        }
    };
    Ok(BenchReport {
        slope_ours: slope(&|r| r.flops_ours as f64),
        slope_attn: slope(&|r| r.flops_attn as f64),
        slope_time: slope(&|r| 1.0 / r.steps_per_sec),
        rows,
    })
}

pub const BENCH_CSV_HEADER: &str = "n,flops_ours,flops_attn,steps_per_sec";

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{BENCH_CSV_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.n, r.flops_ours, r.flops_attn, r.steps_per_sec));
        }
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "log-log slope: ours {:.3}, attention baseline {:.3}, wall-clock {:.3}\n",
            self.slope_ours, self.slope_attn, self.slope_time
        )
    }
}

/// Parse rows written by [`BenchReport::to_csv`].
pub fn parse_bench_csv(text: &str) -> Result<Vec<BenchRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(BENCH_CSV_HEADER) {
        return Err(Error::InvalidInput("bench csv: bad header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::InvalidInput(format!("bench csv: bad row `{l}`"));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(BenchRow {
                n: f[0].parse().map_err(|_| bad())?,
                flops_ours: f[1].parse().map_err(|_| bad())?,
                flops_attn: f[2].parse().map_err(|_| bad())?,
                steps_per_sec: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_edge_values() {
        let perfect = success_auc(&[1.0; 7]).unwrap();
        assert_eq!(perfect.fractions[100], 0.0);
        assert!(perfect.fractions[..100].iter().all(|f| *f == 1.0));
        assert_eq!(perfect.auc, 100.0 / 101.0);
        assert_eq!(success_auc(&[0.0; 3]).unwrap().auc, 0.0);
        let zero_err = precision_auc(&[0.0; 4], 2.0).unwrap();
        assert_eq!(zero_err.fractions[0], 0.0);
        assert_eq!(zero_err.auc, 100.0 / 101.0);
        assert_eq!(precision_auc(&[3.0, 2.5], 2.0).unwrap().auc, 0.0);
        assert!(success_auc(&[]).is_err());
        assert!(success_auc(&[1.5]).is_err());
        assert!(precision_auc(&[1.0], 0.0).is_err());
    }

    #[test]
    fn curves_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f64> = (0..50).map(|_| rng.random()).collect();
        let s = success_auc(&v).unwrap();
        assert!(s.fractions.windows(2).all(|w| w[1] <= w[0]));
        let p = precision_auc(&v, 1.0).unwrap();
        assert!(p.fractions.windows(2).all(|w| w[1] >= w[0]));
    }

    fn row(class: &str, frames: usize, s: f64, p: f64) -> ClassScore {
        ClassScore {
            class: class.into(),
            frames,
            success: s,
            precision: p,
        }
    }

    #[test]
    fn aggregate_weighting() {
        let one = aggregate(&[row("car", 10, 50.0, 60.0)]).unwrap();
        assert_eq!(one.mean.success, 50.0);
        let two = aggregate(&[row("car", 6424, 70.0, 80.0), row("pedestrian", 6088, 64.3, 70.0)]).unwrap();
        let expected = (6424.0 * 70.0 + 6088.0 * 64.3) / 12512.0;
        assert!((two.mean.success - expected).abs() < 1e-12);
        assert!((two.mean.success - 67.2267).abs() < 1e-3);
        let eq = aggregate(&[row("a", 3, 42.0, 1.0), row("b", 9, 42.0, 1.0)]).unwrap();
        assert!((eq.mean.success - 42.0).abs() < 1e-12);
        assert!(aggregate(&[]).is_err());
        assert!(two.to_text().contains("mean"));
    }

    #[test]
    fn attention_baseline_shape() {
        let cfg = Config::default();
        assert_eq!(attention_quadratic_term(&cfg, 2000), 4 * attention_quadratic_term(&cfg, 1000));
        let sizes = [1024.0, 2048.0, 4096.0, 8192.0];
        let ys: Vec<f64> = sizes.iter().map(|&n| flops_attention_baseline(&cfg, n as usize) as f64).collect();
        assert!(loglog_slope(&sizes, &ys) >= 1.8);
        assert!(flops_attention_baseline(&cfg, 1) > 0);
    }

    #[test]
    fn slope_of_power_law() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(1.5)).collect();
        assert!((loglog_slope(&xs, &ys) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn bench_csv_round_trip() {
        let cfg = Config::small();
        let w = ModelWeights::init(&cfg, 1).unwrap();
        let report = run_bench(&cfg, &w, &[64, 128], 3).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert_eq!(parse_bench_csv(&report.to_csv()).unwrap(), report.rows);
        assert!(run_bench(&cfg, &w, &[128, 64], 3).is_err());
        assert!(run_bench(&cfg, &w, &[64], 2).is_err());
    }
}
