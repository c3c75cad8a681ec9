//! Minimal fit of the box head on one tracklet segment with frozen
//! features. Intended as a learnability smoke test, not as a training
//! recipe.

use serde::Serialize;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, Box7, Point3};
use crate::localize::{head_backward, head_forward, losses_with_grad, HeadWeights, Targets};
use crate::memory::{MemoryBank, MemoryFrame};
use crate::mip::{first_frame_forward, mip_forward_with_history};
use crate::nn::{FeatureMatrix, Linear};
use crate::tracker::{canonical_prior, crop, history_in_frame, Tracklet};
use crate::weights::ModelWeights;

/// Frozen head inputs and targets of one frame.
#[derive(Clone, Debug)]
pub struct Sample {
    pub coords: Vec<Point3>,
    pub features: FeatureMatrix,
    pub targets: Targets,
}

/// Features for frames `1..` with ground-truth priors and ground-truth masks
/// in the memory bank (teacher forcing).
pub fn collect_samples(t: &Tracklet, cfg: &Config, weights: &ModelWeights) -> Result<Vec<Sample>> {
    let mut bank = MemoryBank::new(cfg.memory_size);
    let mut samples = Vec::new();
    for (i, cloud) in t.frames.iter().enumerate() {
        let prior = if i == 0 { t.gt[0] } else { t.gt[i - 1] };
        let gt = t.gt[i];
        let local = crop(cloud, &prior, cfg);
        if local.is_empty() {
            continue;
        }
        let target = canonical_prior(&prior).with_center(prior.to_local(gt.center()));
        let target = Box7 {
            theta: normalize_angle(gt.theta - prior.theta),
            ..target
        };
        let out = if bank.is_empty() {
            first_frame_forward(&local, cfg, weights)?
        } else {
            mip_forward_with_history(&local, &history_in_frame(&bank, &prior)?, cfg, weights)?
        };
        let mask: Vec<f64> = out
            .coords
            .iter()
            .map(|p| if target.contains(*p, 0.0) { 1.0 } else { 0.0 })
            .collect();
        if i > 0 {
            samples.push(Sample {
                coords: out.coords.clone(),
                features: out.features.clone(),
                targets: Targets {
                    mask: mask.clone(),
                    center: target.center(),
                    dtheta: target.theta,
                },
            });
        }
        let world = out.coords.iter().map(|p| prior.to_world(*p)).collect();
        bank.push(MemoryFrame::new(world, out.features, mask)?, i as u64)?;
    }
    if samples.is_empty() {
        return Err(Error::EmptySearchRegion);
    }
    Ok(samples)
}

/// Mean total loss and its head gradient over all samples.
pub fn batch_loss(samples: &[Sample], head: &HeadWeights, cfg: &Config) -> Result<(f64, Linear)> {
    let mut total = 0.0;
    let mut grad = Linear::zeros(head.linear.input_dim(), head.linear.output_dim());
    let scale = 1.0 / samples.len() as f64;
    for s in samples {
        let out = head_forward(&s.coords, &s.features, head)?;
        let (l, g) = losses_with_grad(&s.coords, &out, &s.targets, cfg)?;
        total += l.total * scale;
        let gw = head_backward(&s.coords, &s.features, &g)?;
        grad.weight.scaled_add(scale, &gw.weight);
        grad.bias.scaled_add(scale, &gw.bias);
    }
    Ok((total, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FitReport {
    pub losses: Vec<f64>,
    pub initial: f64,
    pub last: f64,
}

/// Adam on the head parameters.
pub fn fit_head(samples: &[Sample], head: &mut HeadWeights, cfg: &Config, steps: usize, lr: f64) -> Result<FitReport> {
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut m = Linear::zeros(head.linear.input_dim(), head.linear.output_dim());
    let mut v = m.clone();
    let mut losses = Vec::with_capacity(steps + 1);
    for step in 1..=steps {
        let (loss, g) = batch_loss(samples, head, cfg)?;
        losses.push(loss);
        let c1 = 1.0 - f64::powi(b1, step as i32);
        let c2 = 1.0 - f64::powi(b2, step as i32);
        let params = [
            (head.linear.weight.view_mut().into_dyn(), g.weight.view().into_dyn(), m.weight.view_mut().into_dyn(), v.weight.view_mut().into_dyn()),
            (head.linear.bias.view_mut().into_dyn(), g.bias.view().into_dyn(), m.bias.view_mut().into_dyn(), v.bias.view_mut().into_dyn()),
        ];
        for (mut p, g, mut m, mut v) in params {
            ndarray::Zip::from(&mut p).and(&g).and(&mut m).and(&mut v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
    losses.push(batch_loss(samples, head, cfg)?.0);
    Ok(FitReport {
        initial: losses[0],
        last: *losses.last().expect("non-empty"),
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate, preset};
    use crate::tracker::subsample_htv;

    #[test]
    fn loss_gradient_matches_fd() {
        let cfg = Config::small();
        let w = ModelWeights::init(&cfg, 2).unwrap();
        let t = generate(&preset("car-straight").unwrap()).unwrap();
        let seg = subsample_htv(&t, 10).unwrap();
        let samples = collect_samples(&seg, &cfg, &w).unwrap();
        let mut head = w.head.clone();
        let (_, g) = batch_loss(&samples, &head, &cfg).unwrap();
        for (r, c) in [(0, 0), (4, 3), (cfg.channels + 2, 1)] {
            let orig = head.linear.weight[[r, c]];
            head.linear.weight[[r, c]] = orig + 1e-6;
            let p = batch_loss(&samples, &head, &cfg).unwrap().0;
            head.linear.weight[[r, c]] = orig - 1e-6;
            let q = batch_loss(&samples, &head, &cfg).unwrap().0;
            head.linear.weight[[r, c]] = orig;
            let fd = (p - q) / 2e-6;
            assert!((fd - g.weight[[r, c]]).abs() <= 1e-4 * fd.abs().max(1e-2), "{fd} vs {}", g.weight[[r, c]]);
        }
    }

    #[test]
    fn head_fit_halves_loss() {
        let cfg = Config::small();
        let w = ModelWeights::init(&cfg, 5).unwrap();
        let mut t = generate(&preset("car-straight").unwrap()).unwrap();
        t.frames.truncate(8);
        t.gt.truncate(8);
        let samples = collect_samples(&t, &cfg, &w).unwrap();
        assert_eq!(samples.len(), 7);
        let mut head = w.head.clone();
        let r = fit_head(&samples, &mut head, &cfg, 200, 1e-2).unwrap();
        assert_eq!(r.losses.len(), 201);
        assert!(r.last <= 0.5 * r.initial, "{} -> {}", r.initial, r.last);
    }
}
