//! Inter-frame propagation: every current token gathers its nearest
//! neighbors in the stacked history, mixes their features with its own
//! embedding, and pools them with per-channel softmax weights. The pooled
//! features are then refined by the bidirectional scan stack.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;

use crate::config::{AttentionKeys, Config, FeatureFusion, NeighborSoftmax};
use crate::error::{Error, Result};
use crate::flops;
use crate::geometry::Point3;
use crate::gfem::grouped_cross_attention;
use crate::memory::{concat_bank, mask_embedding, History, MemoryBank};
use crate::nn::{round_f32, FeatureMatrix, Linear};
use crate::pointops::{knn, tokenize, Cloud, NeighborIndex};
use crate::ssm::{bi_ssm_stack, identity_order, selective_scan_macs};
use crate::weights::ModelWeights;

/// `F_hat = alpha * P(F_k ++ z_j) + beta` with `P: 2C -> C`.
#[derive(Clone, Debug, PartialEq)]
pub struct MipWeights {
    pub proj: Linear,
    pub alpha: Array1<f64>,
    pub beta: Array1<f64>,
}

impl MipWeights {
    pub fn init<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let mut proj = Linear::init(2 * channels, channels, rng);
        proj.bias.mapv_inplace(round_f32);
        Self {
            proj,
            alpha: Array1::ones(channels),
            beta: Array1::zeros(channels),
        }
    }

    pub fn check(&self, channels: usize) -> Result<()> {
        if self.proj.weight.dim() != (2 * channels, channels)
            || self.proj.bias.len() != channels
            || self.alpha.len() != channels
            || self.beta.len() != channels
        {
            return Err(Error::shape(
                "propagation weights",
                format!("proj ({}, {channels}), alpha/beta {channels}", 2 * channels),
                format!(
                    "proj {:?}, alpha {}, beta {}",
                    self.proj.weight.dim(),
                    self.alpha.len(),
                    self.beta.len()
                ),
            ));
        }
        Ok(())
    }
}

/// Result of [`propagate`].
#[derive(Clone, Debug)]
pub struct Propagation {
    /// One row per current token.
    pub features: FeatureMatrix,
    pub neighbors: NeighborIndex,
    /// Neighbor weights laid out as (token, neighbor, channel).
    pub weights: ndarray::Array3<f64>,
}

/// Pool history features onto the current tokens.
///
/// `coords`/`token_features` describe the current frame; `history_coords` and
/// `history` the stacked (mask-fused) memory, in the same coordinate frame.
pub fn propagate(
    coords: &[Point3],
    token_features: &FeatureMatrix,
    history_coords: &[Point3],
    history: &FeatureMatrix,
    cfg: &Config,
    w: &MipWeights,
) -> Result<Propagation> {
    let c = token_features.ncols();
    w.check(c)?;
    if token_features.nrows() != coords.len() {
        return Err(Error::shape("token rows", coords.len(), token_features.nrows()));
    }
    if history.nrows() != history_coords.len() {
        return Err(Error::shape("history rows", history_coords.len(), history.nrows()));
    }
    if history.ncols() != c {
        return Err(Error::shape("history channels", c, history.ncols()));
    }
    if history_coords.is_empty() {
        return Err(Error::EmptyMemoryBank);
    }
    let k = cfg.neighbors;
    let neighbors = knn(coords, history_coords, k)?;
    let n = coords.len();

    // P(F ++ z) = F W_top + z W_bottom + b
    let w_top = w.proj.weight.slice(s![..c, ..]);
    let w_bottom = w.proj.weight.slice(s![c.., ..]);
    let gathered = history.select(Axis(0), &neighbors.indices);
    let from_history = gathered.dot(&w_top);
    let from_token = token_features.dot(&w_bottom) + &w.proj.bias;
    flops::add(((n * k + n) * c * c + 2 * n * k * c) as u64);

    let mut features = Array2::<f64>::zeros((n, c));
    let mut weights = ndarray::Array3::<f64>::zeros((n, k, c));
    let mut mixed = Array2::<f64>::zeros((k, c));
    let mut logits = vec![0.0; k];
    for j in 0..n {
        for m in 0..k {
            for ch in 0..c {
                let v = from_history[[j * k + m, ch]] + from_token[[j, ch]];
                mixed[[m, ch]] = w.alpha[ch] * v + w.beta[ch];
            }
        }
        match cfg.neighbor_softmax {
            NeighborSoftmax::PerChannel => {
                for ch in 0..c {
                    for m in 0..k {
                        logits[m] = mixed[[m, ch]];
                    }
                    crate::nn::softmax_in_place(&mut logits);
                    for m in 0..k {
                        weights[[j, m, ch]] = logits[m];
                    }
                }
            }
            NeighborSoftmax::Scalar => {
                for m in 0..k {
                    logits[m] = mixed.row(m).mean().unwrap_or(0.0);
                }
                crate::nn::softmax_in_place(&mut logits);
                for m in 0..k {
                    weights.slice_mut(s![j, m, ..]).fill(logits[m]);
                }
            }
        }
        for ch in 0..c {
            features[[j, ch]] = (0..k).map(|m| weights[[j, m, ch]] * mixed[[m, ch]]).sum();
        }
    }
    Ok(Propagation {
        features,
        neighbors,
        weights,
    })
}

/// History matrix entering propagation, per the configured fusion mode.
pub fn history_features(history: &History, cfg: &Config, w: &ModelWeights) -> Result<FeatureMatrix> {
    match cfg.fusion {
        FeatureFusion::Both => crate::memory::fuse_mask(&history.features, &history.mask, &w.mask_embed),
        FeatureFusion::GeometryOnly => Ok(history.features.clone()),
        FeatureFusion::MaskOnly => mask_embedding(&history.mask, &w.mask_embed),
    }
}

/// Everything computed for one frame.
#[derive(Clone, Debug)]
pub struct MipOutput {
    /// Sampled token coordinates, `Q_t`.
    pub coords: Vec<Point3>,
    /// Tokenizer output, `Z_t`.
    pub tokens: FeatureMatrix,
    /// Grouped-attention output when enabled.
    pub enhanced: Option<FeatureMatrix>,
    /// Propagation output before the scan stack.
    pub propagated: FeatureMatrix,
    /// Final per-token features, `E_t`.
    pub features: FeatureMatrix,
}

/// Full per-frame forward against the memory bank. The cloud and the bank
/// coordinates must share one frame.
pub fn mip_forward(cloud: &Cloud, bank: &MemoryBank, cfg: &Config, w: &ModelWeights) -> Result<MipOutput> {
    let history = concat_bank(bank)?;
    mip_forward_with_history(cloud, &history, cfg, w)
}

pub fn mip_forward_with_history(
    cloud: &Cloud,
    history: &History,
    cfg: &Config,
    w: &ModelWeights,
) -> Result<MipOutput> {
    let tokens = tokenize(cloud, cfg, &w.tokenizer)?;
    let fused = history_features(history, cfg, w)?;
    let enhanced = if cfg.gfem {
        let keys = match cfg.attention_keys {
            AttentionKeys::Fused => &fused,
            AttentionKeys::Raw => &history.features,
        };
        Some(grouped_cross_attention(&tokens.features, keys, &w.gfem, cfg.attention_scale)?)
    } else {
        None
    };
    let query = enhanced.as_ref().unwrap_or(&tokens.features);
    let prop = propagate(&tokens.coords, query, &history.coords, &fused, cfg, &w.mip)?;
    let order = identity_order(tokens.coords.len());
    let features = bi_ssm_stack(&w.ssm, &prop.features, &order)?;
    Ok(MipOutput {
        coords: tokens.coords,
        tokens: tokens.features,
        enhanced,
        propagated: prop.features,
        features,
    })
}

/// First frame: no history yet, so the token features go straight through
/// the scan stack.
pub fn first_frame_forward(cloud: &Cloud, cfg: &Config, w: &ModelWeights) -> Result<MipOutput> {
    let tokens = tokenize(cloud, cfg, &w.tokenizer)?;
    let order = identity_order(tokens.coords.len());
    let features = bi_ssm_stack(&w.ssm, &tokens.features, &order)?;
    Ok(MipOutput {
        coords: tokens.coords,
        propagated: tokens.features.clone(),
        tokens: tokens.features,
        enhanced: None,
        features,
    })
}

/// Analytic MAC count of [`mip_forward`] on `n_points` input points with a
/// full memory bank.
pub fn flops_mip(cfg: &Config, n_points: usize) -> u64 {
    let n = n_points.max(1);
    let t = cfg.tokens;
    let c = cfg.channels;
    let half = c / 2;
    let k = cfg.neighbors;
    let g = cfg.group_size;
    let hist = cfg.memory_size * t;

    let fps = (t.min(n) - 1) * 3 * n;
    let grouping = 3 * t * n;
    let pointnet = t * g * (3 * half + half * c);
    let mask = match cfg.fusion {
        FeatureFusion::GeometryOnly => 0,
        _ => hist * c,
    };
    let gfem = if cfg.gfem {
        2 * ((t + hist) * half * half + t * hist * half + hist * half * half + t * hist * half)
    } else {
        0
    };
    let propagation = 3 * t * hist + (t * k + t) * c * c + 2 * t * k * c;
    let scans = cfg.ssm_layers as u64 * (2 * selective_scan_macs(t, c, cfg.state_dim) + 2 * (t * c) as u64);
    (fps + grouping + pointnet + mask + gfem + propagation) as u64 + scans
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::MemoryFrame;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pts(n: usize, rng: &mut ChaCha8Rng) -> Vec<Point3> {
        (0..n)
            .map(|_| {
                Point3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-0.5..0.5),
                )
            })
            .collect()
    }

    fn mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> FeatureMatrix {
        Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0))
    }

    fn weights(c: usize, rng: &mut ChaCha8Rng) -> MipWeights {
        let mut w = MipWeights::init(c, rng);
        w.alpha.iter_mut().for_each(|a| *a = rng.random_range(0.5..1.5));
        w.beta.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        w.proj.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        w
    }

    fn cfg(k: usize) -> Config {
        Config {
            neighbors: k,
            ..Config::small()
        }
    }

    #[test]
    fn single_neighbor_passes_mixed_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (q, z, qb, f) = (pts(3, &mut rng), mat(3, 4, &mut rng), pts(5, &mut rng), mat(5, 4, &mut rng));
        let w = weights(4, &mut rng);
        let p = propagate(&q, &z, &qb, &f, &cfg(1), &w).unwrap();
        for j in 0..3 {
            let nb = p.neighbors.row(j)[0];
            let mut cat = f.row(nb).to_vec();
            cat.extend(z.row(j).iter());
            let mixed = w.proj.forward_row(Array1::from(cat).view()) * &w.alpha + &w.beta;
            assert!((&p.features.row(j) - &mixed).iter().all(|d| d.abs() < 1e-12));
            assert!(p.weights.slice(s![j, 0, ..]).iter().all(|v| *v == 1.0));
        }
    }

    #[test]
    fn identical_neighbors_get_equal_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = pts(2, &mut rng);
        let z = mat(2, 4, &mut rng);
        let qb = pts(6, &mut rng);
        let row = mat(1, 4, &mut rng);
        let f = Array2::from_shape_fn((6, 4), |(_, c)| row[[0, c]]);
        let w = weights(4, &mut rng);
        let p = propagate(&q, &z, &qb, &f, &cfg(3), &w).unwrap();
        assert!(p.weights.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
        let single = propagate(&q, &z, &qb, &f, &cfg(1), &w).unwrap();
        assert!((&p.features - &single.features).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn weights_sum_to_one_even_padded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = weights(4, &mut rng);
        for (hist, mode) in [(2, NeighborSoftmax::PerChannel), (9, NeighborSoftmax::Scalar)] {
            let c = Config {
                neighbor_softmax: mode,
                ..cfg(4)
            };
            let p = propagate(&pts(5, &mut rng), &mat(5, 4, &mut rng), &pts(hist, &mut rng), &mat(hist, 4, &mut rng), &c, &w)
                .unwrap();
            assert_eq!(p.neighbors.padded, hist < 4);
            for s in p.weights.sum_axis(Axis(1)).iter() {
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invariant_to_history_relabeling_and_locality() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (q, z) = (pts(4, &mut rng), mat(4, 4, &mut rng));
        let (qb, f) = (pts(12, &mut rng), mat(12, 4, &mut rng));
        let w = weights(4, &mut rng);
        let base = propagate(&q, &z, &qb, &f, &cfg(3), &w).unwrap();
        let perm: Vec<usize> = (0..12).map(|i| (i * 5) % 12).collect();
        let qp: Vec<Point3> = perm.iter().map(|&i| qb[i]).collect();
        let fp = f.select(Axis(0), &perm);
        let moved = propagate(&q, &z, &qp, &fp, &cfg(3), &w).unwrap();
        assert!((&base.features - &moved.features).iter().all(|d| d.abs() < 1e-12));

        let used: std::collections::HashSet<usize> = base.neighbors.indices.iter().copied().collect();
        let unused = (0..12).find(|i| !used.contains(i)).expect("some row unused");
        let mut f2 = f.clone();
        f2.row_mut(unused).fill(100.0);
        let poked = propagate(&q, &z, &qb, &f2, &cfg(3), &w).unwrap();
        assert_eq!(poked.features, base.features);
    }

    #[test]
    fn errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = weights(4, &mut rng);
        let q = pts(2, &mut rng);
        let z = mat(2, 4, &mut rng);
        assert!(matches!(
            propagate(&q, &z, &[], &Array2::zeros((0, 4)), &cfg(2), &w),
            Err(Error::EmptyMemoryBank)
        ));
        assert!(propagate(&q, &z, &pts(3, &mut rng), &mat(2, 4, &mut rng), &cfg(2), &w).is_err());
    }

    fn bank_of(frames: &[MemoryFrame]) -> MemoryBank {
        let mut bank = MemoryBank::new(frames.len());
        for (t, f) in frames.iter().enumerate() {
            bank.push(f.clone(), t as u64).unwrap();
        }
        bank
    }

    fn random_frame(c: &Config, rng: &mut ChaCha8Rng) -> MemoryFrame {
        MemoryFrame::new(
            pts(c.tokens, rng),
            mat(c.tokens, c.channels, rng),
            (0..c.tokens).map(|_| rng.random()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn forward_shapes_and_gfem_toggle() {
        let cfg = Config::small();
        let w = ModelWeights::init(&cfg, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cloud = Cloud::new(pts(60, &mut rng));
        let bank = bank_of(&[random_frame(&cfg, &mut rng), random_frame(&cfg, &mut rng)]);
        let on = mip_forward(&cloud, &bank, &cfg, &w).unwrap();
        assert_eq!(on.features.dim(), (cfg.tokens, cfg.channels));
        assert_eq!(on.coords.len(), cfg.tokens);
        let off = mip_forward(&cloud, &bank, &Config { gfem: false, ..cfg.clone() }, &w).unwrap();
        assert!(off.enhanced.is_none());
        let diff = (&on.features - &off.features).iter().fold(0.0f64, |m, d| m.max(d.abs()));
        assert!(diff > 0.0);
    }

    #[test]
    fn duplicated_history_matches_single_frame() {
        // Every neighbor of the single-frame run appears rho times in the
        // duplicated bank, so k = rho * k' reproduces the k' result.
        let base = Config::small();
        let w = ModelWeights::init(&base, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cloud = Cloud::new(pts(50, &mut rng));
        let frame = random_frame(&base, &mut rng);
        for rho in 1..=3 {
            let single = mip_forward(&cloud, &bank_of(&[frame.clone()]), &Config { neighbors: 2, ..base.clone() }, &w).unwrap();
            let dup = mip_forward(
                &cloud,
                &bank_of(&vec![frame.clone(); rho]),
                &Config {
                    neighbors: 2 * rho,
                    ..base.clone()
                },
                &w,
            )
            .unwrap();
            let d = (&single.features - &dup.features).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(d < 1e-9, "rho {rho}: {d}");
        }
    }

    #[test]
    fn flops_near_linear_and_match_instrumented() {
        let cfg = Config::default();
        let base = flops_mip(&cfg, cfg.tokens);
        assert!(base > 0);
        for n in [512usize, 1024, 4096] {
            let ratio = flops_mip(&cfg, 2 * n) as f64 / flops_mip(&cfg, n) as f64;
            assert!(ratio <= 2.3 && ratio > 1.0);
        }

        let cfg = Config::small();
        let w = ModelWeights::init(&cfg, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cloud = Cloud::new(pts(300, &mut rng));
        let frames: Vec<_> = (0..cfg.memory_size).map(|_| random_frame(&cfg, &mut rng)).collect();
        let bank = bank_of(&frames);
        let (_, measured) = flops::measure(|| mip_forward(&cloud, &bank, &cfg, &w).unwrap());
        let predicted = flops_mip(&cfg, 300);
        let rel = (measured as f64 - predicted as f64).abs() / predicted as f64;
        assert!(rel < 0.05, "measured {measured}, predicted {predicted}");
    }
}
