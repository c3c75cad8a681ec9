//! Point sampling, neighbor search and token embedding.

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Config, FpsStart};
use crate::error::{Error, Result};
use crate::flops;
use crate::geometry::Point3;
use crate::nn::{relu, FeatureMatrix, Linear};

/// One LiDAR frame.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Cloud {
    pub points: Vec<Point3>,
    /// Optional per-point reflectance in [0, 1], same length as `points`.
    pub intensity: Option<Vec<f64>>,
}

impl Cloud {
    pub fn new(points: Vec<Point3>) -> Self {
        Self {
            points,
            intensity: None,
        }
    }

    pub fn with_intensity(points: Vec<Point3>, intensity: Vec<f64>) -> Result<Self> {
        if points.len() != intensity.len() {
            return Err(Error::shape("cloud intensity", points.len(), intensity.len()));
        }
        Ok(Self {
            points,
            intensity: Some(intensity),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn map_points(&self, f: impl Fn(Point3) -> Point3) -> Cloud {
        Cloud {
            points: self.points.iter().map(|p| f(*p)).collect(),
            intensity: self.intensity.clone(),
        }
    }

    /// Keep the points whose mask entry is true.
    pub fn filter(&self, keep: &[bool]) -> Cloud {
        let points = self
            .points
            .iter()
            .zip(keep)
            .filter(|(_, k)| **k)
            .map(|(p, _)| *p)
            .collect();
        let intensity = self.intensity.as_ref().map(|i| {
            i.iter()
                .zip(keep)
                .filter(|(_, k)| **k)
                .map(|(v, _)| *v)
                .collect()
        });
        Cloud { points, intensity }
    }
}

/// Start index for sampling: the lowest index holding the lexicographically
/// smallest point, or a seeded random index.
pub fn fps_start(cloud: &Cloud, mode: FpsStart) -> Result<usize> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok(match mode {
        FpsStart::Lexicographic => {
            let mut best = 0;
            for (i, p) in cloud.points.iter().enumerate().skip(1) {
                if p.lex_cmp(&cloud.points[best]).is_lt() {
                    best = i;
                }
            }
            best
        }
        FpsStart::Seeded(seed) => ChaCha8Rng::seed_from_u64(seed).random_range(0..cloud.len()),
    })
}

/// Farthest point sampling. Returns `n` indices in selection order. When the
/// cloud holds fewer than `n` points the chosen indices are cycled.
pub fn fps(cloud: &Cloud, n: usize, start: usize) -> Result<Vec<usize>> {
    let len = cloud.len();
    if len == 0 {
        return Err(Error::EmptyCloud);
    }
    if n == 0 {
        return Err(Error::InvalidInput("fps: n must be >= 1".into()));
    }
    if start >= len {
        return Err(Error::InvalidInput(format!("fps: start {start} out of range for {len} points")));
    }
    let distinct = n.min(len);
    let mut chosen = Vec::with_capacity(n);
    let mut taken = vec![false; len];
    let mut min_d = vec![f64::INFINITY; len];
    let mut current = start;
    chosen.push(current);
    taken[current] = true;
    while chosen.len() < distinct {
        let c = cloud.points[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in cloud.points.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let d = p.dist2(c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        flops::add(3 * len as u64);
        current = best;
        taken[current] = true;
        chosen.push(current);
    }
    for i in distinct..n {
        chosen.push(chosen[i % distinct]);
    }
    Ok(chosen)
}

/// `k` neighbor indices per query, nearest first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborIndex {
    pub k: usize,
    pub indices: Vec<usize>,
    /// Set when the reference set was smaller than `k` and rows repeat.
    pub padded: bool,
}

impl NeighborIndex {
    pub fn rows(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn row(&self, q: usize) -> &[usize] {
        &self.indices[q * self.k..(q + 1) * self.k]
    }
}

/// Exhaustive k-nearest neighbors. Ties go to the smaller index; if there are
/// fewer than `k` references the sorted references repeat round-robin.
pub fn knn(queries: &[Point3], refs: &[Point3], k: usize) -> Result<NeighborIndex> {
    if refs.is_empty() {
        return Err(Error::EmptyReferences);
    }
    if k == 0 {
        return Err(Error::InvalidInput("knn: k must be >= 1".into()));
    }
    let take = k.min(refs.len());
    let padded = refs.len() < k;
    let mut indices = Vec::with_capacity(queries.len() * k);
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(refs.len());
    let by_dist = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    for q in queries {
        scratch.clear();
        scratch.extend(refs.iter().enumerate().map(|(i, r)| (q.dist2(*r), i)));
        if take < scratch.len() {
            scratch.select_nth_unstable_by(take - 1, by_dist);
        }
        let head = &mut scratch[..take];
        head.sort_unstable_by(by_dist);
        for j in 0..k {
            indices.push(head[j % take].1);
        }
    }
    flops::add(3 * (queries.len() * refs.len()) as u64);
    Ok(NeighborIndex { k, indices, padded })
}

/// Two shared per-point layers (3 -> C/2 -> C) followed by a max-pool.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerWeights {
    pub layer1: Linear,
    pub layer2: Linear,
}

impl TokenizerWeights {
    pub fn check(&self, cfg: &Config) -> Result<()> {
        let c = cfg.channels;
        let shapes = [
            (self.layer1.input_dim(), 3),
            (self.layer1.output_dim(), c / 2),
            (self.layer2.input_dim(), c / 2),
            (self.layer2.output_dim(), c),
        ];
        if shapes.iter().any(|(a, b)| a != b) {
            return Err(Error::shape(
                "tokenizer weights",
                format!("3 -> {} -> {}", c / 2, c),
                format!(
                    "{} -> {} -> {}",
                    self.layer1.input_dim(),
                    self.layer1.output_dim(),
                    self.layer2.output_dim()
                ),
            ));
        }
        Ok(())
    }

    /// Embedding of a single relative offset, before pooling.
    pub fn embed_offset(&self, offset: Point3) -> Result<ndarray::Array1<f64>> {
        let x = Array2::from_shape_vec((1, 3), offset.to_array().to_vec()).expect("1x3");
        let h = self.layer1.forward(&x)?.mapv(relu);
        Ok(self.layer2.forward(&h)?.mapv(relu).row(0).to_owned())
    }
}

/// Sampled token coordinates and their features.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokens {
    /// Sampled coordinates in selection order.
    pub coords: Vec<Point3>,
    pub features: FeatureMatrix,
    /// The cloud had fewer points than tokens or group size.
    pub padded: bool,
}

pub fn tokenize(cloud: &Cloud, cfg: &Config, w: &TokenizerWeights) -> Result<Tokens> {
    w.check(cfg)?;
    let start = fps_start(cloud, cfg.fps_start)?;
    let centers_idx = fps(cloud, cfg.tokens, start)?;
    let centers: Vec<Point3> = centers_idx.iter().map(|&i| cloud.points[i]).collect();
    let groups = knn(&centers, &cloud.points, cfg.group_size)?;
    let g = cfg.group_size;

    let mut rel = Array2::zeros((centers.len() * g, 3));
    for (t, center) in centers.iter().enumerate() {
        for (j, &nb) in groups.row(t).iter().enumerate() {
            let d = cloud.points[nb] - *center;
            let mut row = rel.row_mut(t * g + j);
            row[0] = d.x;
            row[1] = d.y;
            row[2] = d.z;
        }
    }
    let hidden = w.layer1.forward(&rel)?.mapv(relu);
    let per_point = w.layer2.forward(&hidden)?.mapv(relu);

    let c = cfg.channels;
    let mut features = Array2::from_elem((centers.len(), c), f64::NEG_INFINITY);
    for (r, row) in per_point.axis_iter(Axis(0)).enumerate() {
        let mut out = features.row_mut(r / g);
        out.iter_mut().zip(row.iter()).for_each(|(o, v)| *o = o.max(*v));
    }
    Ok(Tokens {
        coords: centers,
        features,
        padded: groups.padded || cloud.len() < cfg.tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn line(xs: &[f64]) -> Cloud {
        Cloud::new(xs.iter().map(|&x| Point3::new(x, 0.0, 0.0)).collect())
    }

    fn random_cloud(n: usize, seed: u64) -> Cloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Cloud::new(
            (0..n)
                .map(|_| {
                    Point3::new(
                        rng.random_range(-3.0..3.0),
                        rng.random_range(-3.0..3.0),
                        rng.random_range(-1.0..1.0),
                    )
                })
                .collect(),
        )
    }

    #[test]
    fn fps_small_cases() {
        let c = line(&[0.0, 1.0, 2.0, 9.0]);
        assert_eq!(fps(&c, 2, 0).unwrap(), vec![0, 3]);
        assert_eq!(fps(&c, 1, 2).unwrap(), vec![2]);
        let mut all = fps(&c, 4, 1).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert_eq!(fps(&c, 6, 0).unwrap()[4..], [0, 3]);
        assert!(matches!(fps(&Cloud::default(), 1, 0), Err(Error::EmptyCloud)));
    }

    #[test]
    fn fps_permutation_with_duplicates() {
        let c = line(&[1.0, 1.0, 1.0]);
        let mut all = fps(&c, 3, 0).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2]);
    }

    #[test]
    fn fps_start_rule() {
        let c = Cloud::new(vec![
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 5.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
        ]);
        assert_eq!(fps_start(&c, FpsStart::Lexicographic).unwrap(), 2);
        let s = fps_start(&c, FpsStart::Seeded(7)).unwrap();
        assert_eq!(s, fps_start(&c, FpsStart::Seeded(7)).unwrap());
        assert!(s < 4);
    }

    #[test]
    fn knn_cases() {
        let refs = vec![Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 0.0, 0.0)];
        let nn = knn(&[Point3::new(1.0, 0.0, 0.0)], &refs, 1).unwrap();
        assert_eq!(nn.row(0), &[1]);
        let padded = knn(&[Point3::new(0.1, 0.0, 0.0)], &refs, 4).unwrap();
        assert!(padded.padded);
        assert_eq!(padded.row(0), &[0, 1, 0, 1]);
        // tie: both at distance 1 from the query, smaller index first
        let tie = knn(&[Point3::new(0.5, 0.0, 0.0)], &refs, 1).unwrap();
        assert_eq!(tie.row(0), &[0]);
        assert!(matches!(knn(&refs, &[], 1), Err(Error::EmptyReferences)));
    }

    fn small_cfg(tokens: usize, group: usize) -> Config {
        Config {
            tokens,
            group_size: group,
            channels: 8,
            ..Config::default()
        }
    }

    fn weights(seed: u64) -> TokenizerWeights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = TokenizerWeights {
            layer1: Linear::init(3, 4, &mut rng),
            layer2: Linear::init(4, 8, &mut rng),
        };
        w.layer1.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        w.layer2.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        w
    }

    #[test]
    fn tokenize_degenerate_cloud() {
        let cfg = small_cfg(6, 3);
        let cloud = Cloud::new(vec![Point3::new(1.0, 2.0, 3.0); 6]);
        let tokens = tokenize(&cloud, &cfg, &weights(1)).unwrap();
        for r in 1..6 {
            assert_eq!(tokens.features.row(r), tokens.features.row(0));
        }
    }

    #[test]
    fn tokenize_single_neighbor_is_zero_embedding() {
        let cfg = small_cfg(5, 1);
        let w = weights(2);
        let tokens = tokenize(&random_cloud(20, 3), &cfg, &w).unwrap();
        // relu(relu(0 * W1 + b1) W2 + b2), evaluated directly
        let h: Vec<f64> = w.layer1.bias.iter().map(|b| b.max(0.0)).collect();
        let expected: Vec<f64> = (0..8)
            .map(|j| {
                let s: f64 = (0..4).map(|i| h[i] * w.layer2.weight[[i, j]]).sum::<f64>()
                    + w.layer2.bias[j];
                s.max(0.0)
            })
            .collect();
        for r in 0..5 {
            for j in 0..8 {
                assert!((tokens.features[[r, j]] - expected[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tokenize_translation_invariant() {
        let cfg = small_cfg(8, 4);
        let w = weights(4);
        let cloud = random_cloud(40, 5);
        let moved = cloud.map_points(|p| p + Point3::new(12.5, -3.0, 0.7));
        let a = tokenize(&cloud, &cfg, &w).unwrap();
        let b = tokenize(&moved, &cfg, &w).unwrap();
        assert!((&a.features - &b.features).iter().all(|d| d.abs() < 1e-9));
    }

    #[test]
    fn tokenize_shape_mismatch() {
        let cfg = small_cfg(8, 4);
        let mut w = weights(4);
        w.layer2 = Linear::zeros(4, 6);
        assert!(matches!(
            tokenize(&random_cloud(10, 1), &cfg, &w),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn fps_is_greedy_max_min(seed in 0u64..1000, n in 1usize..64, take in 1usize..64) {
            let cloud = random_cloud(n, seed);
            let take = take.min(n);
            let start = fps_start(&cloud, FpsStart::Lexicographic).unwrap();
            let sel = fps(&cloud, take, start).unwrap();
            prop_assert_eq!(sel[0], start);
            prop_assert_eq!(&sel, &fps(&cloud, take, start).unwrap());
            for step in 1..sel.len() {
                let min_to_set = |i: usize| {
                    sel[..step].iter().map(|&s| cloud.points[i].dist2(cloud.points[s])).fold(f64::INFINITY, f64::min)
                };
                let best = (0..n).filter(|i| !sel[..step].contains(i)).map(min_to_set).fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(min_to_set(sel[step]), best);
            }
        }

        #[test]
        fn knn_matches_exhaustive_sort(seed in 0u64..1000, nref in 1usize..256, k in 1usize..8) {
            let refs = random_cloud(nref, seed).points;
            let queries = random_cloud(10, seed + 1).points;
            let got = knn(&queries, &refs, k).unwrap();
            for (qi, q) in queries.iter().enumerate() {
                let mut all: Vec<(f64, usize)> = refs.iter().enumerate().map(|(i, r)| (q.dist2(*r), i)).collect();
                all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                let take = k.min(nref);
                let expected: Vec<usize> = (0..k).map(|j| all[j % take].1).collect();
                prop_assert_eq!(got.row(qi), &expected[..]);
            }
            prop_assert_eq!(got.padded, nref < k);
        }

        #[test]
        fn tokenize_point_order_invariant(seed in 0u64..200) {
            let cfg = small_cfg(8, 4);
            let w = weights(seed);
            let cloud = random_cloud(30, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let mut perm: Vec<usize> = (0..30).collect();
            for i in (1..30).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let shuffled = Cloud::new(perm.iter().map(|&i| cloud.points[i]).collect());
            let a = tokenize(&cloud, &cfg, &w).unwrap();
            let b = tokenize(&shuffled, &cfg, &w).unwrap();
            prop_assert_eq!(a.coords, b.coords);
            prop_assert!((&a.features - &b.features).iter().all(|d| d.abs() < 1e-12));
        }
    }
}
