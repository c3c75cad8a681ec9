//! FIFO memory of past frames and mask-aware history features.

use std::collections::VecDeque;

use ndarray::{concatenate, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops;
use crate::geometry::Point3;
use crate::nn::FeatureMatrix;

/// Sampled coordinates, features and soft target mask of one past frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryFrame {
    pub coords: Vec<Point3>,
    pub features: FeatureMatrix,
    /// Target probability per token, in [0, 1].
    pub mask: Vec<f64>,
}

impl MemoryFrame {
    pub fn new(coords: Vec<Point3>, features: FeatureMatrix, mask: Vec<f64>) -> Result<Self> {
        if features.nrows() != coords.len() || mask.len() != coords.len() {
            return Err(Error::shape(
                "memory frame rows",
                coords.len(),
                format!("features {}, mask {}", features.nrows(), mask.len()),
            ));
        }
        if let Some(m) = mask.iter().find(|m| !(0.0..=1.0).contains(*m)) {
            return Err(Error::InvalidInput(format!("mask value {m} outside [0, 1]")));
        }
        Ok(Self {
            coords,
            features,
            mask,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    capacity: usize,
    frames: VecDeque<(u64, MemoryFrame)>,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "memory bank capacity must be >= 1");
        Self {
            capacity,
            frames: VecDeque::with_capacity(capacity + 1),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn timestamps(&self) -> Vec<u64> {
        self.frames.iter().map(|(t, _)| *t).collect()
    }

    pub fn last_timestamp(&self) -> Option<u64> {
        self.frames.back().map(|(t, _)| *t)
    }

    /// Frames, oldest first.
    pub fn frames(&self) -> impl Iterator<Item = &MemoryFrame> {
        self.frames.iter().map(|(_, f)| f)
    }

    /// Append a frame, evicting the oldest once the capacity is exceeded.
    pub fn push(&mut self, frame: MemoryFrame, t: u64) -> Result<()> {
        if let Some(last) = self.last_timestamp() {
            if t <= last {
                return Err(Error::NonMonotonicTimestamp { last, got: t });
            }
        }
        self.frames.push_back((t, frame));
        while self.frames.len() > self.capacity {
            self.frames.pop_front();
        }
        Ok(())
    }

    /// Keep only the newest `capacity` frames under a new capacity.
    pub fn with_capacity(&self, capacity: usize) -> Self {
        let mut out = Self::new(capacity);
        for (t, f) in &self.frames {
            out.push(f.clone(), *t).expect("timestamps already ordered");
        }
        out
    }
}

/// All stored frames stacked oldest to newest.
#[derive(Clone, Debug, PartialEq)]
pub struct History {
    pub coords: Vec<Point3>,
    pub features: FeatureMatrix,
    pub mask: Vec<f64>,
}

pub fn concat_bank(bank: &MemoryBank) -> Result<History> {
    if bank.is_empty() {
        return Err(Error::EmptyMemoryBank);
    }
    let channels = bank.frames().next().map(|f| f.features.ncols()).unwrap_or(0);
    if let Some(bad) = bank.frames().find(|f| f.features.ncols() != channels) {
        return Err(Error::shape("memory frame channels", channels, bad.features.ncols()));
    }
    let coords = bank.frames().flat_map(|f| f.coords.iter().copied()).collect();
    let views: Vec<_> = bank.frames().map(|f| f.features.view()).collect();
    let features = concatenate(Axis(0), &views).expect("equal channel counts");
    let mask = bank.frames().flat_map(|f| f.mask.iter().copied()).collect();
    Ok(History {
        coords,
        features,
        mask,
    })
}

/// Width-one convolution lifting a scalar mask to `C` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskEmbedWeights {
    pub weight: Array1<f64>,
    pub bias: Array1<f64>,
}

/// `phi(M)`: row `i` is `M[i] * weight + bias`.
pub fn mask_embedding(mask: &[f64], w: &MaskEmbedWeights) -> Result<FeatureMatrix> {
    if w.weight.len() != w.bias.len() {
        return Err(Error::shape("mask embedding bias", w.weight.len(), w.bias.len()));
    }
    let c = w.weight.len();
    flops::add((mask.len() * c) as u64);
    Ok(Array2::from_shape_fn((mask.len(), c), |(i, j)| mask[i] * w.weight[j] + w.bias[j]))
}

/// `F = E + phi(M)`.
pub fn fuse_mask(features: &FeatureMatrix, mask: &[f64], w: &MaskEmbedWeights) -> Result<FeatureMatrix> {
    if features.nrows() != mask.len() {
        return Err(Error::shape("mask rows", features.nrows(), mask.len()));
    }
    if features.ncols() != w.weight.len() {
        return Err(Error::shape("mask embedding channels", features.ncols(), w.weight.len()));
    }
    Ok(features + &mask_embedding(mask, w)?)
}
