use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use super::selective::{selective_scan, SelectiveParams};
use crate::error::{Error, Result};
use crate::nn::{rms_norm, FeatureMatrix};

/// One bidirectional layer: a forward scan and a backward scan over the
/// serialised tokens, summed, added to the input and RMS-normalised.
#[derive(Clone, Debug, PartialEq)]
pub struct BiSsmLayer {
    pub forward: SelectiveParams,
    pub backward: SelectiveParams,
    pub norm_scale: Array1<f64>,
}

impl BiSsmLayer {
    pub fn init<R: Rng + ?Sized>(channels: usize, state: usize, rng: &mut R) -> Self {
        Self {
            forward: SelectiveParams::init(channels, state, rng),
            backward: SelectiveParams::init(channels, state, rng),
            norm_scale: Array1::ones(channels),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiSsmStack {
    pub layers: Vec<BiSsmLayer>,
}

pub fn identity_order(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn check_permutation(order: &[usize], n: usize) -> Result<()> {
    if order.len() != n {
        return Err(Error::NotPermutation { len: n });
    }
    let mut seen = vec![false; n];
    for &i in order {
        if i >= n || seen[i] {
            return Err(Error::NotPermutation { len: n });
        }
        seen[i] = true;
    }
    Ok(())
}

fn gather(x: &FeatureMatrix, rows: impl Iterator<Item = usize>) -> FeatureMatrix {
    let picked: Vec<usize> = rows.collect();
    x.select(Axis(0), &picked)
}

/// `order[i]` is the row of `x` visited at scan position `i`.
pub fn bi_ssm_layer(layer: &BiSsmLayer, x: &FeatureMatrix, order: &[usize]) -> Result<FeatureMatrix> {
    let n = x.nrows();
    check_permutation(order, n)?;
    if layer.norm_scale.len() != x.ncols() {
        return Err(Error::shape("bi-ssm norm scale", x.ncols(), layer.norm_scale.len()));
    }
    let serial = gather(x, order.iter().copied());
    let fwd = selective_scan(&layer.forward, &serial)?;
    let reversed = gather(&serial, (0..n).rev());
    let bwd_rev = selective_scan(&layer.backward, &reversed)?;

    let mut mixed = Array2::<f64>::zeros(x.dim());
    for (pos, &row) in order.iter().enumerate() {
        let mut out = mixed.row_mut(row);
        let f = fwd.row(pos);
        let b = bwd_rev.row(n - 1 - pos);
        for c in 0..out.len() {
            out[c] = x[[row, c]] + (f[c] + b[c]);
        }
    }
    Ok(rms_norm(&mixed, &layer.norm_scale))
}

pub fn bi_ssm_stack(stack: &BiSsmStack, x: &FeatureMatrix, order: &[usize]) -> Result<FeatureMatrix> {
    let mut layers = stack.layers.iter();
    let first = layers
        .next()
        .ok_or_else(|| Error::InvalidInput("bi-ssm stack needs at least one layer".into()))?;
    let mut h = bi_ssm_layer(first, x, order)?;
    for layer in layers {
        h = bi_ssm_layer(layer, &h, order)?;
    }
    Ok(h)
}
