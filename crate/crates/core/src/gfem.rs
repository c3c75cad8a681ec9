//! Grouped feature enhancement: the channels are split in two halves and
//! each half runs its own cross-attention from current tokens to history.

use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::flops;
use crate::nn::{softmax_in_place, uniform, FeatureMatrix};

/// Query/key/value maps of one channel group, each (C/2, C/2).
#[derive(Clone, Debug, PartialEq)]
pub struct GroupWeights {
    pub query: Array2<f64>,
    pub key: Array2<f64>,
    pub value: Array2<f64>,
}

impl GroupWeights {
    pub fn init<R: Rng + ?Sized>(half: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (half as f64).sqrt();
        Self {
            query: uniform((half, half), bound, rng),
            key: uniform((half, half), bound, rng),
            value: uniform((half, half), bound, rng),
        }
    }

    fn half(&self) -> usize {
        self.query.nrows()
    }

    fn check(&self, half: usize) -> Result<()> {
        for m in [&self.query, &self.key, &self.value] {
            if m.dim() != (half, half) {
                return Err(Error::shape(
                    "attention group weights",
                    format!("({half}, {half})"),
                    format!("{:?}", m.dim()),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GfemWeights {
    pub groups: [GroupWeights; 2],
}

impl GfemWeights {
    pub fn init<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let half = channels / 2;
        Self {
            groups: [GroupWeights::init(half, rng), GroupWeights::init(half, rng)],
        }
    }
}

/// Columns `[0, C/2)` and `[C/2, C)`.
pub fn split_channels(x: &FeatureMatrix) -> Result<(FeatureMatrix, FeatureMatrix)> {
    let c = x.ncols();
    if c % 2 != 0 {
        return Err(Error::InvalidInput(format!("cannot split {c} channels into two groups")));
    }
    Ok((x.slice(s![.., ..c / 2]).to_owned(), x.slice(s![.., c / 2..]).to_owned()))
}

pub fn concat_channels(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<FeatureMatrix> {
    concatenate(Axis(1), &[a.view(), b.view()])
        .map_err(|_| Error::shape("channel concatenation rows", a.nrows(), b.nrows()))
}

/// Row-stochastic attention of `queries` over `keys` for one group.
pub fn attention_weights(
    queries: &FeatureMatrix,
    keys: &FeatureMatrix,
    g: &GroupWeights,
    scaled: bool,
) -> Result<Array2<f64>> {
    let half = g.half();
    g.check(half)?;
    if queries.ncols() != half || keys.ncols() != half {
        return Err(Error::shape(
            "attention inputs",
            half,
            format!("queries {}, keys {}", queries.ncols(), keys.ncols()),
        ));
    }
    let q = queries.dot(&g.query);
    let k = keys.dot(&g.key);
    let mut logits = q.dot(&k.t());
    if scaled {
        logits /= (half as f64).sqrt();
    }
    for mut row in logits.rows_mut() {
        softmax_in_place(row.as_slice_mut().expect("standard layout"));
    }
    flops::add(((queries.nrows() + keys.nrows()) * half * half + queries.nrows() * keys.nrows() * half) as u64);
    Ok(logits)
}

fn attend_group(
    queries: &FeatureMatrix,
    history: &FeatureMatrix,
    g: &GroupWeights,
    scaled: bool,
) -> Result<FeatureMatrix> {
    let attn = attention_weights(queries, history, g, scaled)?;
    let values = history.dot(&g.value);
    flops::add((history.nrows() * g.half() * g.half() + queries.nrows() * history.nrows() * g.half()) as u64);
    Ok(attn.dot(&values))
}

/// Per group `g`: `softmax((Z^g W_Q)(E^g W_K)^T [/ sqrt(C/2)]) (E^g W_V)`,
/// halves concatenated back along channels.
pub fn grouped_cross_attention(
    tokens: &FeatureMatrix,
    history: &FeatureMatrix,
    w: &GfemWeights,
    scaled: bool,
) -> Result<FeatureMatrix> {
    if tokens.ncols() != history.ncols() {
        return Err(Error::shape("attention channels", tokens.ncols(), history.ncols()));
    }
    if history.nrows() == 0 {
        return Err(Error::EmptyMemoryBank);
    }
    let (z1, z2) = split_channels(tokens)?;
    let (e1, e2) = split_channels(history)?;
    let out1 = attend_group(&z1, &e1, &w.groups[0], scaled)?;
    let out2 = attend_group(&z2, &e2, &w.groups[1], scaled)?;
    concat_channels(&out1, &out2)
}
