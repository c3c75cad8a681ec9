//! Per-token box regression head, box selection and the training losses.
//!
//! All coordinates here share one frame: the token coordinates, the prior
//! box and the returned box. The tracker runs the head in the frame of the
//! previous box.

use ndarray::{concatenate, Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, Box7, Point3};
use crate::nn::{sigmoid, FeatureMatrix, Linear};

/// Output columns of the head.
pub const HEAD_OUTPUTS: usize = 10;
const COL_MASK: usize = 0;
const COL_VOTE: usize = 1;
const COL_VOTE_Q: usize = 4;
const COL_BOX: usize = 5;
const COL_BOX_Q: usize = 9;

/// One affine map from `[E_t row ++ token xyz]` to all ten outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights {
    pub linear: Linear,
}

impl HeadWeights {
    pub fn init<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        Self {
            linear: Linear::init(channels + 3, HEAD_OUTPUTS, rng),
        }
    }

    pub fn zeros(channels: usize) -> Self {
        Self {
            linear: Linear::zeros(channels + 3, HEAD_OUTPUTS),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalizeOutput {
    pub mask_logits: Array1<f64>,
    /// Center offsets from each token, (N, 3).
    pub votes: Array2<f64>,
    pub vote_quality: Array1<f64>,
    /// (dx, dy, dz, dtheta) relative to each vote center, (N, 4).
    pub box_params: Array2<f64>,
    pub box_quality: Array1<f64>,
}

impl LocalizeOutput {
    pub fn zeros(n: usize) -> Self {
        Self::from_matrix(&Array2::zeros((n, HEAD_OUTPUTS)))
    }

    pub fn len(&self) -> usize {
        self.mask_logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask_logits.is_empty()
    }

    pub fn from_matrix(m: &Array2<f64>) -> Self {
        Self {
            mask_logits: m.column(COL_MASK).to_owned(),
            votes: m.slice(ndarray::s![.., COL_VOTE..COL_VOTE + 3]).to_owned(),
            vote_quality: m.column(COL_VOTE_Q).to_owned(),
            box_params: m.slice(ndarray::s![.., COL_BOX..COL_BOX + 4]).to_owned(),
            box_quality: m.column(COL_BOX_Q).to_owned(),
        }
    }

    /// Inverse of the column split, (N, 10).
    pub fn to_matrix(&self) -> Array2<f64> {
        let n = self.len();
        let mut m = Array2::zeros((n, HEAD_OUTPUTS));
        m.column_mut(COL_MASK).assign(&self.mask_logits);
        m.slice_mut(ndarray::s![.., COL_VOTE..COL_VOTE + 3]).assign(&self.votes);
        m.column_mut(COL_VOTE_Q).assign(&self.vote_quality);
        m.slice_mut(ndarray::s![.., COL_BOX..COL_BOX + 4]).assign(&self.box_params);
        m.column_mut(COL_BOX_Q).assign(&self.box_quality);
        m
    }

    pub fn vote(&self, j: usize) -> Point3 {
        Point3::new(self.votes[[j, 0]], self.votes[[j, 1]], self.votes[[j, 2]])
    }

    fn offset(&self, j: usize) -> Point3 {
        Point3::new(self.box_params[[j, 0]], self.box_params[[j, 1]], self.box_params[[j, 2]])
    }

    /// Per-token target probability.
    pub fn mask_probabilities(&self) -> Vec<f64> {
        self.mask_logits.iter().map(|&x| sigmoid(x)).collect()
    }

    fn check(&self) -> Result<()> {
        let n = self.len();
        let ok = self.votes.dim() == (n, 3)
            && self.vote_quality.len() == n
            && self.box_params.dim() == (n, 4)
            && self.box_quality.len() == n;
        if !ok {
            return Err(Error::shape(
                "head output",
                format!("{n} tokens"),
                format!(
                    "votes {:?}, vote quality {}, box {:?}, box quality {}",
                    self.votes.dim(),
                    self.vote_quality.len(),
                    self.box_params.dim(),
                    self.box_quality.len()
                ),
            ));
        }
        Ok(())
    }
}

/// `[E_t ++ Q_t]`, the head input.
pub fn head_input(coords: &[Point3], features: &FeatureMatrix) -> Result<Array2<f64>> {
    if coords.len() != features.nrows() {
        return Err(Error::shape("head input rows", coords.len(), features.nrows()));
    }
    let xyz = Array2::from_shape_fn((coords.len(), 3), |(i, j)| coords[i].to_array()[j]);
    Ok(concatenate(Axis(1), &[features.view(), xyz.view()]).expect("rows checked"))
}

pub fn head_forward(coords: &[Point3], features: &FeatureMatrix, w: &HeadWeights) -> Result<LocalizeOutput> {
    let x = head_input(coords, features)?;
    if w.linear.output_dim() != HEAD_OUTPUTS {
        return Err(Error::shape("head outputs", HEAD_OUTPUTS, w.linear.output_dim()));
    }
    Ok(LocalizeOutput::from_matrix(&w.linear.forward(&x)?))
}

/// Index of the highest box quality (lowest index on ties) and its box.
pub fn select_box(coords: &[Point3], out: &LocalizeOutput, prior: &Box7) -> Result<(usize, Box7)> {
    out.check()?;
    if coords.len() != out.len() {
        return Err(Error::shape("selection tokens", out.len(), coords.len()));
    }
    if coords.is_empty() {
        return Err(Error::InvalidInput("no tokens to select from".into()));
    }
    let mut best = 0;
    for j in 1..out.len() {
        if out.box_quality[j] > out.box_quality[best] {
            best = j;
        }
    }
    let center = coords[best] + out.vote(best) + out.offset(best);
    let b = Box7::try_new(center, prior.w, prior.l, prior.h, prior.theta + out.box_params[[best, 3]])?;
    Ok((best, b))
}

pub fn localize(
    coords: &[Point3],
    features: &FeatureMatrix,
    w: &HeadWeights,
    prior: &Box7,
) -> Result<(LocalizeOutput, Box7)> {
    let out = head_forward(coords, features, w)?;
    let (_, b) = select_box(coords, &out, prior)?;
    Ok((out, b))
}

/// Ground truth for one frame, in the head's frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    /// 1 for target tokens, 0 otherwise.
    pub mask: Vec<f64>,
    pub center: Point3,
    /// Yaw of the ground-truth box relative to the prior.
    pub dtheta: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mask: f64,
    pub center: f64,
    pub vote_quality: f64,
    pub box_quality: f64,
    pub box_params: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [f64; 5] {
        [self.mask, self.center, self.vote_quality, self.box_quality, self.box_params]
    }
}

pub const TERM_NAMES: [&str; 5] = ["mask", "center", "vote_quality", "box_quality", "box_params"];

/// `-(y ln p + (1-y) ln(1-p))` with `p = sigmoid(x)`, evaluated stably.
pub fn bce_with_logits(x: f64, y: f64) -> f64 {
    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
}

pub fn smooth_l1(r: f64, beta: f64) -> f64 {
    if r.abs() < beta {
        0.5 * r * r / beta
    } else {
        r.abs() - 0.5 * beta
    }
}

pub fn smooth_l1_grad(r: f64, beta: f64) -> f64 {
    if r.abs() < beta {
        r / beta
    } else {
        r.signum()
    }
}

/// Binary quality labels for votes and boxes. They are treated as constants
/// by the gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct QualityTargets {
    pub vote: Vec<f64>,
    pub boxes: Vec<f64>,
}

pub fn quality_targets(coords: &[Point3], out: &LocalizeOutput, t: &Targets, cfg: &Config) -> QualityTargets {
    let r2 = cfg.quality_radius * cfg.quality_radius;
    let label = |p: Point3| if p.dist2(t.center) < r2 { 1.0 } else { 0.0 };
    QualityTargets {
        vote: (0..out.len()).map(|j| label(coords[j] + out.vote(j))).collect(),
        boxes: (0..out.len()).map(|j| label(coords[j] + out.vote(j) + out.offset(j))).collect(),
    }
}

fn check_targets(coords: &[Point3], out: &LocalizeOutput, t: &Targets) -> Result<()> {
    out.check()?;
    if coords.len() != out.len() || t.mask.len() != out.len() {
        return Err(Error::shape(
            "loss inputs",
            out.len(),
            format!("coords {}, mask {}", coords.len(), t.mask.len()),
        ));
    }
    Ok(())
}

/// Losses and per-term gradients with respect to the head outputs, under
/// fixed quality labels.
pub fn loss_terms_with_labels(
    coords: &[Point3],
    out: &LocalizeOutput,
    t: &Targets,
    q: &QualityTargets,
    cfg: &Config,
) -> Result<(LossBreakdown, [LocalizeOutput; 5])> {
    check_targets(coords, out, t)?;
    let n = out.len();
    let nf = n.max(1) as f64;
    let mut grads: [LocalizeOutput; 5] = std::array::from_fn(|_| LocalizeOutput::zeros(n));
    let mut l = LossBreakdown::default();
    let fg: Vec<usize> = (0..n).filter(|&j| t.mask[j] > 0.5).collect();
    let beta = cfg.smooth_l1_beta;
    let dtheta_gt = normalize_angle(t.dtheta);

    for j in 0..n {
        let x = out.mask_logits[j];
        l.mask += bce_with_logits(x, t.mask[j]) / nf;
        grads[0].mask_logits[j] = (sigmoid(x) - t.mask[j]) / nf;

        let x = out.vote_quality[j];
        l.vote_quality += bce_with_logits(x, q.vote[j]) / nf;
        grads[2].vote_quality[j] = (sigmoid(x) - q.vote[j]) / nf;

        let x = out.box_quality[j];
        l.box_quality += bce_with_logits(x, q.boxes[j]) / nf;
        grads[3].box_quality[j] = (sigmoid(x) - q.boxes[j]) / nf;
    }

    if !fg.is_empty() {
        let nc = 3.0 * fg.len() as f64;
        let nb = 4.0 * fg.len() as f64;
        for &j in &fg {
            let voted = coords[j] + out.vote(j);
            let rc = (voted - t.center).to_array();
            let implied = (voted + out.offset(j) - t.center).to_array();
            for a in 0..3 {
                l.center += rc[a] * rc[a] / nc;
                grads[1].votes[[j, a]] = 2.0 * rc[a] / nc;

                l.box_params += smooth_l1(implied[a], beta) / nb;
                let g = smooth_l1_grad(implied[a], beta) / nb;
                grads[4].box_params[[j, a]] = g;
                grads[4].votes[[j, a]] = g;
            }
            let rt = out.box_params[[j, 3]] - dtheta_gt;
            l.box_params += smooth_l1(rt, beta) / nb;
            grads[4].box_params[[j, 3]] = smooth_l1_grad(rt, beta) / nb;
        }
    }
    l.total = l.mask + l.center + l.vote_quality + l.box_quality + l.box_params;
    Ok((l, grads))
}

pub fn losses(coords: &[Point3], out: &LocalizeOutput, t: &Targets, cfg: &Config) -> Result<LossBreakdown> {
    let q = quality_targets(coords, out, t, cfg);
    Ok(loss_terms_with_labels(coords, out, t, &q, cfg)?.0)
}

/// Gradient of the total loss with respect to the head outputs.
pub fn losses_with_grad(
    coords: &[Point3],
    out: &LocalizeOutput,
    t: &Targets,
    cfg: &Config,
) -> Result<(LossBreakdown, LocalizeOutput)> {
    let q = quality_targets(coords, out, t, cfg);
    let (l, grads) = loss_terms_with_labels(coords, out, t, &q, cfg)?;
    let mut total = grads[0].to_matrix();
    for g in &grads[1..] {
        total += &g.to_matrix();
    }
    Ok((l, LocalizeOutput::from_matrix(&total)))
}

/// Weight and bias gradients of the head for a given output gradient.
pub fn head_backward(coords: &[Point3], features: &FeatureMatrix, grad: &LocalizeOutput) -> Result<Linear> {
    let x = head_input(coords, features)?;
    let g = grad.to_matrix();
    Ok(Linear {
        weight: x.t().dot(&g),
        bias: g.sum_axis(Axis(0)),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    /// Largest relative error per loss term, in [`TERM_NAMES`] order.
    pub max_rel_error: [f64; 5],
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares the analytic gradients of every term with central differences.
pub fn losses_grad_check(coords: &[Point3], out: &LocalizeOutput, t: &Targets, cfg: &Config) -> Result<GradCheckReport> {
    const H: f64 = 1e-6;
    const TOL: f64 = 1e-4;
    let q = quality_targets(coords, out, t, cfg);
    let (_, grads) = loss_terms_with_labels(coords, out, t, &q, cfg)?;
    let base = out.to_matrix();
    let mut worst = [0.0f64; 5];
    for idx in 0..base.len() {
        let (r, c) = (idx / HEAD_OUTPUTS, idx % HEAD_OUTPUTS);
        let eval = |delta: f64| -> Result<[f64; 5]> {
            let mut m = base.clone();
            m[[r, c]] += delta;
            Ok(loss_terms_with_labels(coords, &LocalizeOutput::from_matrix(&m), t, &q, cfg)?.0.terms())
        };
        let (plus, minus) = (eval(H)?, eval(-H)?);
        for term in 0..5 {
            let fd = (plus[term] - minus[term]) / (2.0 * H);
            let analytic = grads[term].to_matrix()[[r, c]];
            let err = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-2);
            worst[term] = worst[term].max(err);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        tolerance: TOL,
        passed: worst.iter().all(|e| *e <= TOL),
    })
}
