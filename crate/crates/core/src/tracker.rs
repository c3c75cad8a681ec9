//! Online tracking loop: crop, propagate, localize, remember.
//!
//! The network always runs in the frame of the previous box (origin at its
//! center, x along its length). The memory bank keeps token coordinates in
//! world space and is re-expressed in the current frame before each step.

use std::cell::{Cell, RefCell};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::geometry::{center_error, iou3d, points_in_box, to_box_frame, Box7};
use crate::localize::localize;
use crate::memory::{concat_bank, History, MemoryBank, MemoryFrame};
use crate::mip::{first_frame_forward, mip_forward_with_history, MipOutput};
use crate::pointops::Cloud;
use crate::weights::ModelWeights;

/// Ordered frames of one target with per-frame ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Tracklet {
    pub frames: Vec<Cloud>,
    pub gt: Vec<Box7>,
    pub class: String,
    pub source: String,
}

impl Tracklet {
    pub fn new(frames: Vec<Cloud>, gt: Vec<Box7>, class: impl Into<String>, source: impl Into<String>) -> Result<Self> {
        if frames.len() != gt.len() {
            return Err(Error::shape("tracklet labels", frames.len(), gt.len()));
        }
        if frames.len() < 2 {
            return Err(Error::TrackletTooShort { len: frames.len() });
        }
        Ok(Self {
            frames,
            gt,
            class: class.into(),
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Keep frames `0, interval, 2 * interval, ...`.
pub fn subsample_htv(t: &Tracklet, interval: usize) -> Result<Tracklet> {
    if interval == 0 {
        return Err(Error::InvalidInput("interval must be >= 1".into()));
    }
    let keep: Vec<usize> = (0..t.len()).step_by(interval).collect();
    Tracklet::new(
        keep.iter().map(|&i| t.frames[i].clone()).collect(),
        keep.iter().map(|&i| t.gt[i]).collect(),
        t.class.clone(),
        t.source.clone(),
    )
}

/// Search region around `prev`: every extent `e` becomes
/// `max(scale * e, e + 2 * margin)`, i.e. at least `margin` on each side.
pub fn search_region(prev: &Box7, cfg: &Config) -> Box7 {
    let grow = |e: f64| (cfg.search_scale * e).max(e + 2.0 * cfg.search_margin);
    Box7 {
        w: grow(prev.w),
        l: grow(prev.l),
        h: grow(prev.h),
        ..*prev
    }
}

/// Points inside the search region, in the frame of `prev`.
pub fn crop(cloud: &Cloud, prev: &Box7, cfg: &Config) -> Cloud {
    let region = search_region(prev, cfg);
    let keep = points_in_box(cloud, &region, 0.0);
    to_box_frame(&cloud.filter(&keep), prev)
}

/// `prev` expressed in its own frame.
pub fn canonical_prior(prev: &Box7) -> Box7 {
    Box7 {
        cx: 0.0,
        cy: 0.0,
        cz: 0.0,
        theta: 0.0,
        ..*prev
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerState {
    pub bank: MemoryBank,
    pub current_box: Box7,
    pub cfg: Config,
    pub weights: Arc<ModelWeights>,
    /// Index of the last processed frame.
    pub frame_index: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub predicted: Box7,
    /// The search region was empty; the previous box was kept.
    pub coasting: bool,
    /// Token mask probabilities pushed into the bank.
    pub mask: Vec<f64>,
}

fn memory_frame(out: &MipOutput, prev: &Box7, mask: Vec<f64>) -> Result<MemoryFrame> {
    let world = out.coords.iter().map(|p| prev.to_world(*p)).collect();
    MemoryFrame::new(world, out.features.clone(), mask)
}

/// Stacked bank contents with coordinates expressed in the frame of `frame`.
pub fn history_in_frame(bank: &MemoryBank, frame: &Box7) -> Result<History> {
    let mut h = concat_bank(bank)?;
    h.coords.iter_mut().for_each(|p| *p = frame.to_local(*p));
    Ok(h)
}

impl TrackerState {
    pub fn init(first: &Cloud, b1: Box7, cfg: &Config, weights: Arc<ModelWeights>) -> Result<Self> {
        cfg.validate()?;
        if first.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let local = crop(first, &b1, cfg);
        if local.is_empty() {
            return Err(Error::EmptySearchRegion);
        }
        let out = first_frame_forward(&local, cfg, &weights)?;
        let target = canonical_prior(&b1);
        let mask = out
            .coords
            .iter()
            .map(|p| if target.contains(*p, 0.0) { 1.0 } else { 0.0 })
            .collect();
        let mut bank = MemoryBank::new(cfg.memory_size);
        bank.push(memory_frame(&out, &b1, mask)?, 0)?;
        Ok(Self {
            bank,
            current_box: b1,
            cfg: cfg.clone(),
            weights,
            frame_index: 0,
        })
    }

    /// Track into the next frame.
    pub fn step(&mut self, cloud: &Cloud) -> Result<StepOutcome> {
        self.step_with(cloud, None)
    }

    /// As [`TrackerState::step`], but `replace` overrides the predicted box
    /// (used by the ground-truth replay mode).
    pub fn step_with(&mut self, cloud: &Cloud, replace: Option<Box7>) -> Result<StepOutcome> {
        let t = self.frame_index + 1;
        let prev = self.current_box;
        let local = crop(cloud, &prev, &self.cfg);
        self.frame_index = t;
        if local.is_empty() {
            return Ok(StepOutcome {
                predicted: replace.unwrap_or(prev),
                coasting: true,
                mask: Vec::new(),
            });
        }
        let history = history_in_frame(&self.bank, &prev)?;
        let out = mip_forward_with_history(&local, &history, &self.cfg, &self.weights)?;
        let (head, local_box) = localize(&out.coords, &out.features, &self.weights.head, &canonical_prior(&prev))?;
        let predicted = match replace {
            Some(b) => b,
            None => Box7::try_new(prev.to_world(local_box.center()), prev.w, prev.l, prev.h, prev.theta + local_box.theta)?,
        };
        let mask = head.mask_probabilities();
        self.bank.push(memory_frame(&out, &prev, mask.clone())?, t)?;
        self.current_box = predicted;
        Ok(StepOutcome {
            predicted,
            coasting: false,
            mask,
        })
    }
}

/// Where predictions come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorMode {
    #[default]
    Model,
    /// Oracle upper bound: every prediction is the ground truth.
    GtReplay,
}

/// Ground-truth access log. Tracking may only read frame 0; scoring reads
/// everything after [`LabelAudit::begin_scoring`].
#[derive(Debug)]
pub struct LabelAudit<'a> {
    labels: &'a [Box7],
    tracking_reads: RefCell<Vec<usize>>,
    scoring: Cell<bool>,
}

impl<'a> LabelAudit<'a> {
    pub fn new(labels: &'a [Box7]) -> Self {
        Self {
            labels,
            tracking_reads: RefCell::new(Vec::new()),
            scoring: Cell::new(false),
        }
    }

    pub fn get(&self, i: usize) -> Box7 {
        if !self.scoring.get() {
            self.tracking_reads.borrow_mut().push(i);
        }
        self.labels[i]
    }

    pub fn begin_scoring(&self) {
        self.scoring.set(true);
    }

    /// Frames whose label was read while tracking.
    pub fn tracking_reads(&self) -> Vec<usize> {
        self.tracking_reads.borrow().clone()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub frame: usize,
    pub predicted: Box7,
    pub iou: f64,
    pub center_error: f64,
    pub coasting: bool,
}

/// Per-frame results; entry 0 is the initialization frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackletRun {
    pub frames: Vec<FrameResult>,
}

impl TrackletRun {
    /// Frames that count toward the metrics (all but the first).
    pub fn scored(&self) -> &[FrameResult] {
        &self.frames[1.min(self.frames.len())..]
    }

    pub fn ious(&self) -> Vec<f64> {
        self.scored().iter().map(|f| f.iou).collect()
    }

    pub fn center_errors(&self) -> Vec<f64> {
        self.scored().iter().map(|f| f.center_error).collect()
    }
}

/// One-pass evaluation: initialize on frame 0 with its label, then track
/// without ever re-initializing.
pub fn run_tracklet(t: &Tracklet, cfg: &Config, weights: Arc<ModelWeights>, mode: PredictorMode) -> Result<TrackletRun> {
    let audit = LabelAudit::new(&t.gt);
    run_tracklet_audited(t, &audit, cfg, weights, mode)
}

pub fn run_tracklet_audited(
    t: &Tracklet,
    labels: &LabelAudit<'_>,
    cfg: &Config,
    weights: Arc<ModelWeights>,
    mode: PredictorMode,
) -> Result<TrackletRun> {
    if t.len() < 2 {
        return Err(Error::TrackletTooShort { len: t.len() });
    }
    let first = labels.get(0);
    let mut state = TrackerState::init(&t.frames[0], first, cfg, weights)?;
    let mut predictions = vec![(first, false)];
    for (i, cloud) in t.frames.iter().enumerate().skip(1) {
        let replace = match mode {
            PredictorMode::Model => None,
            PredictorMode::GtReplay => Some(labels.get(i)),
        };
        let out = state.step_with(cloud, replace)?;
        predictions.push((out.predicted, out.coasting));
    }

    labels.begin_scoring();
    let frames = predictions
        .into_iter()
        .enumerate()
        .map(|(i, (predicted, coasting))| {
            let gt = labels.get(i);
            FrameResult {
                frame: i,
                predicted,
                iou: iou3d(&predicted, &gt),
                center_error: center_error(&predicted, &gt),
                coasting,
            }
        })
        .collect();
    Ok(TrackletRun { frames })
}
