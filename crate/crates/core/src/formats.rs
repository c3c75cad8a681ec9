//! On-disk formats.
//!
//! A tracklet directory holds:
//! - `NNNNNN.bin`: one frame, consecutive 16-byte records of little-endian
//!   f32 `(x, y, z, intensity)`, the KITTI velodyne layout
//! - `labels.jsonl`: one object per frame,
//!   `{"frame", "cx", "cy", "cz", "w", "l", "h", "theta"}`
//! - `meta.json`: `{"class", "source", ...}`
//!
//! Results files are pretty-printed JSON ([`ResultsFile`]); wall-clock
//! timings go to a `<results>.timing.json` sidecar so that the results
//! themselves are reproducible byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::geometry::{Box7, Point3};
use crate::pointops::Cloud;
use crate::tracker::{FrameResult, PredictorMode, Tracklet};

pub const RECORD_BYTES: usize = 16;
pub const LABELS_FILE: &str = "labels.jsonl";
pub const META_FILE: &str = "meta.json";

pub fn frame_file_name(i: usize) -> String {
    format!("{i:06}.bin")
}

pub fn encode_frame(cloud: &Cloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * RECORD_BYTES);
    for (i, p) in cloud.points.iter().enumerate() {
        let intensity = cloud.intensity.as_ref().map_or(0.0, |v| v[i]);
        for v in [p.x, p.y, p.z, intensity] {
            out.extend((v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_frame(bytes: &[u8], origin: &Path) -> Result<Cloud> {
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(Error::Format {
            path: origin.to_path_buf(),
            reason: format!("{} bytes is not a multiple of {RECORD_BYTES}", bytes.len()),
        });
    }
    let mut points = Vec::with_capacity(bytes.len() / RECORD_BYTES);
    let mut intensity = Vec::with_capacity(bytes.len() / RECORD_BYTES);
    for rec in bytes.chunks_exact(RECORD_BYTES) {
        let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().expect("4 bytes")) as f64;
        points.push(Point3::new(f(0), f(1), f(2)));
        intensity.push(f(3));
    }
    Cloud::with_intensity(points, intensity)
}

pub fn write_frame(path: &Path, cloud: &Cloud) -> Result<()> {
    fs::write(path, encode_frame(cloud)).map_err(|e| Error::io(path, e))
}

pub fn read_frame(path: &Path) -> Result<Cloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_frame(&bytes, path)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRecord {
    pub frame: usize,
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub theta: f64,
}

impl LabelRecord {
    pub fn new(frame: usize, b: &Box7) -> Self {
        Self {
            frame,
            cx: b.cx,
            cy: b.cy,
            cz: b.cz,
            w: b.w,
            l: b.l,
            h: b.h,
            theta: b.theta,
        }
    }

    pub fn to_box(&self) -> Result<Box7> {
        Box7::try_new(Point3::new(self.cx, self.cy, self.cz), self.w, self.l, self.h, self.theta)
    }
}

pub fn encode_labels(gt: &[Box7]) -> String {
    gt.iter()
        .enumerate()
        .map(|(i, b)| serde_json::to_string(&LabelRecord::new(i, b)).expect("plain struct") + "\n")
        .collect()
}

pub fn decode_labels(text: &str, origin: &Path) -> Result<Vec<Box7>> {
    let bad = |line: usize, reason: String| Error::Format {
        path: origin.to_path_buf(),
        reason: format!("line {line}: {reason}"),
    };
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: LabelRecord = serde_json::from_str(line).map_err(|e| bad(n + 1, e.to_string()))?;
        if rec.frame != out.len() {
            return Err(bad(n + 1, format!("expected frame {}, found {}", out.len(), rec.frame)));
        }
        out.push(rec.to_box().map_err(|e| bad(n + 1, e.to_string()))?);
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrackletMeta {
    pub class: String,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

pub fn write_tracklet(dir: &Path, t: &Tracklet, meta: &TrackletMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in t.frames.iter().enumerate() {
        write_frame(&dir.join(frame_file_name(i)), f)?;
    }
    let labels = dir.join(LABELS_FILE);
    fs::write(&labels, encode_labels(&t.gt)).map_err(|e| Error::io(&labels, e))?;
    let meta_path = dir.join(META_FILE);
    let text = serde_json::to_string_pretty(meta).expect("plain struct") + "\n";
    fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))
}

/// Read a tracklet directory. Every labelled frame must have its `.bin`.
pub fn read_tracklet(dir: &Path) -> Result<(Tracklet, TrackletMeta)> {
    let labels_path = dir.join(LABELS_FILE);
    let text = fs::read_to_string(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
    let gt = decode_labels(&text, &labels_path)?;
    let missing: Vec<PathBuf> = (0..gt.len())
        .map(|i| dir.join(frame_file_name(i)))
        .filter(|p| !p.is_file())
        .collect();
    if !missing.is_empty() {
        let list: Vec<String> = missing.iter().map(|p| p.display().to_string()).collect();
        return Err(Error::Format {
            path: dir.to_path_buf(),
            reason: format!("missing frame files: {}", list.join(", ")),
        });
    }
    let frames = (0..gt.len())
        .map(|i| read_frame(&dir.join(frame_file_name(i))))
        .collect::<Result<Vec<_>>>()?;
    let meta_path = dir.join(META_FILE);
    let meta = match fs::read_to_string(&meta_path) {
        Ok(s) => serde_json::from_str(&s).map_err(|e| Error::Format {
            path: meta_path.clone(),
            reason: e.to_string(),
        })?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => TrackletMeta {
            class: "unknown".into(),
            source: dir.display().to_string(),
            ..Default::default()
        },
        Err(e) => return Err(Error::io(&meta_path, e)),
    };
    let t = Tracklet::new(frames, gt, meta.class.clone(), meta.source.clone())?;
    Ok((t, meta))
}

/// sha256 over the tracklet exactly as it would be written to disk.
pub fn tracklet_digest(t: &Tracklet) -> String {
    let mut h = Sha256::new();
    for f in &t.frames {
        let bytes = encode_frame(f);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    h.update(encode_labels(&t.gt).as_bytes());
    hex::encode(h.finalize())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Enough to re-run a command and get the same bytes back.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub config: Config,
    /// Input path to sha256.
    pub input_hashes: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub seed: Option<u64>,
    /// Sidecar holding wall-clock timings, if any.
    pub timing: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// Success AUC, percent.
    pub success: f64,
    /// Precision AUC, percent.
    pub precision: f64,
    /// Frames counted (initialization frames excluded).
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackletResult {
    pub class: String,
    pub source: String,
    pub frames: Vec<FrameResult>,
    pub summary: Summary,
}

pub const RESULTS_SCHEMA: &str = "mt3d.results.v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultsFile {
    pub schema: String,
    pub interval: usize,
    pub mode: PredictorMode,
    pub tracklets: Vec<TrackletResult>,
    pub summary: Summary,
    pub manifest: RunManifest,
}

impl ResultsFile {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data") + "\n"
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let r: ResultsFile = serde_json::from_str(text).map_err(|e| Error::Format {
            path: origin.to_path_buf(),
            reason: e.to_string(),
        })?;
        if r.schema != RESULTS_SCHEMA {
            return Err(Error::Format {
                path: origin.to_path_buf(),
                reason: format!("unknown schema `{}`", r.schema),
            });
        }
        Ok(r)
    }
}

pub fn timing_sidecar(results: &Path) -> PathBuf {
    let mut name = results.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".timing.json");
    results.with_file_name(name)
}
