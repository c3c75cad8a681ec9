//! Seeded synthetic LiDAR tracklets.
//!
//! The sensor sits at [`SENSOR`] and records at [`FRAME_DT`] seconds per
//! frame. Targets and distractors are boxes resting on the ground plane
//! `z = 0`. Returns are sampled on the faces turned toward the sensor, with
//! a count that falls off as `1 / range^2` around [`REFERENCE_RANGE`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Box7, Point3};
use crate::pointops::Cloud;
use crate::tracker::Tracklet;

pub const SENSOR: Point3 = Point3::new(0.0, 0.0, 1.73);
pub const FRAME_DT: f64 = 0.1;
/// Range at which a target receives `points_per_frame` returns.
pub const REFERENCE_RANGE: f64 = 10.0;
/// Surface samples are pulled this far inside the box.
pub const SURFACE_INSET: f64 = 1e-6;
const MIN_TARGET_POINTS: usize = 5;

/// Constant body-frame motion from `start_frame` on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionSegment {
    pub start_frame: usize,
    /// Along the heading, m/s.
    pub speed: f64,
    /// rad/s.
    pub yaw_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distractor {
    /// Initial center relative to the target's, world axes.
    pub offset: [f64; 3],
    pub theta: f64,
    /// World-frame velocity, m/s.
    pub velocity: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    pub class: String,
    /// (w, l, h)
    pub size: [f64; 3],
    /// Initial ground position (x, y) and heading.
    pub start: [f64; 3],
    pub motion: Vec<MotionSegment>,
    pub frames: usize,
    pub points_per_frame: usize,
    /// Ground returns per frame within `clutter_radius` of the target.
    pub clutter: usize,
    pub clutter_radius: f64,
    pub distractors: Vec<Distractor>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(format!("scenario {}: {m}", self.name)));
        if self.frames < 2 {
            return bad(format!("{} frames, need at least 2", self.frames));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma {}", self.noise_sigma));
        }
        if self.size.iter().any(|s| !(*s > 0.0)) {
            return bad(format!("size {:?}", self.size));
        }
        if self.motion.first().map(|m| m.start_frame) != Some(0) {
            return bad("motion must start at frame 0".into());
        }
        if self.motion.windows(2).any(|w| w[1].start_frame <= w[0].start_frame) {
            return bad("motion segments must have increasing start frames".into());
        }
        Ok(())
    }

    /// Ground-truth boxes of every frame.
    pub fn trajectory(&self) -> Vec<Box7> {
        let [w, l, h] = self.size;
        let mut pos = Point3::new(self.start[0], self.start[1], h / 2.0);
        let mut theta = self.start[2];
        let mut out = Vec::with_capacity(self.frames);
        for f in 0..self.frames {
            out.push(Box7::new(pos, w, l, h, theta));
            let seg = self.motion.iter().rev().find(|m| m.start_frame <= f).expect("validated");
            pos = pos + Point3::new(seg.speed * FRAME_DT, 0.0, 0.0).rotate_z(theta);
            theta += seg.yaw_rate * FRAME_DT;
        }
        out
    }

    fn distractor_boxes(&self, target0: &Box7, frame: usize) -> Vec<Box7> {
        let t = frame as f64 * FRAME_DT;
        self.distractors
            .iter()
            .map(|d| {
                let c = target0.center()
                    + Point3::new(d.offset[0], d.offset[1], d.offset[2])
                    + Point3::new(d.velocity[0], d.velocity[1], d.velocity[2]) * t;
                Box7::new(c, target0.w, target0.l, target0.h, d.theta)
            })
            .collect()
    }
}

/// A tracklet plus how many leading points of each frame came from the
/// target surface.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub tracklet: Tracklet,
    pub target_points: Vec<usize>,
    pub distractor_boxes: Vec<Vec<Box7>>,
}

/// Faces of a box as (center, outward normal, half-size along u, u, half-size along v, v), box frame.
fn faces(b: &Box7) -> [(Point3, Point3, f64, Point3, f64, Point3); 6] {
    let he = b.half_extents();
    let x = Point3::new(1.0, 0.0, 0.0);
    let y = Point3::new(0.0, 1.0, 0.0);
    let z = Point3::new(0.0, 0.0, 1.0);
    [
        (x * he.x, x, he.y, y, he.z, z),
        (-x * he.x, -x, he.y, y, he.z, z),
        (y * he.y, y, he.x, x, he.z, z),
        (-y * he.y, -y, he.x, x, he.z, z),
        (z * he.z, z, he.x, x, he.y, y),
        (-z * he.z, -z, he.x, x, he.y, y),
    ]
}

/// Samples on the faces of `b` visible from the sensor.
fn surface_points(b: &Box7, budget: usize, rng: &mut ChaCha8Rng) -> Vec<Point3> {
    let range = (b.center() - SENSOR).norm().max(1.0);
    let count = ((budget as f64) * (REFERENCE_RANGE / range).powi(2)).round() as usize;
    let count = count.clamp(MIN_TARGET_POINTS, 4 * budget.max(MIN_TARGET_POINTS));
    let sensor_local = b.to_local(SENSOR);
    let visible: Vec<_> = faces(b)
        .into_iter()
        .filter_map(|f| {
            let facing = (sensor_local - f.0).dot(f.1);
            (facing > 0.0).then(|| (f, 4.0 * f.2 * f.4 * facing / (sensor_local - f.0).norm()))
        })
        .collect();
    let total: f64 = visible.iter().map(|(_, a)| a).sum();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut pick = rng.random::<f64>() * total;
        let mut face = &visible[visible.len() - 1].0;
        for (f, a) in &visible {
            if pick < *a {
                face = f;
                break;
            }
            pick -= a;
        }
        let (c, n, hu, u, hv, v) = *face;
        let su = rng.random_range(-1.0..1.0) * (hu - SURFACE_INSET).max(0.0);
        let sv = rng.random_range(-1.0..1.0) * (hv - SURFACE_INSET).max(0.0);
        let p = c - n * SURFACE_INSET + u * su + v * sv;
        out.push(b.to_world(p));
    }
    out
}

pub fn generate(spec: &ScenarioSpec) -> Result<Tracklet> {
    Ok(generate_labeled(spec)?.tracklet)
}

pub fn generate_labeled(spec: &ScenarioSpec) -> Result<Generated> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma).expect("sigma validated");
    let gt = spec.trajectory();
    let mut frames = Vec::with_capacity(spec.frames);
    let mut target_points = Vec::with_capacity(spec.frames);
    let mut distractor_boxes = Vec::with_capacity(spec.frames);
    for (f, b) in gt.iter().enumerate() {
        let mut pts = surface_points(b, spec.points_per_frame, &mut rng);
        target_points.push(pts.len());
        let others = spec.distractor_boxes(&gt[0], f);
        for d in &others {
            pts.extend(surface_points(d, spec.points_per_frame, &mut rng));
        }
        for p in pts.iter_mut() {
            *p = *p + Point3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng));
        }
        for _ in 0..spec.clutter {
            let r = spec.clutter_radius * rng.random::<f64>().sqrt();
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            pts.push(Point3::new(
                b.cx + r * a.cos(),
                b.cy + r * a.sin(),
                noise.sample(&mut rng).abs(),
            ));
        }
        let intensity = (0..pts.len()).map(|_| rng.random::<f64>()).collect();
        frames.push(Cloud::with_intensity(pts, intensity)?);
        distractor_boxes.push(others);
    }
    Ok(Generated {
        tracklet: Tracklet::new(frames, gt, spec.class.clone(), spec.name.clone())?,
        target_points,
        distractor_boxes,
    })
}

pub const PRESET_NAMES: [&str; 4] = ["car-straight", "car-turn", "ped-sparse", "distractor-pair"];
pub const PRESET_FRAMES: usize = 40;

const CAR: [f64; 3] = [1.8, 4.2, 1.6];
const PEDESTRIAN: [f64; 3] = [0.7, 0.8, 1.75];

fn car(name: &str, seed: u64) -> ScenarioSpec {
    ScenarioSpec {
        name: name.into(),
        class: "car".into(),
        size: CAR,
        start: [8.0, 2.0, 0.0],
        motion: vec![MotionSegment {
            start_frame: 0,
            speed: 8.0,
            yaw_rate: 0.0,
        }],
        frames: PRESET_FRAMES,
        points_per_frame: 400,
        clutter: 300,
        clutter_radius: 12.0,
        distractors: Vec::new(),
        noise_sigma: 0.02,
        seed,
    }
}

pub fn preset(name: &str) -> Option<ScenarioSpec> {
    Some(match name {
        "car-straight" => car(name, 11),
        "car-turn" => ScenarioSpec {
            start: [12.0, -3.0, 0.3],
            motion: vec![
                MotionSegment {
                    start_frame: 0,
                    speed: 6.0,
                    yaw_rate: 0.0,
                },
                MotionSegment {
                    start_frame: 15,
                    speed: 5.0,
                    yaw_rate: 0.6,
                },
            ],
            ..car(name, 12)
        },
        "ped-sparse" => ScenarioSpec {
            class: "pedestrian".into(),
            size: PEDESTRIAN,
            start: [7.0, 1.5, 1.2],
            motion: vec![MotionSegment {
                start_frame: 0,
                speed: 1.4,
                yaw_rate: 0.1,
            }],
            points_per_frame: 60,
            clutter: 200,
            noise_sigma: 0.03,
            ..car(name, 13)
        },
        "distractor-pair" => ScenarioSpec {
            distractors: vec![Distractor {
                offset: [0.0, 3.5, 0.0],
                theta: 0.0,
                velocity: [8.0, 0.0, 0.0],
            }],
            ..car(name, 14)
        },
        _ => return None,
    })
}

pub fn preset_suite() -> Vec<ScenarioSpec> {
    PRESET_NAMES.iter().map(|n| preset(n).expect("known preset")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::points_in_box;

    #[test]
    fn presets_are_valid() {
        let suite = preset_suite();
        assert!(suite.len() >= 4);
        for s in &suite {
            s.validate().unwrap();
            assert_eq!(s.frames, 40);
        }
        let pair = generate_labeled(&preset("distractor-pair").unwrap()).unwrap();
        for (b, ds) in pair.tracklet.gt.iter().zip(&pair.distractor_boxes) {
            assert!(ds.iter().any(|d| (d.center() - b.center()).norm() <= 5.0));
        }
        assert!(preset("nope").is_none());
    }

    #[test]
    fn static_scene() {
        let spec = ScenarioSpec {
            motion: vec![MotionSegment {
                start_frame: 0,
                speed: 0.0,
                yaw_rate: 0.0,
            }],
            clutter: 0,
            noise_sigma: 0.0,
            frames: 5,
            ..car("static", 1)
        };
        let g = generate_labeled(&spec).unwrap();
        let t = &g.tracklet;
        assert!(t.gt.iter().all(|b| *b == t.gt[0]));
        for (cloud, &n) in t.frames.iter().zip(&g.target_points) {
            assert_eq!(cloud.len(), n);
            assert!(points_in_box(cloud, &t.gt[0], 0.0).iter().all(|k| *k));
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let s = preset("car-turn").unwrap();
        assert_eq!(generate(&s).unwrap(), generate(&s).unwrap());
        let other = ScenarioSpec { seed: 99, ..s.clone() };
        assert_ne!(generate(&s).unwrap().frames[0], generate(&other).unwrap().frames[0]);
    }

    #[test]
    fn target_points_stay_in_box() {
        for spec in preset_suite() {
            let g = generate_labeled(&spec).unwrap();
            let (mut inside, mut total) = (0usize, 0usize);
            for ((cloud, b), &n) in g.tracklet.frames.iter().zip(&g.tracklet.gt).zip(&g.target_points) {
                let head = Cloud::new(cloud.points[..n].to_vec());
                inside += points_in_box(&head, b, 3.0 * spec.noise_sigma).iter().filter(|k| **k).count();
                total += n;
            }
            assert!(inside as f64 >= 0.95 * total as f64, "{}: {inside}/{total}", spec.name);
        }
    }

    #[test]
    fn trajectory_follows_motion() {
        let s = preset("car-turn").unwrap();
        let gt = s.trajectory();
        let d = gt[1].center() - gt[0].center();
        assert!((d.norm() - 0.6).abs() < 1e-12);
        assert_eq!(gt[15].theta, 0.3);
        assert!((gt[16].theta - (0.3 + 0.06)).abs() < 1e-12);
        assert!(gt.iter().all(|b| b.cz == 0.8));
    }

    #[test]
    fn invalid_specs() {
        assert!(ScenarioSpec { frames: 1, ..car("x", 0) }.validate().is_err());
        assert!(ScenarioSpec { noise_sigma: -1.0, ..car("x", 0) }.validate().is_err());
        assert!(ScenarioSpec { motion: vec![], ..car("x", 0) }.validate().is_err());
    }
}
