//! Oriented boxes, point/box membership and rotated 3D IoU.
//!
//! Boxes rotate about the vertical axis only. In the box frame the length
//! `l` runs along +x (the heading), the width `w` along +y and the height
//! `h` along +z.

use std::cmp::Ordering;
use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::pointops::Cloud;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ZERO: Point3 = Point3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, o: Point3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dist2(self, o: Point3) -> f64 {
        let (dx, dy, dz) = (self.x - o.x, self.y - o.y, self.z - o.z);
        dx * dx + dy * dy + dz * dz
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    /// Lexicographic comparison on (x, y, z).
    pub fn lex_cmp(&self, o: &Point3) -> Ordering {
        self.x
            .total_cmp(&o.x)
            .then(self.y.total_cmp(&o.y))
            .then(self.z.total_cmp(&o.z))
    }

    /// Rotate about +z by `theta`.
    pub fn rotate_z(self, theta: f64) -> Point3 {
        let (s, c) = theta.sin_cos();
        Point3::new(c * self.x - s * self.y, s * self.x + c * self.y, self.z)
    }
}

impl From<[f64; 3]> for Point3 {
    fn from(a: [f64; 3]) -> Self {
        Point3::new(a[0], a[1], a[2])
    }
}

impl Add for Point3 {
    type Output = Point3;
    fn add(self, o: Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Point3 {
    type Output = Point3;
    fn sub(self, o: Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Point3;
    fn mul(self, s: f64) -> Point3 {
        Point3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Point3 {
    type Output = Point3;
    fn neg(self) -> Point3 {
        Point3::new(-self.x, -self.y, -self.z)
    }
}

/// Wrap an angle into (-pi, pi].
pub fn normalize_angle(theta: f64) -> f64 {
    let mut t = theta % (2.0 * PI);
    if t <= -PI {
        t += 2.0 * PI;
    } else if t > PI {
        t -= 2.0 * PI;
    }
    t
}

/// 7-DoF oriented box: center, size and yaw.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box7 {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub theta: f64,
}

impl Box7 {
    /// Builds a box, normalising `theta`. Panics on non-positive or
    /// non-finite sizes; use [`Box7::try_new`] for untrusted input.
    pub fn new(center: Point3, w: f64, l: f64, h: f64, theta: f64) -> Self {
        Self::try_new(center, w, l, h, theta).expect("invalid box")
    }

    pub fn try_new(center: Point3, w: f64, l: f64, h: f64, theta: f64) -> crate::Result<Self> {
        let ok = center.is_finite()
            && [w, l, h].iter().all(|s| s.is_finite() && *s > 0.0)
            && theta.is_finite();
        if !ok {
            return Err(crate::Error::InvalidInput(format!(
                "invalid box: center {center:?}, size ({w}, {l}, {h}), theta {theta}"
            )));
        }
        Ok(Self {
            cx: center.x,
            cy: center.y,
            cz: center.z,
            w,
            l,
            h,
            theta: normalize_angle(theta),
        })
    }

    pub fn center(&self) -> Point3 {
        Point3::new(self.cx, self.cy, self.cz)
    }

    pub fn volume(&self) -> f64 {
        self.w * self.l * self.h
    }

    /// Half extents along the box frame axes (x: length, y: width, z: height).
    pub fn half_extents(&self) -> Point3 {
        Point3::new(self.l * 0.5, self.w * 0.5, self.h * 0.5)
    }

    pub fn with_center(&self, c: Point3) -> Self {
        Self {
            cx: c.x,
            cy: c.y,
            cz: c.z,
            ..*self
        }
    }

    /// Same pose, every extent grown by `2 * margin`.
    pub fn enlarged(&self, margin: f64) -> Self {
        Self {
            w: self.w + 2.0 * margin,
            l: self.l + 2.0 * margin,
            h: self.h + 2.0 * margin,
            ..*self
        }
    }

    pub fn apply_delta(&self, d: &BoxDelta) -> Self {
        Self {
            cx: self.cx + d.dx,
            cy: self.cy + d.dy,
            cz: self.cz + d.dz,
            theta: normalize_angle(self.theta + d.dtheta),
            ..*self
        }
    }

    /// World point to box frame.
    pub fn to_local(&self, p: Point3) -> Point3 {
        (p - self.center()).rotate_z(-self.theta)
    }

    /// Box frame point to world.
    pub fn to_world(&self, p: Point3) -> Point3 {
        p.rotate_z(self.theta) + self.center()
    }

    pub fn contains(&self, p: Point3, margin: f64) -> bool {
        let q = self.to_local(p);
        let he = self.half_extents();
        q.x.abs() <= he.x + margin && q.y.abs() <= he.y + margin && q.z.abs() <= he.z + margin
    }

    /// Bird's-eye footprint, counter-clockwise.
    pub fn bev_polygon(&self) -> [[f64; 2]; 4] {
        let he = self.half_extents();
        let c = self.center();
        CORNER_SIGNS_BOTTOM.map(|(sx, sy)| {
            let p = Point3::new(sx * he.x, sy * he.y, 0.0).rotate_z(self.theta) + c;
            [p.x, p.y]
        })
    }

    fn key(&self) -> [f64; 7] {
        [self.cx, self.cy, self.cz, self.w, self.l, self.h, self.theta]
    }
}

/// Per-frame pose offset: translation and yaw change.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoxDelta {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub dtheta: f64,
}

impl BoxDelta {
    pub fn new(dx: f64, dy: f64, dz: f64, dtheta: f64) -> Self {
        Self {
            dx,
            dy,
            dz,
            dtheta: normalize_angle(dtheta),
        }
    }

    /// Offset carrying `from` onto `to` (sizes ignored).
    pub fn between(from: &Box7, to: &Box7) -> Self {
        Self::new(to.cx - from.cx, to.cy - from.cy, to.cz - from.cz, to.theta - from.theta)
    }
}

const CORNER_SIGNS_BOTTOM: [(f64, f64); 4] = [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)];

/// The eight corners: bottom face counter-clockwise seen from above starting
/// at (+l/2, +w/2), then the top face in the same order.
pub fn box_corners(b: &Box7) -> [Point3; 8] {
    let he = b.half_extents();
    let mut out = [Point3::ZERO; 8];
    for (face, sz) in [-1.0, 1.0].into_iter().enumerate() {
        for (i, (sx, sy)) in CORNER_SIGNS_BOTTOM.iter().enumerate() {
            out[face * 4 + i] = b.to_world(Point3::new(sx * he.x, sy * he.y, sz * he.z));
        }
    }
    out
}

pub fn center_error(a: &Box7, b: &Box7) -> f64 {
    (a.center() - b.center()).norm()
}

/// Boundary-inclusive membership of every point in `b` grown by `margin`.
pub fn points_in_box(c: &Cloud, b: &Box7, margin: f64) -> Vec<bool> {
    c.points.iter().map(|p| b.contains(*p, margin)).collect()
}

pub fn to_box_frame(c: &Cloud, b: &Box7) -> Cloud {
    c.map_points(|p| b.to_local(p))
}

pub fn from_box_frame(c: &Cloud, b: &Box7) -> Cloud {
    c.map_points(|p| b.to_world(p))
}

const CLIP_EPS: f64 = 1e-9;

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let (p, q) = (poly[i], poly[(i + 1) % n]);
        acc += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * acc.abs()
}

/// Sutherland-Hodgman clip of `subject` against the convex CCW `clip`.
fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = cross(a, b, cur) >= -CLIP_EPS;
            let prev_in = cross(a, b, prev) >= -CLIP_EPS;
            if cur_in {
                if !prev_in {
                    out.push(segment_line_intersection(prev, cur, a, b));
                }
                out.push(cur);
            } else if prev_in {
                out.push(segment_line_intersection(prev, cur, a, b));
            }
        }
    }
    out
}

fn segment_line_intersection(p: [f64; 2], q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let dp = cross(a, b, p);
    let dq = cross(a, b, q);
    let denom = dp - dq;
    if denom.abs() < f64::MIN_POSITIVE {
        return p;
    }
    let t = dp / denom;
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Area of the BEV footprint overlap.
pub fn bev_intersection_area(a: &Box7, b: &Box7) -> f64 {
    polygon_area(&clip_convex(&a.bev_polygon(), &b.bev_polygon()))
}

/// Exact rotated 3D IoU in [0, 1].
pub fn iou3d(a: &Box7, b: &Box7) -> f64 {
    // Fix the argument order so the result is bitwise symmetric.
    let swap = a
        .key()
        .iter()
        .zip(b.key().iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        == Some(Ordering::Greater);
    let (a, b) = if swap { (b, a) } else { (a, b) };

    let z_lo = (a.cz - a.h * 0.5).max(b.cz - b.h * 0.5);
    let z_hi = (a.cz + a.h * 0.5).min(b.cz + b.h * 0.5);
    let dz = z_hi - z_lo;
    if dz <= 0.0 {
        return 0.0;
    }
    let area = bev_intersection_area(a, b);
    if area <= 0.0 {
        return 0.0;
    }
    let inter = area * dz;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}
