//! The 3D mean face, its 8-parameter projection and the shapes derived from
//! a set of 2D keypoints.
//!
//! All coordinates use a bottom-left origin with `y` growing upwards.

use core::f64::consts::PI;
use core::ops::{Add, Mul, Sub};

use crate::{Error, Result, NUM_KEYPOINTS};

/// Index of `ChinCenter` in keypoint order (label 9).
pub const CHIN_CENTER: usize = 8;
/// Index of `CenterBetweenEyes` in keypoint order (label 10).
pub const CENTER_BETWEEN_EYES: usize = 9;

pub const KEYPOINT_NAMES: [&str; NUM_KEYPOINTS] = [
    "LeftEyeLeftCorner",
    "RightEyeRightCorner",
    "LeftEar",
    "NoseLeft",
    "NoseRight",
    "RightEar",
    "MouthLeftCorner",
    "MouthRightCorner",
    "ChinCenter",
    "CenterBetweenEyes",
];

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, other: Point2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn norm(self) -> f64 {
        libm::hypot(self.x, self.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// Rotation about the origin by `angle` radians.
    pub fn rotated(self, angle: f64) -> Point2 {
        let (s, c) = (libm::sin(angle), libm::cos(angle));
        Point2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, rhs: f64) -> Point2 {
        Point2::new(self.x * rhs, self.y * rhs)
    }
}

/// Ten named 3D keypoints of an average face.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFace3D {
    points: [[f64; 3]; NUM_KEYPOINTS],
}

impl MeanFace3D {
    /// Builds a mean face from points given in keypoint order.
    ///
    /// Points must be finite and pairwise distinct.
    pub fn new(points: [[f64; 3]; NUM_KEYPOINTS]) -> Result<Self> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("mean face point is not finite".into()));
        }
        for i in 0..NUM_KEYPOINTS {
            for j in i + 1..NUM_KEYPOINTS {
                if points[i] == points[j] {
                    return Err(Error::InvalidArgument(alloc::format!(
                        "mean face points {} and {} coincide",
                        KEYPOINT_NAMES[i],
                        KEYPOINT_NAMES[j]
                    )));
                }
            }
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[[f64; 3]; NUM_KEYPOINTS] {
        &self.points
    }

    pub fn names(&self) -> &'static [&'static str; NUM_KEYPOINTS] {
        &KEYPOINT_NAMES
    }
}

impl Default for MeanFace3D {
    /// Frontal mean face in model units: x to the image right, y up, z towards
    /// the camera, centroid at the origin. One unit is one grid cell at
    /// transform scale 1.
    fn default() -> Self {
        Self {
            points: [
                [-2.5, 2.25, 0.175],   // LeftEyeLeftCorner
                [2.5, 2.25, 0.175],    // RightEyeRightCorner
                [-4.25, 1.0, -2.825],  // LeftEar
                [-1.1, -0.25, 1.425],  // NoseLeft
                [1.1, -0.25, 1.425],   // NoseRight
                [4.25, 1.0, -2.825],   // RightEar
                [-1.5, -2.0, 0.675],   // MouthLeftCorner
                [1.5, -2.0, 0.675],    // MouthRightCorner
                [0.0, -4.25, 0.425],   // ChinCenter
                [0.0, 2.25, 0.675],    // CenterBetweenEyes
            ],
        }
    }
}

/// The projected transform `p = mu + A p3`: `A` is the top two rows of a
/// scaled rotation, `mu` a 2D translation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TransformParams {
    pub a: [[f64; 3]; 2],
    pub mu: [f64; 2],
}

impl TransformParams {
    pub const IDENTITY: TransformParams = TransformParams {
        a: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        mu: [0.0, 0.0],
    };

    /// In-plane similarity: uniform `scale`, rotation by `angle`, then shift.
    pub fn similarity(scale: f64, angle: f64, dx: f64, dy: f64) -> Self {
        let (s, c) = (libm::sin(angle), libm::cos(angle));
        Self {
            a: [[scale * c, -scale * s, 0.0], [scale * s, scale * c, 0.0]],
            mu: [dx, dy],
        }
    }

    /// Layout `[a00, a01, a02, a10, a11, a12, dx, dy]`.
    pub fn from_array(v: [f64; 8]) -> Self {
        Self {
            a: [[v[0], v[1], v[2]], [v[3], v[4], v[5]]],
            mu: [v[6], v[7]],
        }
    }

    pub fn to_array(&self) -> [f64; 8] {
        let [r0, r1] = self.a;
        [r0[0], r0[1], r0[2], r1[0], r1[1], r1[2], self.mu[0], self.mu[1]]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoints2D {
    pub points: [Point2; NUM_KEYPOINTS],
}

impl Keypoints2D {
    pub fn new(points: [Point2; NUM_KEYPOINTS]) -> Self {
        Self { points }
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.is_finite())
    }

    pub fn map(&self, f: impl Fn(Point2) -> Point2) -> Keypoints2D {
        Keypoints2D { points: self.points.map(f) }
    }

    pub fn chin(&self) -> Point2 {
        self.points[CHIN_CENTER]
    }

    pub fn center_between_eyes(&self) -> Point2 {
        self.points[CENTER_BETWEEN_EYES]
    }
}

/// Axis-aligned box; `(x, y)` is the bottom-left corner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { x, y, w, h };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::DegenerateBox)
        }
    }

    pub fn is_valid(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.w > 0.0 && self.h > 0.0 && self.w.is_finite() && self.h.is_finite()
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> Point2 {
        Point2::new(self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let h = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        if w > 0.0 && h > 0.0 {
            w * h
        } else {
            0.0
        }
    }

    /// Closed containment test.
    pub fn contains(&self, p: Point2) -> bool {
        p.x >= self.x && p.x <= self.x + self.w && p.y >= self.y && p.y <= self.y + self.h
    }

    pub fn scaled(&self, factor: f64) -> BoundingBox {
        BoundingBox {
            x: self.x * factor,
            y: self.y * factor,
            w: self.w * factor,
            h: self.h * factor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    /// Major semi-axis.
    pub ra: f64,
    /// Minor semi-axis.
    pub rb: f64,
    /// Angle of the major axis, in `[0, pi)`.
    pub theta: f64,
}

impl Ellipse {
    /// Builds an ellipse, swapping the axes if needed so that `ra >= rb` and
    /// folding `theta` into `[0, pi)`.
    pub fn new(cx: f64, cy: f64, ra: f64, rb: f64, theta: f64) -> Result<Self> {
        if !(ra > 0.0 && rb > 0.0) || ![cx, cy, ra, rb, theta].iter().all(|v| v.is_finite()) {
            return Err(Error::DegenerateShape);
        }
        let (ra, rb, theta) = if ra >= rb { (ra, rb, theta) } else { (rb, ra, theta + 0.5 * PI) };
        Ok(Self { cx, cy, ra, rb, theta: normalize_angle(theta) })
    }

    pub fn center(&self) -> Point2 {
        Point2::new(self.cx, self.cy)
    }

    pub fn contains(&self, p: Point2) -> bool {
        let d = p - self.center();
        let (s, c) = (libm::sin(self.theta), libm::cos(self.theta));
        let u = (c * d.x + s * d.y) / self.ra;
        let v = (-s * d.x + c * d.y) / self.rb;
        u * u + v * v <= 1.0
    }

    /// Half extents of the axis-aligned box around the ellipse.
    pub fn half_extents(&self) -> (f64, f64) {
        let (s, c) = (libm::sin(self.theta), libm::cos(self.theta));
        let hx = libm::hypot(self.ra * c, self.rb * s);
        let hy = libm::hypot(self.ra * s, self.rb * c);
        (hx, hy)
    }
}

/// Folds an angle into `[0, pi)`.
pub fn normalize_angle(theta: f64) -> f64 {
    let t = libm::fmod(theta, PI);
    let t = if t < 0.0 { t + PI } else { t };
    if t >= PI {
        0.0
    } else {
        t
    }
}

/// `point_i = mu + A p3_i` for every mean-face point.
pub fn project(face: &MeanFace3D, t: &TransformParams) -> Keypoints2D {
    Keypoints2D {
        points: face.points.map(|p| {
            let row = |r: &[f64; 3]| r[0] * p[0] + r[1] * p[1] + r[2] * p[2];
            Point2::new(t.mu[0] + row(&t.a[0]), t.mu[1] + row(&t.a[1]))
        }),
    }
}

/// Gradient with respect to the transform of a scalar whose gradient with
/// respect to each projected point is `grad`.
pub fn project_backward(face: &MeanFace3D, grad: &Keypoints2D) -> TransformParams {
    let mut out = TransformParams::default();
    for (p, g) in face.points.iter().zip(grad.points.iter()) {
        for c in 0..3 {
            out.a[0][c] += g.x * p[c];
            out.a[1][c] += g.y * p[c];
        }
        out.mu[0] += g.x;
        out.mu[1] += g.y;
    }
    out
}

/// Extrapolated top of the head: the chin mirrored through the point between
/// the eyes.
pub fn top_of_head(k: &Keypoints2D) -> Point2 {
    k.center_between_eyes() * 2.0 - k.chin()
}

/// Smallest upright box covering the keypoints and, if requested, the
/// extrapolated top of the head.
pub fn face_bbox(k: &Keypoints2D, include_top_of_head: bool) -> Result<BoundingBox> {
    let top = include_top_of_head.then(|| top_of_head(k));
    let mut lo = Point2::new(f64::INFINITY, f64::INFINITY);
    let mut hi = Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in k.points.iter().copied().chain(top) {
        lo = Point2::new(lo.x.min(p.x), lo.y.min(p.y));
        hi = Point2::new(hi.x.max(p.x), hi.y.max(p.y));
    }
    BoundingBox::new(lo.x, lo.y, hi.x - lo.x, hi.y - lo.y).map_err(|_| Error::DegenerateShape)
}

/// Ellipse inscribed in the smallest rectangle that has one side along the
/// chin to top-of-head axis and covers all keypoints plus the top of the head.
pub fn face_ellipse(k: &Keypoints2D) -> Result<Ellipse> {
    let chin = k.chin();
    let top = top_of_head(k);
    let axis = top - chin;
    let len = axis.norm();
    if !(len > 0.0) || !len.is_finite() {
        return Err(Error::DegenerateShape);
    }
    let u = axis * (1.0 / len);
    let v = Point2::new(-u.y, u.x);

    let (mut u_lo, mut u_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut v_lo, mut v_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in k.points.iter().copied().chain(core::iter::once(top)) {
        let (pu, pv) = (p.dot(u), p.dot(v));
        u_lo = u_lo.min(pu);
        u_hi = u_hi.max(pu);
        v_lo = v_lo.min(pv);
        v_hi = v_hi.max(pv);
    }
    let half_u = 0.5 * (u_hi - u_lo);
    let half_v = 0.5 * (v_hi - v_lo);
    // relative cutoff: points exactly on the axis leave rounding noise in v
    let scale = half_u.max(half_v);
    if !(half_u > 1e-12 * scale) || !(half_v > 1e-12 * scale) {
        return Err(Error::DegenerateShape);
    }
    let center = u * (0.5 * (u_hi + u_lo)) + v * (0.5 * (v_hi + v_lo));
    let theta = libm::atan2(u.y, u.x);
    Ellipse::new(center.x, center.y, half_u, half_v, theta)
}

/// `|a ∩ b| / |b|`.
pub fn overlap_asym(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let area = b.area();
    if area > 0.0 {
        (a.intersection_area(b) / area).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        (inter / union).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Intersection over union of two ellipse interiors, estimated on a
/// `grid_resolution` x `grid_resolution` raster of cell centres spanning the
/// joint bounding box. Resolutions below 64 are raised to 64.
pub fn ellipse_overlap(e1: &Ellipse, e2: &Ellipse, grid_resolution: usize) -> f64 {
    let n = grid_resolution.max(64);
    let (hx1, hy1) = e1.half_extents();
    let (hx2, hy2) = e2.half_extents();
    let x0 = (e1.cx - hx1).min(e2.cx - hx2);
    let x1 = (e1.cx + hx1).max(e2.cx + hx2);
    let y0 = (e1.cy - hy1).min(e2.cy - hy2);
    let y1 = (e1.cy + hy1).max(e2.cy + hy2);
    let (dx, dy) = ((x1 - x0) / n as f64, (y1 - y0) / n as f64);

    let (mut both, mut either) = (0usize, 0usize);
    for j in 0..n {
        let y = y0 + (j as f64 + 0.5) * dy;
        for i in 0..n {
            let p = Point2::new(x0 + (i as f64 + 0.5) * dx, y);
            match (e1.contains(p), e2.contains(p)) {
                (true, true) => {
                    both += 1;
                    either += 1;
                }
                (true, false) | (false, true) => either += 1,
                (false, false) => {}
            }
        }
    }
    if either == 0 {
        0.0
    } else {
        both as f64 / either as f64
    }
}
