//! 2-D vector and polyline kernels.
//!
//! All coordinates live in the ego-centric bird's-eye-view frame: `x` is
//! lateral (+right), `y` is longitudinal (+forward). Ties are always broken
//! toward the lowest index.

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point (or free vector) in the BEV plane, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

pub type Vector2 = Point2;

impl Point2 {
    pub const ORIGIN: Point2 = Point2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, other: Point2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// z-component of the 3-D cross product.
    pub fn cross(self, other: Point2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Point2) -> f64 {
        (self - other).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// Counter-clockwise rotation by `angle` radians.
    pub fn rotate(self, angle: f64) -> Point2 {
        let (s, c) = angle.sin_cos();
        Point2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    /// Heading of this vector, `atan2(y, x)`.
    pub fn heading(self) -> f64 {
        self.y.atan2(self.x)
    }

    pub fn from_heading(heading: f64) -> Point2 {
        let (s, c) = heading.sin_cos();
        Point2::new(c, s)
    }
}

impl From<[f64; 2]> for Point2 {
    fn from([x, y]: [f64; 2]) -> Self {
        Point2 { x, y }
    }
}

impl From<Point2> for [f64; 2] {
    fn from(p: Point2) -> Self {
        [p.x, p.y]
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

impl Neg for Point2 {
    type Output = Point2;
    fn neg(self) -> Point2 {
        Point2::new(-self.x, -self.y)
    }
}

/// An ordered list of at least two points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point2>", into = "Vec<Point2>")]
pub struct Polyline(Vec<Point2>);

impl Polyline {
    pub fn new(points: Vec<Point2>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::PolylineTooShort(points.len()));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("polyline"));
        }
        if points.len() == 2 && points[0] == points[1] {
            return Err(Error::DegeneratePolyline);
        }
        Ok(Self(points))
    }

    pub fn points(&self) -> &[Point2] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn segments(&self) -> impl Iterator<Item = (Point2, Point2)> + '_ {
        self.0.windows(2).map(|w| (w[0], w[1]))
    }

    pub fn centroid(&self) -> Point2 {
        let n = self.0.len() as f64;
        let sum = self.0.iter().fold(Point2::ORIGIN, |acc, &p| acc + p);
        sum * (1.0 / n)
    }

    /// Applies `f` to every point.
    pub fn map_points(&self, f: impl Fn(Point2) -> Point2) -> Polyline {
        Polyline(self.0.iter().map(|&p| f(p)).collect())
    }
}

impl TryFrom<Vec<Point2>> for Polyline {
    type Error = Error;
    fn try_from(points: Vec<Point2>) -> Result<Self> {
        Polyline::new(points)
    }
}

impl From<Polyline> for Vec<Point2> {
    fn from(pl: Polyline) -> Self {
        pl.0
    }
}

/// Closest point to `p` on the closed segment `[a, b]`.
pub fn closest_point_on_segment(p: Point2, a: Point2, b: Point2) -> Point2 {
    let ab = b - a;
    let len2 = ab.dot(ab);
    if len2 == 0.0 {
        return a;
    }
    let t = ((p - a).dot(ab) / len2).clamp(0.0, 1.0);
    a + ab * t
}

pub fn point_segment_distance(p: Point2, a: Point2, b: Point2) -> f64 {
    p.distance(closest_point_on_segment(p, a, b))
}

/// Result of a nearest-segment query against a polyline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentHit {
    pub distance: f64,
    pub segment: usize,
    /// Foot of the perpendicular (or nearest endpoint) on the winning segment.
    pub foot: Point2,
}

/// Minimum distance from `p` to any non-degenerate segment of `pl`.
pub fn nearest_segment(p: Point2, pl: &Polyline) -> Result<SegmentHit> {
    let mut best: Option<SegmentHit> = None;
    for (i, (a, b)) in pl.segments().enumerate() {
        if a == b {
            continue;
        }
        let foot = closest_point_on_segment(p, a, b);
        let d = p.distance(foot);
        if best.is_none_or(|h| d < h.distance) {
            best = Some(SegmentHit {
                distance: d,
                segment: i,
                foot,
            });
        }
    }
    best.ok_or(Error::DegeneratePolyline)
}

pub fn point_polyline_distance(p: Point2, pl: &Polyline) -> Result<(f64, usize)> {
    nearest_segment(p, pl).map(|h| (h.distance, h.segment))
}

/// Unsigned angle between two vectors, in `[0, π]`.
pub fn angular_difference(v1: Vector2, v2: Vector2) -> Result<f64> {
    let n1 = v1.norm();
    let n2 = v2.norm();
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(v1.cross(v2).abs().atan2(v1.dot(v2)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolylineHit {
    pub index: usize,
    pub distance: f64,
    pub segment: usize,
    pub foot: Point2,
}

/// Closest polyline to `p` whose distance is at most `range`.
pub fn closest_polyline_within<'a>(
    p: Point2,
    pls: impl IntoIterator<Item = &'a Polyline>,
    range: f64,
) -> Option<PolylineHit> {
    let mut best: Option<PolylineHit> = None;
    for (index, pl) in pls.into_iter().enumerate() {
        let Ok(hit) = nearest_segment(p, pl) else {
            continue;
        };
        if hit.distance > range {
            continue;
        }
        if best.is_none_or(|b| hit.distance < b.distance) {
            best = Some(PolylineHit {
                index,
                distance: hit.distance,
                segment: hit.segment,
                foot: hit.foot,
            });
        }
    }
    best
}

/// An oriented rectangle: `dims` is (length along heading, width).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedRect {
    pub center: Point2,
    pub heading: f64,
    pub dims: (f64, f64),
}

impl OrientedRect {
    pub fn new(center: Point2, heading: f64, dims: (f64, f64)) -> Self {
        Self {
            center,
            heading,
            dims,
        }
    }

    fn axes(&self) -> [Vector2; 2] {
        let h = Point2::from_heading(self.heading);
        [h, Point2::new(-h.y, h.x)]
    }

    /// Corners in counter-clockwise order starting front-left.
    pub fn corners(&self) -> [Point2; 4] {
        let [h, n] = self.axes();
        let hl = h * (self.dims.0 / 2.0);
        let hw = n * (self.dims.1 / 2.0);
        let c = self.center;
        [c + hl + hw, c - hl + hw, c - hl - hw, c + hl - hw]
    }

    fn project(&self, axis: Vector2) -> (f64, f64) {
        let corners = self.corners();
        corners
            .iter()
            .map(|c| c.dot(axis))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Separating-axis test; touching edges count as overlap.
    pub fn overlaps(&self, other: &OrientedRect) -> bool {
        let [a0, a1] = self.axes();
        let [b0, b1] = other.axes();
        for axis in [a0, a1, b0, b1] {
            let (lo1, hi1) = self.project(axis);
            let (lo2, hi2) = other.project(axis);
            if hi1 < lo2 || hi2 < lo1 {
                return false;
            }
        }
        true
    }

    pub fn contains(&self, p: Point2) -> bool {
        let [h, n] = self.axes();
        let d = p - self.center;
        d.dot(h).abs() <= self.dims.0 / 2.0 && d.dot(n).abs() <= self.dims.1 / 2.0
    }
}

pub fn oriented_rect_overlap(
    center1: Point2,
    heading1: f64,
    dims1: (f64, f64),
    center2: Point2,
    heading2: f64,
    dims2: (f64, f64),
) -> bool {
    OrientedRect::new(center1, heading1, dims1)
        .overlaps(&OrientedRect::new(center2, heading2, dims2))
}

/// Rigid 2-D transform mapping coordinates of one frame into another.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform2 {
    pub rotation: f64,
    pub translation: Vector2,
}

impl Transform2 {
    pub const IDENTITY: Transform2 = Transform2 {
        rotation: 0.0,
        translation: Point2::ORIGIN,
    };

    /// Transform into the frame of an ego at `position` with `heading`,
    /// where the ego faces +y.
    pub fn into_ego_frame(position: Point2, heading: f64) -> Self {
        let rotation = std::f64::consts::FRAC_PI_2 - heading;
        Self {
            rotation,
            translation: -position.rotate(rotation),
        }
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        p.rotate(self.rotation) + self.translation
    }

    pub fn apply_vector(&self, v: Vector2) -> Vector2 {
        v.rotate(self.rotation)
    }

    pub fn apply_heading(&self, heading: f64) -> f64 {
        wrap_angle(heading + self.rotation)
    }

    pub fn inverse(&self) -> Transform2 {
        Transform2 {
            rotation: -self.rotation,
            translation: -self.translation.rotate(-self.rotation),
        }
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut r = a.rem_euclid(TAU);
    if r > PI {
        r -= TAU;
    }
    r
}
