//! Oriented grasp rectangles and the exact polygon geometry behind their
//! overlap measures.
//!
//! Angles are degrees in `[0, 180)`, measured from the +x pixel axis towards
//! +y (raw pixel coordinates, rows growing downwards). `w` is the gripper
//! opening and lies along the closing direction `theta`; `h` is the jaw width
//! perpendicular to it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Areas and clip distances below this are treated as zero.
pub const GEOM_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("grasp field `{field}` must be finite, got {value}")]
    NonFinite { field: &'static str, value: f64 },
    #[error("grasp field `{field}` must be positive, got {value}")]
    NonPositive { field: &'static str, value: f64 },
    #[error("grasp confidence must lie in [0, 1], got {0}")]
    Confidence(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }

    fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }

    fn scale(self, s: f64) -> Point {
        Point::new(self.x * s, self.y * s)
    }

    fn cross(self, o: Point) -> f64 {
        self.x * o.y - self.y * o.x
    }

    fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }
}

/// Oriented grasp rectangle with object category and confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspRect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
    pub category: usize,
    pub confidence: f64,
}

impl GraspRect {
    /// Validated ground-truth rectangle (category 0, confidence 1).
    pub fn new(x: f64, y: f64, w: f64, h: f64, theta: f64) -> Result<Self, GeomError> {
        let r = Self {
            x,
            y,
            w,
            h,
            theta: normalize_angle(theta),
            category: 0,
            confidence: 1.0,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn with_category(mut self, category: usize) -> Self {
        self.category = category;
        self
    }

    pub fn with_confidence(mut self, confidence: f64) -> Self {
        self.confidence = confidence;
        self
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        for (field, value) in [
            ("x", self.x),
            ("y", self.y),
            ("w", self.w),
            ("h", self.h),
            ("theta", self.theta),
        ] {
            if !value.is_finite() {
                return Err(GeomError::NonFinite { field, value });
            }
        }
        for (field, value) in [("w", self.w), ("h", self.h)] {
            if value <= 0.0 {
                return Err(GeomError::NonPositive { field, value });
            }
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(GeomError::Confidence(self.confidence));
        }
        Ok(())
    }

    pub fn center(&self) -> Point {
        Point::new(self.x, self.y)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Corner polygon without validation; callers guarantee the invariants.
    pub fn quad(&self) -> Quad {
        let t = self.theta.to_radians();
        let u = Point::new(t.cos(), t.sin()).scale(self.w / 2.0);
        let v = Point::new(-t.sin(), t.cos()).scale(self.h / 2.0);
        let c = self.center();
        Quad {
            vertices: [
                c.sub(u).sub(v),
                c.add(u).sub(v),
                c.add(u).add(v),
                c.sub(u).add(v),
            ],
        }
    }
}

/// Four ordered corners, counter-clockwise in raw pixel coordinates
/// (positive shoelace area).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quad {
    pub vertices: [Point; 4],
}

impl Quad {
    pub fn area(&self) -> f64 {
        polygon_area(&self.vertices).abs()
    }
}

/// Map any finite angle into `[0, 180)`.
pub fn normalize_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(180.0);
    if t >= 180.0 {
        0.0
    } else {
        t
    }
}

/// Corners of `r`. The first edge runs along the closing direction (length
/// `w`), the second along the jaw (length `h`).
pub fn rect_to_quad(r: &GraspRect) -> Result<Quad, GeomError> {
    r.validate()?;
    Ok(r.quad())
}

/// Best-fit grasp rectangle for four ordered corners laid out like
/// [`rect_to_quad`] output. Exact for rectangles; for parallelograms the
/// closing edge keeps its direction and length, and the jaw width is the
/// perpendicular height so the area is preserved.
pub fn rect_from_vertices(p: &[Point; 4]) -> Result<GraspRect, GeomError> {
    let center = p
        .iter()
        .fold(Point::default(), |acc, &q| acc.add(q))
        .scale(0.25);
    let closing = p[1].sub(p[0]).add(p[2].sub(p[3])).scale(0.5);
    let jaw = p[3].sub(p[0]).add(p[2].sub(p[1])).scale(0.5);
    let w = closing.norm();
    if !(w > 0.0) {
        return Err(GeomError::NonPositive { field: "w", value: w });
    }
    let h = closing.scale(1.0 / w).cross(jaw).abs();
    let theta = closing.y.atan2(closing.x).to_degrees();
    GraspRect::new(center.x, center.y, w, h, theta)
}

/// Signed shoelace area; positive for counter-clockwise order.
pub fn polygon_area(pts: &[Point]) -> f64 {
    let n = pts.len();
    if n < 3 {
        return 0.0;
    }
    0.5 * (0..n).map(|i| pts[i].cross(pts[(i + 1) % n])).sum::<f64>()
}

fn ccw(vertices: &[Point; 4]) -> Vec<Point> {
    let mut v = vertices.to_vec();
    if polygon_area(&v) < 0.0 {
        v.reverse();
    }
    v
}

/// Sutherland–Hodgman clip of convex `subject` against convex `clip`, both
/// counter-clockwise.
pub fn clip_convex(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let edge = b.sub(a);
        let len = edge.norm();
        // signed distance to the clip line, positive inside
        let side = |p: Point| edge.cross(p.sub(a)) / len;
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (dc, dp) = (side(cur), side(prev));
            let cur_in = dc >= -GEOM_EPS;
            let prev_in = dp >= -GEOM_EPS;
            if cur_in != prev_in {
                let t = dp / (dp - dc);
                output.push(prev.add(cur.sub(prev).scale(t)));
            }
            if cur_in {
                output.push(cur);
            }
        }
    }
    output
}

/// Area of the intersection of two convex quads.
pub fn convex_intersection_area(a: &Quad, b: &Quad) -> f64 {
    let (pa, pb) = (ccw(&a.vertices), ccw(&b.vertices));
    let area = polygon_area(&clip_convex(&pa, &pb)).abs();
    if area < GEOM_EPS {
        0.0
    } else {
        area.min(a.area()).min(b.area())
    }
}

/// Intersection over union of two rotated rectangles.
pub fn jaccard(a: &GraspRect, b: &GraspRect) -> f64 {
    let inter = convex_intersection_area(&a.quad(), &b.quad());
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Angle between two grasp orientations modulo the 180° grasp symmetry, in
/// `[0, 90]`.
pub fn angle_diff(theta_a: f64, theta_b: f64) -> f64 {
    let d = (theta_a - theta_b).rem_euclid(180.0);
    d.min(180.0 - d)
}

pub fn center_distance_sq(a: &GraspRect, b: &GraspRect) -> f64 {
    let d = a.center().sub(b.center());
    d.x * d.x + d.y * d.y
}

/// Squared diagonal of the smallest axis-aligned box holding both
/// rectangles' corners.
pub fn enclosing_diagonal_sq(a: &GraspRect, b: &GraspRect) -> f64 {
    let (qa, qb) = (a.quad(), b.quad());
    let pts = qa.vertices.iter().chain(&qb.vertices);
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for p in pts {
        x0 = x0.min(p.x);
        y0 = y0.min(p.y);
        x1 = x1.max(p.x);
        y1 = y1.max(p.y);
    }
    (x1 - x0).powi(2) + (y1 - y0).powi(2)
}
