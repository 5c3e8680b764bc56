//! Polygon and polyline math: canonical contours, arc-length sampling,
//! center-line construction, rasterization, IoU and training labels.
//!
//! Coordinates are image pixel coordinates with y growing downward; pixel
//! (ix, iy) has its center at (ix, iy). Canonical polygons have positive
//! shoelace area and start at the topmost-then-leftmost vertex.

mod centerline;
mod contour;
mod iou;
mod labels;

pub use centerline::centerline_gt;
pub use contour::{extract_rough_contours, simplify_polyline};
pub use iou::{polygon_iou, rasterize_mask, raster_iou};
pub use labels::{label_fields, LabelSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("degenerate polygon: {0}")]
    Degenerate(String),
    #[error("point count mismatch: {points} points vs {offsets} offsets")]
    CountMismatch { points: usize, offsets: usize },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(self, o: Point) -> f64 {
        ((self.x - o.x).powi(2) + (self.y - o.y).powi(2)).sqrt()
    }

    pub fn lerp(self, o: Point, t: f64) -> Point {
        Point {
            x: self.x + (o.x - self.x) * t,
            y: self.y + (o.y - self.y) * t,
        }
    }

    pub fn mid(self, o: Point) -> Point {
        Point {
            x: (self.x + o.x) * 0.5,
            y: (self.y + o.y) * 0.5,
        }
    }
}

/// Closed contour. Stored open (last vertex connects back to the first).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polygon {
    pub vertices: Vec<Point>,
}

/// Open point sequence (center line).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polyline {
    pub points: Vec<Point>,
}

impl Polyline {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.len() < 2 {
            return Err(GeometryError::Degenerate(format!(
                "polyline needs >= 2 points, got {}",
                points.len()
            )));
        }
        if points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(GeometryError::Invalid("non-finite polyline coordinate".into()));
        }
        Ok(Polyline { points })
    }

    pub fn length(&self) -> f64 {
        self.points.windows(2).map(|w| w[0].dist(w[1])).sum()
    }

    /// Arc-length resampling of an open polyline to `n` points, endpoints
    /// included.
    pub fn resample(&self, n: usize) -> Result<Polyline> {
        if n < 2 {
            return Err(GeometryError::Invalid("resample needs n >= 2".into()));
        }
        let total = self.length();
        if total <= 0.0 {
            return Err(GeometryError::Degenerate("zero-length polyline".into()));
        }
        let mut cum = Vec::with_capacity(self.points.len());
        let mut acc = 0.0;
        cum.push(0.0);
        for w in self.points.windows(2) {
            acc += w[0].dist(w[1]);
            cum.push(acc);
        }
        let mut out = Vec::with_capacity(n);
        let mut seg = 0usize;
        for k in 0..n {
            let target = total * k as f64 / (n - 1) as f64;
            while seg + 2 < cum.len() && cum[seg + 1] < target {
                seg += 1;
            }
            let seg_len = cum[seg + 1] - cum[seg];
            let t = if seg_len > 0.0 {
                ((target - cum[seg]) / seg_len).clamp(0.0, 1.0)
            } else {
                0.0
            };
            out.push(self.points[seg].lerp(self.points[seg + 1], t));
        }
        Ok(Polyline { points: out })
    }
}

impl Polygon {
    /// Builds a canonical polygon: duplicate-free, positive (counter-
    /// clockwise) shoelace area, starting at the topmost-then-leftmost
    /// vertex.
    pub fn new(vertices: Vec<Point>) -> Result<Self> {
        let mut v: Vec<Point> = Vec::with_capacity(vertices.len());
        for p in vertices {
            if !p.x.is_finite() || !p.y.is_finite() {
                return Err(GeometryError::Invalid("non-finite vertex".into()));
            }
            if v.last().map_or(true, |&l| l.dist(p) > 1e-12) {
                v.push(p);
            }
        }
        while v.len() >= 2 && v[0].dist(*v.last().unwrap()) <= 1e-12 {
            v.pop();
        }
        if v.len() < 3 {
            return Err(GeometryError::Degenerate(format!(
                "polygon needs >= 3 distinct vertices, got {}",
                v.len()
            )));
        }
        let area = shoelace(&v);
        if area.abs() < 1e-12 {
            return Err(GeometryError::Degenerate("zero-area polygon".into()));
        }
        if area < 0.0 {
            v.reverse();
        }
        let start = canonical_start_index(&v);
        v.rotate_left(start);
        Ok(Polygon { vertices: v })
    }

    pub fn area(&self) -> f64 {
        shoelace(&self.vertices)
    }

    pub fn perimeter(&self) -> f64 {
        let n = self.vertices.len();
        (0..n)
            .map(|i| self.vertices[i].dist(self.vertices[(i + 1) % n]))
            .sum()
    }

    /// Point at arc-length position `t` along the boundary (wraps).
    pub fn at_arc_length(&self, t: f64) -> Point {
        let total = self.perimeter();
        let mut t = t % total;
        if t < 0.0 {
            t += total;
        }
        let n = self.vertices.len();
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            let len = a.dist(b);
            if t <= len || i == n - 1 {
                let f = if len > 0.0 { (t / len).clamp(0.0, 1.0) } else { 0.0 };
                return a.lerp(b, f);
            }
            t -= len;
        }
        self.vertices[0]
    }

    /// `n` points at equal arc-length spacing T = L/n starting from the
    /// canonical start vertex, traversing counter-clockwise.
    pub fn resample_contour(&self, n: usize) -> Result<Vec<Point>> {
        if n < 3 {
            return Err(GeometryError::Invalid(format!(
                "contour resampling needs n >= 3, got {n}"
            )));
        }
        let total = self.perimeter();
        if total <= 0.0 {
            return Err(GeometryError::Degenerate("zero-perimeter polygon".into()));
        }
        let step = total / n as f64;
        Ok((0..n).map(|k| self.at_arc_length(step * k as f64)).collect())
    }

    pub fn contains(&self, p: Point) -> bool {
        point_in_polygon(&self.vertices, p)
    }

    pub fn bbox(&self) -> (Point, Point) {
        let mut min = Point::new(f64::INFINITY, f64::INFINITY);
        let mut max = Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in &self.vertices {
            min.x = min.x.min(v.x);
            min.y = min.y.min(v.y);
            max.x = max.x.max(v.x);
            max.y = max.y.max(v.y);
        }
        (min, max)
    }

    /// Distance from `p` to the closest boundary point, plus that point.
    pub fn boundary_closest(&self, p: Point) -> (f64, Point) {
        let n = self.vertices.len();
        let mut best = (f64::INFINITY, self.vertices[0]);
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            let q = closest_on_segment(a, b, p);
            let d = p.dist(q);
            if d < best.0 {
                best = (d, q);
            }
        }
        best
    }

    /// True when any two non-adjacent edges intersect.
    pub fn is_self_intersecting(&self) -> bool {
        let n = self.vertices.len();
        for i in 0..n {
            let (a1, a2) = (self.vertices[i], self.vertices[(i + 1) % n]);
            for j in i + 1..n {
                if j == i || (j + 1) % n == i || (i + 1) % n == j {
                    continue;
                }
                let (b1, b2) = (self.vertices[j], self.vertices[(j + 1) % n]);
                if segments_intersect(a1, a2, b1, b2) {
                    return true;
                }
            }
        }
        false
    }
}

/// Pointwise offset application with clamping to the image frame.
pub fn apply_offsets(
    points: &[Point],
    offsets: &[(f64, f64)],
    width: usize,
    height: usize,
) -> Result<Vec<Point>> {
    if points.len() != offsets.len() {
        return Err(GeometryError::CountMismatch {
            points: points.len(),
            offsets: offsets.len(),
        });
    }
    Ok(points
        .iter()
        .zip(offsets.iter())
        .map(|(p, &(dx, dy))| Point {
            x: (p.x + dx).clamp(0.0, (width - 1) as f64),
            y: (p.y + dy).clamp(0.0, (height - 1) as f64),
        })
        .collect())
}

pub(crate) fn shoelace(v: &[Point]) -> f64 {
    let n = v.len();
    let mut acc = 0.0;
    for i in 0..n {
        let a = v[i];
        let b = v[(i + 1) % n];
        acc += a.x * b.y - b.x * a.y;
    }
    acc * 0.5
}

fn canonical_start_index(v: &[Point]) -> usize {
    let mut best = 0;
    for (i, p) in v.iter().enumerate() {
        let b = v[best];
        if p.y < b.y - 1e-12 || ((p.y - b.y).abs() <= 1e-12 && p.x < b.x - 1e-12) {
            best = i;
        }
    }
    best
}

pub(crate) fn point_in_polygon(v: &[Point], p: Point) -> bool {
    let n = v.len();
    let mut inside = false;
    for i in 0..n {
        let a = v[i];
        let b = v[(i + 1) % n];
        if (a.y > p.y) != (b.y > p.y) {
            let x = a.x + (p.y - a.y) / (b.y - a.y) * (b.x - a.x);
            if p.x < x {
                inside = !inside;
            }
        }
    }
    inside
}

pub(crate) fn closest_on_segment(a: Point, b: Point, p: Point) -> Point {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    if len2 <= 0.0 {
        return a;
    }
    let t = (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0);
    a.lerp(b, t)
}

fn segments_intersect(a1: Point, a2: Point, b1: Point, b2: Point) -> bool {
    let cross = |o: Point, p: Point, q: Point| (p.x - o.x) * (q.y - o.y) - (p.y - o.y) * (q.x - o.x);
    let d1 = cross(b1, b2, a1);
    let d2 = cross(b1, b2, a2);
    let d3 = cross(a1, a2, b1);
    let d4 = cross(a1, a2, b2);
    ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_square() -> Polygon {
        Polygon::new(vec![
            Point::new(0.0, 0.0),
            Point::new(1.0, 0.0),
            Point::new(1.0, 1.0),
            Point::new(0.0, 1.0),
        ])
        .unwrap()
    }

    #[test]
    fn unit_square_n4_returns_corners() {
        let pts = unit_square().resample_contour(4).unwrap();
        let expect = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
        for (p, (x, y)) in pts.iter().zip(expect.iter()) {
            assert!((p.x - x).abs() < 1e-12 && (p.y - y).abs() < 1e-12, "{p:?}");
        }
    }

    #[test]
    fn unit_square_n8_adds_edge_midpoints() {
        let pts = unit_square().resample_contour(8).unwrap();
        let expect = [
            (0.0, 0.0),
            (0.5, 0.0),
            (1.0, 0.0),
            (1.0, 0.5),
            (1.0, 1.0),
            (0.5, 1.0),
            (0.0, 1.0),
            (0.0, 0.5),
        ];
        for (p, (x, y)) in pts.iter().zip(expect.iter()) {
            assert!((p.x - x).abs() < 1e-12 && (p.y - y).abs() < 1e-12, "{p:?}");
        }
    }

    #[test]
    fn equal_spacing_within_tolerance() {
        let poly = Polygon::new(vec![
            Point::new(3.0, 1.0),
            Point::new(9.0, 2.0),
            Point::new(11.0, 7.0),
            Point::new(5.0, 9.0),
            Point::new(1.0, 5.0),
        ])
        .unwrap();
        let n = 20;
        let pts = poly.resample_contour(n).unwrap();
        let total = poly.perimeter();
        let step = total / n as f64;
        // samples sit exactly at arc positions k * L / N
        for k in 0..n {
            let p = poly.at_arc_length(step * k as f64);
            assert!(p.dist(pts[k]) <= 1e-9 * total);
        }
    }

    #[test]
    fn vertex_rotation_does_not_change_samples() {
        let base = vec![
            Point::new(3.0, 1.0),
            Point::new(9.0, 2.0),
            Point::new(11.0, 7.0),
            Point::new(5.0, 9.0),
            Point::new(1.0, 5.0),
        ];
        let p1 = Polygon::new(base.clone()).unwrap();
        let mut rotated = base.clone();
        rotated.rotate_left(2);
        let p2 = Polygon::new(rotated).unwrap();
        let (a, b) = (
            p1.resample_contour(12).unwrap(),
            p2.resample_contour(12).unwrap(),
        );
        for (x, y) in a.iter().zip(b.iter()) {
            assert!(x.dist(*y) < 1e-9);
        }
    }

    #[test]
    fn uniform_scaling_scales_samples_exactly() {
        let base = vec![
            Point::new(3.0, 1.0),
            Point::new(9.0, 2.0),
            Point::new(11.0, 7.0),
            Point::new(5.0, 9.0),
        ];
        let s = 3.25;
        let scaled: Vec<Point> = base.iter().map(|p| Point::new(p.x * s, p.y * s)).collect();
        let a = Polygon::new(base).unwrap().resample_contour(10).unwrap();
        let b = Polygon::new(scaled).unwrap().resample_contour(10).unwrap();
        for (p, q) in a.iter().zip(b.iter()) {
            assert!((p.x * s - q.x).abs() < 1e-9 && (p.y * s - q.y).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_polygon_rejected() {
        assert!(Polygon::new(vec![Point::new(0.0, 0.0), Point::new(1.0, 0.0)]).is_err());
        assert!(Polygon::new(vec![
            Point::new(0.0, 0.0),
            Point::new(1.0, 0.0),
            Point::new(2.0, 0.0),
        ])
        .is_err());
    }

    #[test]
    fn clockwise_input_is_reoriented() {
        let p = Polygon::new(vec![
            Point::new(0.0, 0.0),
            Point::new(0.0, 1.0),
            Point::new(1.0, 1.0),
            Point::new(1.0, 0.0),
        ])
        .unwrap();
        assert!(p.area() > 0.0);
        assert_eq!((p.vertices[0].x, p.vertices[0].y), (0.0, 0.0));
    }

    #[test]
    fn apply_offsets_basics() {
        let pts = vec![Point::new(1.0, 1.0), Point::new(5.0, 2.0)];
        let same = apply_offsets(&pts, &[(0.0, 0.0), (0.0, 0.0)], 10, 10).unwrap();
        assert_eq!(same[0], pts[0]);
        let moved = apply_offsets(&pts, &[(1.0, 0.0), (1.0, 0.0)], 10, 10).unwrap();
        assert_eq!(moved[0], Point::new(2.0, 1.0));
        let clamped = apply_offsets(&pts, &[(100.0, -5.0), (0.0, 0.0)], 10, 10).unwrap();
        assert_eq!(clamped[0], Point::new(9.0, 0.0));
        assert!(apply_offsets(&pts, &[(0.0, 0.0)], 10, 10).is_err());
    }

    #[test]
    fn polyline_resample_even_spacing() {
        let line = Polyline::new(vec![
            Point::new(0.0, 0.0),
            Point::new(2.0, 0.0),
            Point::new(2.0, 2.0),
        ])
        .unwrap();
        let r = line.resample(5).unwrap();
        assert_eq!(r.points.len(), 5);
        assert!(r.points[0].dist(Point::new(0.0, 0.0)) < 1e-12);
        assert!(r.points[4].dist(Point::new(2.0, 2.0)) < 1e-12);
        for w in r.points.windows(2) {
            assert!((w[0].dist(w[1]) - 1.0).abs() < 1e-9);
        }
    }
}
