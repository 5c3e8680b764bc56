//! Center line of an elongated closed contour.
//!
//! The boundary is split into two open side chains at the pair of split
//! positions minimizing the integrated distance between the chains when
//! paired by normalized arc fraction (one chain walked forward, the other
//! backward). Midpoints of paired samples form the raw center line, which
//! is arc-length resampled to `c` points.
//!
//! The objective is integrated exactly over the piecewise-linear chains
//! (closed-form integral of |linear vector| per piece) so the refinement
//! can localize the split far below the boundary segment length; a sampled
//! sum is piecewise constant in the split position and cannot.

use super::{Point, Polygon, Polyline, Result};

const GRID_STEPS: usize = 48;
const MID_SAMPLES: usize = 512;

/// Cumulative-arc lookup over a closed polygon boundary.
struct ArcTable {
    verts: Vec<Point>,
    cum: Vec<f64>,
    total: f64,
}

impl ArcTable {
    fn new(poly: &Polygon) -> Self {
        let n = poly.vertices.len();
        let mut verts = poly.vertices.clone();
        verts.push(poly.vertices[0]);
        let mut cum = Vec::with_capacity(n + 1);
        let mut acc = 0.0;
        cum.push(0.0);
        for i in 0..n {
            acc += verts[i].dist(verts[i + 1]);
            cum.push(acc);
        }
        ArcTable { verts, cum, total: acc }
    }

    fn wrap(&self, t: f64) -> f64 {
        let mut t = t % self.total;
        if t < 0.0 {
            t += self.total;
        }
        t
    }

    fn at(&self, t: f64) -> Point {
        let t = self.wrap(t);
        let i = match self.cum.binary_search_by(|c| c.partial_cmp(&t).unwrap()) {
            Ok(i) => i.min(self.cum.len() - 2),
            Err(i) => i - 1,
        };
        let len = self.cum[i + 1] - self.cum[i];
        let f = if len > 0.0 { (t - self.cum[i]) / len } else { 0.0 };
        self.verts[i].lerp(self.verts[i + 1], f)
    }
}

// 16-point Gauss-Legendre rule on [-1, 1].
const GL_X: [f64; 8] = [
    0.0950125098376374,
    0.2816035507792589,
    0.4580167776572274,
    0.6178762444026438,
    0.7554044083550030,
    0.8656312023878318,
    0.9445750230732326,
    0.9894009349916499,
];
const GL_W: [f64; 8] = [
    0.1894506104550685,
    0.1826034150449236,
    0.1691565193950025,
    0.1495959888165767,
    0.1246289712555339,
    0.0951585116824928,
    0.0622535239386479,
    0.0271524594117541,
];

/// Exact integral of |d0 + tau * (d1 - d0)| for tau in [0, 1].
///
/// The branches below keep the result accurate to ~1e-14 relative across
/// conditioning regimes; the split-position search needs objective noise
/// far below the geometric tolerances it refines to.
fn segment_abs_integral(d0: (f64, f64), d1: (f64, f64)) -> f64 {
    let (ex, ey) = d0;
    let (fx, fy) = (d1.0 - d0.0, d1.1 - d0.1);
    // q(tau) = a tau^2 + b tau + c = |D(tau)|^2, q >= 0
    let a = fx * fx + fy * fy;
    let b = 2.0 * (ex * fx + ey * fy);
    let c = ex * ex + ey * ey;
    let scale = a + b.abs() + c;
    if scale < 1e-300 {
        return 0.0;
    }
    if a <= 1e-12 * scale {
        // effectively linear q
        if b.abs() <= 1e-12 * scale {
            return c.sqrt();
        }
        let (x0, x1) = (c.max(0.0), (b + c).max(0.0));
        let denom = x0.sqrt() + x1.sqrt();
        if denom <= 0.0 {
            return 0.0;
        }
        // (x1^1.5 - x0^1.5) / (x1 - x0), written without cancellation
        return (2.0 / 3.0) * (x1 + (x0 * x1).sqrt() + x0) / denom;
    }
    let tmin = -b / (2.0 * a);
    if (-2.0..=3.0).contains(&tmin) {
        // vertex near the interval: the closed form is well conditioned
        let disc = (4.0 * a * c - b * b).max(0.0);
        let sa = a.sqrt();
        if disc <= 1e-20 * a * scale {
            // |D| collapses to sa * |tau - tmin|
            let part = |t: f64| 0.5 * (t - tmin) * (t - tmin);
            return sa * (part(1.0) + part(0.0) - 2.0 * part(tmin.clamp(0.0, 1.0)));
        }
        let sd = disc.sqrt();
        let term = |t: f64| {
            let s = (a * t * t + b * t + c).max(0.0).sqrt();
            let u = 2.0 * a * t + b;
            u * s / (4.0 * a) + disc / (8.0 * a * sa) * (u / sd).asinh()
        };
        return term(1.0) - term(0.0);
    }
    // vertex far away: the integrand is analytic and mild on [0, 1]
    let mut acc = 0.0;
    for k in 0..8 {
        for sgn in [-1.0, 1.0] {
            let t = 0.5 + 0.5 * sgn * GL_X[k];
            let x = ex + t * fx;
            let y = ey + t * fy;
            acc += 0.5 * GL_W[k] * (x * x + y * y).sqrt();
        }
    }
    acc
}

/// Integrated distance between the two chains obtained by splitting at
/// arc positions s1 and s2, paired by normalized fraction.
fn chain_mismatch(arc: &ArcTable, s1: f64, s2: f64) -> f64 {
    let total = arc.total;
    let d1 = arc.wrap(s2 - s1);
    let d2 = total - d1;
    if d1 < 1e-9 || d2 < 1e-9 {
        return f64::INFINITY;
    }
    // Breakpoints in u where either chain crosses a polygon vertex.
    let mut us: Vec<f64> = vec![0.0, 1.0];
    for &cv in &arc.cum {
        let uf = arc.wrap(cv - s1) / d1;
        if uf > 1e-12 && uf < 1.0 - 1e-12 {
            us.push(uf);
        }
        let ub = arc.wrap(s1 - cv) / d2;
        if ub > 1e-12 && ub < 1.0 - 1e-12 {
            us.push(ub);
        }
    }
    us.sort_by(|a, b| a.partial_cmp(b).unwrap());
    us.dedup_by(|a, b| (*a - *b).abs() < 1e-13);

    let sample = |u: f64| {
        let fwd = arc.at(s1 + u * d1);
        let bwd = arc.at(s1 - u * d2);
        ((fwd.x - bwd.x, fwd.y - bwd.y), fwd.mid(bwd))
    };
    // Width integrated along the midpoint path: the area swept by the
    // pairing chord. This is bounded below by the polygon area and reaches
    // it exactly for an honest side-to-side sweep, so degenerate splits
    // (one short chain paired lengthwise against the rest) score worse.
    let mut acc = 0.0;
    for w in us.windows(2) {
        let (u0, u1) = (w[0], w[1]);
        if u1 - u0 < 1e-15 {
            continue;
        }
        let (dd0, m0) = sample(u0);
        let (dd1, m1) = sample(u1);
        acc += m0.dist(m1) * segment_abs_integral(dd0, dd1);
    }
    acc
}

fn find_split(arc: &ArcTable) -> (f64, f64) {
    let total = arc.total;
    // Coarse scan over split position and chain-length fraction.
    let mut best = (f64::INFINITY, 0.0, total * 0.5);
    for i in 0..GRID_STEPS {
        let s1 = total * i as f64 / GRID_STEPS as f64;
        for j in 1..GRID_STEPS {
            let d = total * j as f64 / GRID_STEPS as f64;
            if d < 0.05 * total || d > 0.95 * total {
                continue;
            }
            let f = chain_mismatch(arc, s1, s1 + d);
            if f < best.0 {
                best = (f, s1, s1 + d);
            }
        }
    }
    let (_, mut s1, mut s2) = best;

    // Alternating 1-D ternary refinement with a shrinking bracket. The
    // objective is smooth in each split position, so this converges well
    // past the tolerance the midline needs.
    // Search directions include the diagonals so a valley coupling the two
    // split positions does not reduce this to slow axis-wise zigzagging.
    const DIRS: [(f64, f64); 4] = [(1.0, 0.0), (0.0, 1.0), (1.0, 1.0), (1.0, -1.0)];
    let mut w = total / GRID_STEPS as f64;
    for _ in 0..60 {
        for (e1, e2) in DIRS {
            let (mut lo, mut hi) = (-w, w);
            for _ in 0..40 {
                let m1 = lo + (hi - lo) / 3.0;
                let m2 = hi - (hi - lo) / 3.0;
                let f1 = chain_mismatch(arc, s1 + e1 * m1, s2 + e2 * m1);
                let f2 = chain_mismatch(arc, s1 + e1 * m2, s2 + e2 * m2);
                if f1 <= f2 {
                    hi = m2;
                } else {
                    lo = m1;
                }
            }
            let t = (lo + hi) * 0.5;
            s1 += e1 * t;
            s2 += e2 * t;
        }
        w *= 0.75;
    }
    (s1, s2)
}

/// Center line with `c >= 2` evenly spaced points.
pub fn centerline_gt(poly: &Polygon, c: usize) -> Result<Polyline> {
    let arc = ArcTable::new(poly);
    let total = arc.total;
    let (s1, s2) = find_split(&arc);

    // Midpoints of fraction-paired samples.
    let d1 = arc.wrap(s2 - s1);
    let d2 = total - d1;
    let mut mids = Vec::with_capacity(MID_SAMPLES + 1);
    for i in 0..=MID_SAMPLES {
        let u = i as f64 / MID_SAMPLES as f64;
        mids.push(arc.at(s1 + u * d1).mid(arc.at(s1 - u * d2)));
    }
    let mut clean: Vec<Point> = Vec::with_capacity(mids.len());
    for p in mids {
        if clean.last().map_or(true, |&l| l.dist(p) > 1e-9) {
            clean.push(p);
        }
    }
    if clean.len() < 2 {
        // Near-circular region: all midpoints collapse to the centroid.
        let p = *clean.first().unwrap_or(&poly.vertices[0]);
        clean = vec![p, Point::new(p.x + 1e-6, p.y)];
    }
    Polyline::new(clean)?.resample(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Polygon;

    fn rect(w: f64, h: f64) -> Polygon {
        Polygon::new(vec![
            Point::new(0.0, 0.0),
            Point::new(w, 0.0),
            Point::new(w, h),
            Point::new(0.0, h),
        ])
        .unwrap()
    }

    #[test]
    fn abs_integral_matches_quadrature() {
        let cases = [
            ((1.0, 0.0), (1.0, 0.0)),
            ((1.0, 2.0), (-3.0, 0.5)),
            ((0.0, 0.0), (2.0, 0.0)),
            ((-1.0, 0.0), (1.0, 0.0)),
            ((0.3, -0.7), (0.3, -0.7)),
        ];
        for (d0, d1) in cases {
            let exact = segment_abs_integral(d0, d1);
            let m = 200_000;
            let mut num = 0.0;
            for k in 0..m {
                let t = (k as f64 + 0.5) / m as f64;
                let x = d0.0 + t * (d1.0 - d0.0);
                let y = d0.1 + t * (d1.1 - d0.1);
                num += (x * x + y * y).sqrt();
            }
            num /= m as f64;
            assert!(
                (exact - num).abs() < 1e-6 * (1.0 + num),
                "integral mismatch: {exact} vs {num} for {d0:?}..{d1:?}"
            );
        }
    }

    #[test]
    fn rectangle_centerline_is_the_long_midline() {
        let poly = rect(4.0, 1.0);
        let line = centerline_gt(&poly, 10).unwrap();
        assert_eq!(line.points.len(), 10);
        for p in &line.points {
            assert!((p.y - 0.5).abs() < 1e-6, "off midline: {p:?}");
        }
        let mut xs: Vec<f64> = line.points.iter().map(|p| p.x).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (k, x) in xs.iter().enumerate() {
            assert!(
                (x - 4.0 * k as f64 / 9.0).abs() < 1e-5,
                "uneven spacing at {k}: x={x}"
            );
        }
    }

    #[test]
    fn square_centerline_is_a_medial_segment() {
        let poly = rect(2.0, 2.0);
        let line = centerline_gt(&poly, 10).unwrap();
        // medial axis of a square: both midlines and both diagonals
        let tol = 1e-5;
        let on_h = line.points.iter().all(|p| (p.y - 1.0).abs() < tol);
        let on_v = line.points.iter().all(|p| (p.x - 1.0).abs() < tol);
        let on_d = line.points.iter().all(|p| (p.y - p.x).abs() < tol);
        let on_a = line.points.iter().all(|p| (p.x + p.y - 2.0).abs() < tol);
        assert!(
            on_h || on_v || on_d || on_a,
            "not on a medial segment: {:?}",
            line.points
        );
    }

    #[test]
    fn mirror_symmetric_hexagon_centerline_on_axis() {
        // Elongated hexagon symmetric about y = 2.
        let poly = Polygon::new(vec![
            Point::new(0.0, 2.0),
            Point::new(2.0, 1.0),
            Point::new(8.0, 1.0),
            Point::new(10.0, 2.0),
            Point::new(8.0, 3.0),
            Point::new(2.0, 3.0),
        ])
        .unwrap();
        let line = centerline_gt(&poly, 10).unwrap();
        for p in &line.points {
            assert!((p.y - 2.0).abs() < 1e-6, "off axis: {p:?}");
        }
    }

    #[test]
    fn curved_ribbon_centerline_near_medial_circle() {
        // Annular sector: inner radius 9, outer 11, quarter arc; the medial
        // circle has radius 10.
        let (r1, r2) = (9.0, 11.0);
        let mid = (r1 + r2) * 0.5;
        let m = 64;
        let mut pts = Vec::new();
        for i in 0..=m {
            let a = std::f64::consts::FRAC_PI_2 * i as f64 / m as f64;
            pts.push(Point::new(r2 * a.cos(), r2 * a.sin()));
        }
        for i in (0..=m).rev() {
            let a = std::f64::consts::FRAC_PI_2 * i as f64 / m as f64;
            pts.push(Point::new(r1 * a.cos(), r1 * a.sin()));
        }
        let poly = Polygon::new(pts).unwrap();
        let line = centerline_gt(&poly, 12).unwrap();
        for p in &line.points {
            let rad = (p.x * p.x + p.y * p.y).sqrt();
            assert!(
                (rad - mid).abs() <= 0.02 * mid,
                "center line strays from medial circle: radius {rad}"
            );
        }
    }

    #[test]
    fn centerline_length_close_to_rect_width() {
        let poly = rect(8.0, 2.0);
        let line = centerline_gt(&poly, 10).unwrap();
        assert!((line.length() - 8.0).abs() < 1e-5);
    }
}
