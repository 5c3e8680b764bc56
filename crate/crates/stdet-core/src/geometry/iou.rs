//! Polygon intersection-over-union: exact triangulate-and-clip route with a
//! scanline rasterization fallback (and oracle).

use super::{shoelace, Point, Polygon};

/// Even-odd scanline rasterization at integer pixel centers.
pub fn rasterize_mask(poly: &Polygon, height: usize, width: usize) -> Vec<bool> {
    let mut mask = vec![false; height * width];
    let v = &poly.vertices;
    let n = v.len();
    let mut xs: Vec<f64> = Vec::with_capacity(8);
    for row in 0..height {
        let y = row as f64;
        xs.clear();
        for i in 0..n {
            let a = v[i];
            let b = v[(i + 1) % n];
            if (a.y > y) != (b.y > y) {
                xs.push(a.x + (y - a.y) / (b.y - a.y) * (b.x - a.x));
            }
        }
        xs.sort_by(|p, q| p.partial_cmp(q).unwrap());
        for pair in xs.chunks_exact(2) {
            let lo = pair[0].ceil().max(0.0) as i64;
            let hi = (pair[1].ceil() - 1.0).min(width as f64 - 1.0) as i64;
            for ix in lo..=hi {
                mask[row * width + ix as usize] = true;
            }
        }
    }
    mask
}

/// IoU of the two pixel sets obtained by rasterizing both polygons onto the
/// same grid. Used as an independent cross-check for `polygon_iou` and as
/// the fallback for ill-formed inputs.
pub fn raster_iou(a: &Polygon, b: &Polygon, height: usize, width: usize) -> f64 {
    let ma = rasterize_mask(a, height, width);
    let mb = rasterize_mask(b, height, width);
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in ma.iter().zip(mb.iter()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Ear-clipping triangulation of a simple polygon with positive shoelace
/// orientation. Returns None when no ear can be found (numerically tangled
/// input) so the caller can fall back to rasterization.
fn triangulate(v: &[Point]) -> Option<Vec<[Point; 3]>> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    let mut tris = Vec::with_capacity(v.len().saturating_sub(2));
    let mut guard = 0usize;
    while idx.len() > 3 {
        let m = idx.len();
        let mut clipped = false;
        for k in 0..m {
            let (pi, ci, ni) = (idx[(k + m - 1) % m], idx[k], idx[(k + 1) % m]);
            let (p, c, n) = (v[pi], v[ci], v[ni]);
            let turn = cross(p, c, n);
            if turn < -1e-12 {
                continue; // reflex corner
            }
            if turn <= 1e-12 {
                // collinear sliver: drop the vertex, no area lost
                idx.remove(k);
                clipped = true;
                break;
            }
            let mut ear = true;
            for &oi in &idx {
                if oi == pi || oi == ci || oi == ni {
                    continue;
                }
                let q = v[oi];
                if cross(p, c, q) > 1e-12 && cross(c, n, q) > 1e-12 && cross(n, p, q) > 1e-12 {
                    ear = false;
                    break;
                }
            }
            if ear {
                tris.push([p, c, n]);
                idx.remove(k);
                clipped = true;
                break;
            }
        }
        if !clipped {
            return None;
        }
        guard += 1;
        if guard > 4 * v.len() {
            return None;
        }
    }
    tris.push([v[idx[0]], v[idx[1]], v[idx[2]]]);
    Some(tris)
}

/// Sutherland–Hodgman clip of `subject` against a convex clip polygon given
/// with positive shoelace orientation. Returns the clipped area.
fn clip_area(subject: &[Point; 3], clip: &[Point; 3]) -> f64 {
    let mut poly: Vec<Point> = subject.to_vec();
    let mut next: Vec<Point> = Vec::with_capacity(8);
    for e in 0..3 {
        let a = clip[e];
        let b = clip[(e + 1) % 3];
        next.clear();
        let m = poly.len();
        if m == 0 {
            return 0.0;
        }
        for i in 0..m {
            let cur = poly[i];
            let prev = poly[(i + m - 1) % m];
            let cur_in = cross(a, b, cur) >= 0.0;
            let prev_in = cross(a, b, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    next.push(line_intersect(a, b, prev, cur));
                }
                next.push(cur);
            } else if prev_in {
                next.push(line_intersect(a, b, prev, cur));
            }
        }
        std::mem::swap(&mut poly, &mut next);
    }
    shoelace(&poly).abs()
}

fn line_intersect(a: Point, b: Point, p: Point, q: Point) -> Point {
    let d1 = cross(a, b, p);
    let d2 = cross(a, b, q);
    let t = d1 / (d1 - d2);
    p.lerp(q, t)
}

fn oriented_tri(t: [Point; 3]) -> [Point; 3] {
    if cross(t[0], t[1], t[2]) < 0.0 {
        [t[0], t[2], t[1]]
    } else {
        t
    }
}

/// Intersection-over-union of two simple polygons. Self-intersecting or
/// otherwise untriangulatable inputs fall back to a rasterized estimate on
/// a grid scaled to their joint bounding box.
pub fn polygon_iou(a: &Polygon, b: &Polygon) -> f64 {
    let (amin, amax) = a.bbox();
    let (bmin, bmax) = b.bbox();
    if amax.x < bmin.x || bmax.x < amin.x || amax.y < bmin.y || bmax.y < amin.y {
        return 0.0;
    }
    if a.is_self_intersecting() || b.is_self_intersecting() {
        return fallback_raster_iou(a, b);
    }
    let (ta, tb) = match (triangulate(&a.vertices), triangulate(&b.vertices)) {
        (Some(ta), Some(tb)) => (ta, tb),
        _ => return fallback_raster_iou(a, b),
    };
    let mut inter = 0.0;
    for x in &ta {
        for y in &tb {
            inter += clip_area(x, &oriented_tri(*y));
        }
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Rasterized IoU on a ~512-wide grid mapped over the joint bounding box.
fn fallback_raster_iou(a: &Polygon, b: &Polygon) -> f64 {
    let (amin, amax) = a.bbox();
    let (bmin, bmax) = b.bbox();
    let min = Point::new(amin.x.min(bmin.x), amin.y.min(bmin.y));
    let max = Point::new(amax.x.max(bmax.x), amax.y.max(bmax.y));
    let span = (max.x - min.x).max(max.y - min.y).max(1e-9);
    let res = 512usize;
    let scale = (res as f64 - 2.0) / span;
    let remap = |p: &Polygon| {
        Polygon {
            vertices: p
                .vertices
                .iter()
                .map(|v| Point::new((v.x - min.x) * scale + 0.5, (v.y - min.y) * scale + 0.5))
                .collect(),
        }
    };
    raster_iou(&remap(a), &remap(b), res, res)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn square(x0: f64, y0: f64, x1: f64, y1: f64) -> Polygon {
        Polygon::new(vec![
            Point::new(x0, y0),
            Point::new(x1, y0),
            Point::new(x1, y1),
            Point::new(x0, y1),
        ])
        .unwrap()
    }

    #[test]
    fn identical_polygons_iou_one() {
        let a = square(0.0, 0.0, 1.0, 1.0);
        assert!((polygon_iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn half_offset_unit_squares_iou_one_third() {
        let a = square(0.0, 0.0, 1.0, 1.0);
        let b = square(0.5, 0.0, 1.5, 1.0);
        assert!((polygon_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_polygons_iou_zero() {
        let a = square(0.0, 0.0, 1.0, 1.0);
        let b = square(5.0, 5.0, 6.0, 6.0);
        assert_eq!(polygon_iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_is_symmetric() {
        let a = square(0.0, 0.0, 4.0, 2.0);
        let b = Polygon::new(vec![
            Point::new(1.0, -1.0),
            Point::new(5.0, 1.0),
            Point::new(3.0, 4.0),
        ])
        .unwrap();
        let (x, y) = (polygon_iou(&a, &b), polygon_iou(&b, &a));
        assert!((x - y).abs() < 1e-12);
        assert!(x > 0.0 && x < 1.0);
    }

    #[test]
    fn rasterize_axis_aligned_rectangle_exact_count() {
        // covers pixel centers 0..=3 x 0..=2
        let p = square(-0.5, -0.5, 3.5, 2.5);
        let mask = rasterize_mask(&p, 8, 8);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 12);
        assert!(mask[0] && mask[3] && mask[2 * 8 + 3]);
        assert!(!mask[4] && !mask[3 * 8]);
    }

    #[test]
    fn mask_count_matches_shoelace_area() {
        let p = Polygon::new(vec![
            Point::new(10.0, 5.0),
            Point::new(100.0, 20.0),
            Point::new(110.0, 90.0),
            Point::new(40.0, 110.0),
            Point::new(5.0, 60.0),
        ])
        .unwrap();
        let mask = rasterize_mask(&p, 128, 128);
        let count = mask.iter().filter(|&&m| m).count() as f64;
        let area = p.area();
        assert!((count - area).abs() < 0.02 * area, "{count} vs {area}");
    }

    fn random_star_polygon(rng: &mut ChaCha8Rng, frame: f64) -> Polygon {
        loop {
            let cx = rng.gen_range(0.25 * frame..0.75 * frame);
            let cy = rng.gen_range(0.25 * frame..0.75 * frame);
            let base: f64 = rng.gen_range(0.15 * frame..0.24 * frame);
            let n = rng.gen_range(5..12);
            let mut angles: Vec<f64> = (0..n)
                .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
                .collect();
            angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let pts: Vec<Point> = angles
                .iter()
                .map(|&a| {
                    let r = base * rng.gen_range(0.55..1.0);
                    Point::new(cx + r * a.cos(), cy + r * a.sin())
                })
                .collect();
            if let Ok(p) = Polygon::new(pts) {
                if !p.is_self_intersecting() && p.area() >= 0.05 * frame * frame * 0.2 {
                    return p;
                }
            }
        }
    }

    #[test]
    fn exact_iou_matches_raster_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let frame = 1024.0;
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let a = random_star_polygon(&mut rng, frame);
            let b = random_star_polygon(&mut rng, frame);
            let exact = polygon_iou(&a, &b);
            let oracle = raster_iou(&a, &b, 1024, 1024);
            worst = worst.max((exact - oracle).abs());
        }
        assert!(worst < 0.01, "worst |exact - raster| = {worst}");
    }

    #[test]
    fn self_intersecting_input_uses_fallback() {
        // bowtie
        let p = Polygon {
            vertices: vec![
                Point::new(0.0, 0.0),
                Point::new(2.0, 2.0),
                Point::new(2.0, 0.0),
                Point::new(0.0, 2.0),
            ],
        };
        assert!(p.is_self_intersecting());
        let q = square(0.0, 0.0, 2.0, 2.0);
        let iou = polygon_iou(&p, &q);
        assert!(iou > 0.0 && iou < 1.0);
    }
}
