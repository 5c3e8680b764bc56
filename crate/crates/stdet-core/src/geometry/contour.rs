//! Rough contour extraction from a probability map: threshold, connected
//! components, boundary tracing along pixel cracks, and simplification.

use super::{Point, Polygon};

/// Traces the outer boundaries of thresholded regions and returns one
/// simplified polygon per connected component (8-connected foreground),
/// ordered by first-scanned pixel. Components smaller than `min_area`
/// pixels are dropped, as are traces too degenerate to form a polygon.
pub fn extract_rough_contours(
    prob: &[f32],
    height: usize,
    width: usize,
    threshold: f32,
    min_area: usize,
) -> Vec<Polygon> {
    assert_eq!(prob.len(), height * width, "map size mismatch");
    let fg: Vec<bool> = prob.iter().map(|&p| p >= threshold).collect();
    let mut label = vec![0u32; height * width];
    let mut polys = Vec::new();
    let mut next = 1u32;
    let mut queue: Vec<(usize, usize)> = Vec::new();
    for sy in 0..height {
        for sx in 0..width {
            let si = sy * width + sx;
            if !fg[si] || label[si] != 0 {
                continue;
            }
            // flood fill one component
            let id = next;
            next += 1;
            label[si] = id;
            queue.clear();
            queue.push((sx, sy));
            let mut area = 0usize;
            let mut head = 0;
            while head < queue.len() {
                let (x, y) = queue[head];
                head += 1;
                area += 1;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        if nx < 0 || ny < 0 || nx >= width as i64 || ny >= height as i64 {
                            continue;
                        }
                        let ni = ny as usize * width + nx as usize;
                        if fg[ni] && label[ni] == 0 {
                            label[ni] = id;
                            queue.push((nx as usize, ny as usize));
                        }
                    }
                }
            }
            if area < min_area {
                continue;
            }
            let outline = trace_crack_boundary(&label, width, height, id, sx, sy);
            let simplified = simplify_closed(&outline, 1.0);
            if let Ok(p) = Polygon::new(simplified) {
                polys.push(p);
            }
        }
    }
    polys
}

/// Walks the crack boundary (edges between foreground and background pixel
/// cells) of component `id`, starting from its first-scanned pixel, keeping
/// the component on the right of the travel direction. Vertices are pixel
/// corners at half-integer coordinates, so the traced polygon covers the
/// component's pixel cells exactly.
fn trace_crack_boundary(
    label: &[u32],
    width: usize,
    height: usize,
    id: u32,
    sx: usize,
    sy: usize,
) -> Vec<Point> {
    let inside = |x: i64, y: i64| -> bool {
        x >= 0
            && y >= 0
            && x < width as i64
            && y < height as i64
            && label[y as usize * width + x as usize] == id
    };
    // direction vectors: 0 = east, 1 = south, 2 = west, 3 = north
    const DIR: [(i64, i64); 4] = [(1, 0), (0, 1), (-1, 0), (0, -1)];
    // start on the top edge of the first-scanned (topmost-leftmost) pixel,
    // heading east; corner coordinates are stored doubled to stay integral
    let start = (2 * sx as i64 - 1, 2 * sy as i64 - 1, 0usize);
    let (mut cx, mut cy, mut d) = start;
    let mut out = Vec::new();
    loop {
        out.push(Point::new(cx as f64 / 2.0, cy as f64 / 2.0));
        // advance one crack edge
        cx += 2 * DIR[d].0;
        cy += 2 * DIR[d].1;
        // pixels ahead of the new corner, left and right of direction d
        let left = (d + 3) % 4;
        // doubled pixel-center coordinates are even, corners odd, so the
        // sums below are exactly divisible
        let lf = (
            (cx + DIR[d].0 + DIR[left].0) / 2,
            (cy + DIR[d].1 + DIR[left].1) / 2,
        );
        let rf = (
            (cx + DIR[d].0 - DIR[left].0) / 2,
            (cy + DIR[d].1 - DIR[left].1) / 2,
        );
        let lf_in = inside(lf.0, lf.1);
        let rf_in = inside(rf.0, rf.1);
        d = if lf_in {
            left // turn left (also the 8-connected diagonal case)
        } else if rf_in {
            d // straight on
        } else {
            (d + 1) % 4 // turn right
        };
        if (cx, cy, d) == start {
            break;
        }
        if out.len() > 4 * (width + 2) * (height + 2) {
            break; // defensive: malformed labeling cannot trap the tracer
        }
    }
    out
}

/// Douglas–Peucker simplification of an open polyline; endpoints kept.
pub fn simplify_polyline(points: &[Point], epsilon: f64) -> Vec<Point> {
    if points.len() <= 2 {
        return points.to_vec();
    }
    let (a, b) = (points[0], *points.last().unwrap());
    let mut far = (0.0f64, 0usize);
    for (i, &p) in points.iter().enumerate().skip(1).take(points.len() - 2) {
        let d = point_line_dist(a, b, p);
        if d > far.0 {
            far = (d, i);
        }
    }
    if far.0 <= epsilon {
        return vec![a, b];
    }
    let mut left = simplify_polyline(&points[..=far.1], epsilon);
    let right = simplify_polyline(&points[far.1..], epsilon);
    left.pop();
    left.extend(right);
    left
}

/// Simplification of a closed ring: split at the two mutually farthest
/// anchor vertices and simplify each half.
fn simplify_closed(ring: &[Point], epsilon: f64) -> Vec<Point> {
    if ring.len() <= 4 {
        return ring.to_vec();
    }
    let mut a = 0usize;
    let mut best = 0.0;
    for (i, p) in ring.iter().enumerate() {
        let d = ring[0].dist(*p);
        if d > best {
            best = d;
            a = i;
        }
    }
    let mut b = 0usize;
    best = 0.0;
    for (i, p) in ring.iter().enumerate() {
        let d = ring[a].dist(*p);
        if d > best {
            best = d;
            b = i;
        }
    }
    let (lo, hi) = (a.min(b), a.max(b));
    let first: Vec<Point> = ring[lo..=hi].to_vec();
    let mut second: Vec<Point> = ring[hi..].to_vec();
    second.extend_from_slice(&ring[..=lo]);
    let mut out = simplify_polyline(&first, epsilon);
    let tail = simplify_polyline(&second, epsilon);
    out.pop();
    out.extend_from_slice(&tail[..tail.len() - 1]);
    out
}

fn point_line_dist(a: Point, b: Point, p: Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len = (dx * dx + dy * dy).sqrt();
    if len <= 0.0 {
        return a.dist(p);
    }
    ((p.x - a.x) * dy - (p.y - a.y) * dx).abs() / len
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{polygon_iou, rasterize_mask, Polygon};

    fn map_from_mask(mask: &[bool]) -> Vec<f32> {
        mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn empty_map_yields_no_contours() {
        let prob = vec![0.1f32; 32 * 32];
        assert!(extract_rough_contours(&prob, 32, 32, 0.5, 16).is_empty());
    }

    #[test]
    fn tiny_components_filtered_by_min_area() {
        let mut prob = vec![0.0f32; 32 * 32];
        prob[5 * 32 + 5] = 1.0;
        assert!(extract_rough_contours(&prob, 32, 32, 0.5, 16).is_empty());
        assert_eq!(extract_rough_contours(&prob, 32, 32, 0.5, 1).len(), 1);
    }

    #[test]
    fn filled_disk_gives_one_polygon_with_analytic_area() {
        let (h, w, r) = (96usize, 96usize, 30.0f64);
        let (cx, cy) = (47.0, 47.0);
        let mut prob = vec![0.0f32; h * w];
        for y in 0..h {
            for x in 0..w {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                if d2 <= r * r {
                    prob[y * w + x] = 1.0;
                }
            }
        }
        let polys = extract_rough_contours(&prob, h, w, 0.5, 16);
        assert_eq!(polys.len(), 1);
        let area = polys[0].area();
        let analytic = std::f64::consts::PI * r * r;
        assert!(
            (area - analytic).abs() < 0.05 * analytic,
            "area {area} vs {analytic}"
        );
    }

    #[test]
    fn two_blobs_give_two_polygons() {
        let (h, w) = (48usize, 48usize);
        let mut prob = vec![0.0f32; h * w];
        for y in 4..14 {
            for x in 4..20 {
                prob[y * w + x] = 0.9;
            }
        }
        for y in 30..44 {
            for x in 25..45 {
                prob[y * w + x] = 0.9;
            }
        }
        let polys = extract_rough_contours(&prob, h, w, 0.5, 16);
        assert_eq!(polys.len(), 2);
    }

    #[test]
    fn extract_rasterize_round_trip_iou() {
        let (h, w) = (64usize, 64usize);
        let gt = Polygon::new(vec![
            Point::new(6.0, 10.0),
            Point::new(55.0, 14.0),
            Point::new(50.0, 40.0),
            Point::new(10.0, 52.0),
        ])
        .unwrap();
        let mask = rasterize_mask(&gt, h, w);
        let polys = extract_rough_contours(&map_from_mask(&mask), h, w, 0.5, 16);
        assert_eq!(polys.len(), 1);
        let iou = polygon_iou(&gt, &polys[0]);
        assert!(iou >= 0.95, "round-trip IoU {iou}");
    }

    #[test]
    fn traced_polygon_covers_pixel_cells_exactly() {
        let (h, w) = (32usize, 32usize);
        let mut prob = vec![0.0f32; h * w];
        for y in 3..9 {
            for x in 5..17 {
                prob[y * w + x] = 1.0;
            }
        }
        let polys = extract_rough_contours(&prob, h, w, 0.5, 4);
        assert_eq!(polys.len(), 1);
        // rectangle component: polygon area equals pixel count
        assert!((polys[0].area() - (6.0 * 12.0)).abs() < 1e-9);
    }

    #[test]
    fn simplify_drops_collinear_points() {
        let line: Vec<Point> = (0..10).map(|i| Point::new(i as f64, 0.0)).collect();
        let s = simplify_polyline(&line, 0.5);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0], line[0]);
        assert_eq!(s[1], line[9]);
    }
}
