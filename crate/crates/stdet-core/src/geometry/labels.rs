//! Supervision targets rendered from ground-truth polygons.

use super::{rasterize_mask, Polygon};

/// Dense training targets for one image.
///
/// `orientation` holds two planes (dx then dy), each `height * width`.
/// `instance_ids` uses 0 for background and `k + 1` for polygon `k`.
#[derive(Debug, Clone)]
pub struct LabelSet {
    pub height: usize,
    pub width: usize,
    pub class_mask: Vec<f32>,
    pub distance: Vec<f32>,
    pub orientation: Vec<f32>,
    pub instance_ids: Vec<u32>,
    pub overlap_pixels: usize,
}

/// Renders classification, normalized-distance, orientation and instance-id
/// maps. Overlapping polygons are resolved by letting the later instance
/// win; the overlap pixel count is reported so callers can warn.
pub fn label_fields(polys: &[Polygon], height: usize, width: usize) -> LabelSet {
    let hw = height * width;
    let mut set = LabelSet {
        height,
        width,
        class_mask: vec![0.0; hw],
        distance: vec![0.0; hw],
        orientation: vec![0.0; 2 * hw],
        instance_ids: vec![0; hw],
        overlap_pixels: 0,
    };
    for (k, poly) in polys.iter().enumerate() {
        let mask = rasterize_mask(poly, height, width);
        // first pass: unnormalized distances and the per-instance maximum
        let mut dists = Vec::new();
        let mut max_d = 0.0f64;
        for y in 0..height {
            for x in 0..width {
                let i = y * width + x;
                if !mask[i] {
                    continue;
                }
                let p = super::Point::new(x as f64, y as f64);
                let (d, q) = poly.boundary_closest(p);
                dists.push((i, p, d, q));
                max_d = max_d.max(d);
            }
        }
        for (i, p, d, q) in dists {
            if set.instance_ids[i] != 0 {
                set.overlap_pixels += 1;
            }
            set.instance_ids[i] = k as u32 + 1;
            set.class_mask[i] = 1.0;
            set.distance[i] = if max_d > 0.0 { (d / max_d) as f32 } else { 0.0 };
            let (dx, dy) = (q.x - p.x, q.y - p.y);
            let len = (dx * dx + dy * dy).sqrt();
            if len > 1e-9 {
                set.orientation[i] = (dx / len) as f32;
                set.orientation[hw + i] = (dy / len) as f32;
            } else {
                set.orientation[i] = 0.0;
                set.orientation[hw + i] = 0.0;
            }
        }
    }
    set
}
