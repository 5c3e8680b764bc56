//! Deterministic synthetic scene generator: striped ribbons swept along
//! quadratic Bézier spines over cluttered backgrounds, with exact polygon
//! and spine ground truth. The spine is the medial axis of its ribbon by
//! construction, which gives training targets more precise than anything
//! the model can produce.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eval::{bucket_of, SizeBucket, MEDIUM_AREA, SMALL_AREA};
use crate::geometry::{rasterize_mask, Point, Polygon, Polyline};
use crate::io::{DatasetManifest, Entry, IoError, ManifestImage, Record};

/// Spine sample count per ribbon.
const SPINE_SAMPLES: usize = 32;
/// Rejection-sampling budget per instance.
const PLACEMENT_TRIES: usize = 50;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Bend magnitude range as a fraction of the chord; 0 means straight.
    pub curvature: (f64, f64),
    /// Size-bucket mix (small, medium, large); need not sum to 1.
    pub size_mix: (f64, f64, f64),
    /// Stripe period along the spine, pixels.
    pub stripe_period: f64,
    /// Background clutter level in [0, 1].
    pub clutter: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 128,
            height: 128,
            min_instances: 1,
            max_instances: 3,
            curvature: (0.0, 0.25),
            size_mix: (0.25, 0.6, 0.15),
            stripe_period: 6.0,
            clutter: 0.5,
            seed: 0,
        }
    }
}

/// One generated scene: grayscale pixels plus exact ground truth.
#[derive(Debug, Clone)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    /// Row-major grayscale.
    pub pixels: Vec<u8>,
    pub polygons: Vec<Polygon>,
    /// Ribbon spines, same order as `polygons`.
    pub spines: Vec<Polyline>,
    /// Instances dropped after exhausting placement tries.
    pub dropped: usize,
}

fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1))
}

fn sample_bucket(rng: &mut ChaCha8Rng, mix: (f64, f64, f64)) -> SizeBucket {
    let total = (mix.0 + mix.1 + mix.2).max(1e-12);
    let u: f64 = rng.gen::<f64>() * total;
    if u < mix.0 {
        SizeBucket::Small
    } else if u < mix.0 + mix.1 {
        SizeBucket::Medium
    } else {
        SizeBucket::Large
    }
}

struct Ribbon {
    polygon: Polygon,
    spine: Vec<Point>,
}

/// Quadratic Bézier point and tangent.
fn bezier(p0: Point, p1: Point, p2: Point, t: f64) -> (Point, Point) {
    let u = 1.0 - t;
    let x = u * u * p0.x + 2.0 * u * t * p1.x + t * t * p2.x;
    let y = u * u * p0.y + 2.0 * u * t * p1.y + t * t * p2.y;
    let dx = 2.0 * u * (p1.x - p0.x) + 2.0 * t * (p2.x - p1.x);
    let dy = 2.0 * u * (p1.y - p0.y) + 2.0 * t * (p2.y - p1.y);
    (Point::new(x, y), Point::new(dx, dy))
}

fn try_ribbon(
    rng: &mut ChaCha8Rng,
    spec: &SceneSpec,
    bucket: SizeBucket,
) -> Option<Ribbon> {
    let (w, h) = (spec.width as f64, spec.height as f64);
    let frame_area = w * h;
    // Aim the area safely inside the bucket so sweeping noise cannot
    // spill across a boundary.
    let (area, aspect) = match bucket {
        SizeBucket::Small => (
            rng.gen_range(0.35 * SMALL_AREA..0.85 * SMALL_AREA),
            rng.gen_range(2.0..4.0),
        ),
        SizeBucket::Medium => (
            rng.gen_range(1.4 * SMALL_AREA..0.6 * MEDIUM_AREA),
            rng.gen_range(2.0..5.0),
        ),
        SizeBucket::Large => {
            let lo = 1.05 * MEDIUM_AREA;
            let hi = (1.35 * MEDIUM_AREA).min(0.78 * frame_area);
            if hi <= lo {
                // Frame too small to hold a large instance.
                return None;
            }
            (rng.gen_range(lo..hi), rng.gen_range(1.1..1.6))
        }
    };
    // area = chord * 2 * halfwidth, aspect = chord / (2 * halfwidth)
    let chord = (area * aspect).sqrt();
    let halfwidth = area / (2.0 * chord);
    let margin = 2.0;
    if chord + 2.0 * halfwidth > (w.powi(2) + h.powi(2)).sqrt() - 2.0 * margin {
        return None;
    }

    // Keep the bend well below the reciprocal half-width so the offset
    // curves cannot self-intersect (spine stays the medial axis).
    let bend_cap = (chord / (8.0 * halfwidth)).min(spec.curvature.1);
    let bend = if spec.curvature.0 >= bend_cap {
        spec.curvature.0.min(bend_cap)
    } else {
        rng.gen_range(spec.curvature.0..=bend_cap)
    };

    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let dir = Point::new(theta.cos(), theta.sin());
    let normal = Point::new(-dir.y, dir.x);
    let cx = rng.gen_range(margin + halfwidth..w - margin - halfwidth);
    let cy = rng.gen_range(margin + halfwidth..h - margin - halfwidth);
    let c = Point::new(cx, cy);
    let p0 = Point::new(c.x - 0.5 * chord * dir.x, c.y - 0.5 * chord * dir.y);
    let p2 = Point::new(c.x + 0.5 * chord * dir.x, c.y + 0.5 * chord * dir.y);
    let p1 = Point::new(c.x + bend * chord * normal.x, c.y + bend * chord * normal.y);

    let mut spine = Vec::with_capacity(SPINE_SAMPLES);
    let mut top = Vec::with_capacity(SPINE_SAMPLES);
    let mut bot = Vec::with_capacity(SPINE_SAMPLES);
    for i in 0..SPINE_SAMPLES {
        let t = i as f64 / (SPINE_SAMPLES - 1) as f64;
        let (p, d) = bezier(p0, p1, p2, t);
        let len = (d.x * d.x + d.y * d.y).sqrt();
        if len < 1e-9 {
            return None;
        }
        let n = Point::new(-d.y / len, d.x / len);
        spine.push(p);
        top.push(Point::new(p.x + halfwidth * n.x, p.y + halfwidth * n.y));
        bot.push(Point::new(p.x - halfwidth * n.x, p.y - halfwidth * n.y));
    }
    let mut verts = top;
    verts.extend(bot.into_iter().rev());
    for v in &verts {
        if v.x < margin || v.y < margin || v.x > w - margin || v.y > h - margin {
            return None;
        }
    }
    let polygon = Polygon::new(verts).ok()?;
    if polygon.is_self_intersecting() {
        return None;
    }
    if bucket_of(polygon.area()) != bucket {
        return None;
    }
    Some(Ribbon { polygon, spine })
}

fn paint_background(rng: &mut ChaCha8Rng, spec: &SceneSpec, img: &mut [f64]) {
    let (w, h) = (spec.width, spec.height);
    for v in img.iter_mut() {
        *v = 185.0;
    }
    // Low-frequency waves.
    let waves = 3;
    for _ in 0..waves {
        let amp = spec.clutter * rng.gen_range(6.0..18.0);
        let kx = rng.gen_range(0.5..2.5) * std::f64::consts::TAU / w as f64;
        let ky = rng.gen_range(0.5..2.5) * std::f64::consts::TAU / h as f64;
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        for y in 0..h {
            for x in 0..w {
                img[y * w + x] += amp * (kx * x as f64 + ky * y as f64 + phase).sin();
            }
        }
    }
    // Blobby clutter shapes.
    let shapes = (spec.clutter * 4.0).round() as usize;
    for _ in 0..shapes {
        let gray = rng.gen_range(140.0..225.0);
        let cx = rng.gen_range(0.0..w as f64);
        let cy = rng.gen_range(0.0..h as f64);
        let rx = rng.gen_range(3.0..0.12 * w as f64);
        let ry = rng.gen_range(3.0..0.12 * h as f64);
        for y in 0..h {
            for x in 0..w {
                let dx = (x as f64 - cx) / rx;
                let dy = (y as f64 - cy) / ry;
                if dx * dx + dy * dy <= 1.0 {
                    img[y * w + x] = gray;
                }
            }
        }
    }
}

fn paint_ribbon(spec: &SceneSpec, img: &mut [f64], ribbon: &Ribbon) {
    let w = spec.width;
    let (lo, hi) = ribbon.polygon.bbox();
    let x0 = lo.x.floor().max(0.0) as usize;
    let y0 = lo.y.floor().max(0.0) as usize;
    let x1 = (hi.x.ceil() as usize).min(spec.width - 1);
    let y1 = (hi.y.ceil() as usize).min(spec.height - 1);
    // Arc position of each spine sample.
    let mut cum = vec![0.0; ribbon.spine.len()];
    for i in 1..ribbon.spine.len() {
        cum[i] = cum[i - 1] + ribbon.spine[i - 1].dist(ribbon.spine[i]);
    }
    for y in y0..=y1 {
        for x in x0..=x1 {
            let p = Point::new(x as f64, y as f64);
            if !ribbon.polygon.contains(p) {
                continue;
            }
            // Arc position of the nearest spine segment point.
            let mut best = f64::MAX;
            let mut u = 0.0;
            for i in 0..ribbon.spine.len() - 1 {
                let (a, b) = (ribbon.spine[i], ribbon.spine[i + 1]);
                let (abx, aby) = (b.x - a.x, b.y - a.y);
                let denom = abx * abx + aby * aby;
                let t = if denom > 1e-12 {
                    (((p.x - a.x) * abx + (p.y - a.y) * aby) / denom).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let q = Point::new(a.x + t * abx, a.y + t * aby);
                let d = p.dist(q);
                if d < best {
                    best = d;
                    u = cum[i] + t * (cum[i + 1] - cum[i]);
                }
            }
            let stripe = (u / spec.stripe_period).floor() as i64 % 2 == 0;
            img[y * w + x] = if stripe { 30.0 } else { 95.0 };
        }
    }
}

/// Generates scene `index` of the dataset described by `spec`,
/// deterministically: same spec and index give identical pixels and
/// ground truth.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> Scene {
    let mut rng = scene_rng(spec.seed, index);
    let (w, h) = (spec.width, spec.height);
    let mut img = vec![0.0f64; w * h];
    paint_background(&mut rng, spec, &mut img);

    let count = rng.gen_range(spec.min_instances..=spec.max_instances);
    let mut buckets: Vec<SizeBucket> = (0..count)
        .map(|_| sample_bucket(&mut rng, spec.size_mix))
        .collect();
    // Big instances first: they are the hardest to place.
    buckets.sort_by_key(|b| match b {
        SizeBucket::Large => 0,
        SizeBucket::Medium => 1,
        SizeBucket::Small => 2,
    });

    let mut occupied = vec![false; w * h];
    let mut polygons = Vec::new();
    let mut spines = Vec::new();
    let mut dropped = 0;
    for bucket in buckets {
        let mut placed = false;
        for _ in 0..PLACEMENT_TRIES {
            let Some(ribbon) = try_ribbon(&mut rng, spec, bucket) else {
                continue;
            };
            let mask = rasterize_mask(&ribbon.polygon, h, w);
            // 2 px clearance between instances.
            if overlaps_dilated(&mask, &occupied, h, w, 2) {
                continue;
            }
            for (o, &m) in occupied.iter_mut().zip(mask.iter()) {
                *o |= m;
            }
            paint_ribbon(spec, &mut img, &ribbon);
            spines.push(Polyline {
                points: ribbon.spine.clone(),
            });
            polygons.push(ribbon.polygon);
            placed = true;
            break;
        }
        if !placed {
            dropped += 1;
        }
    }

    let pixels = img
        .iter()
        .map(|&v| v.round().clamp(0.0, 255.0) as u8)
        .collect();
    Scene {
        width: w,
        height: h,
        pixels,
        polygons,
        spines,
        dropped,
    }
}

fn overlaps_dilated(mask: &[bool], occupied: &[bool], h: usize, w: usize, r: i64) -> bool {
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if !mask[(y * w as i64 + x) as usize] {
                continue;
            }
            for dy in -r..=r {
                for dx in -r..=r {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx >= 0
                        && ny >= 0
                        && nx < w as i64
                        && ny < h as i64
                        && occupied[(ny * w as i64 + nx) as usize]
                    {
                        return true;
                    }
                }
            }
        }
    }
    false
}

/// Writes `count` scenes as PNGs plus a ground-truth JSONL and a manifest
/// into `dir`. Re-running with the same spec reproduces identical bytes.
pub fn make_dataset(spec: &SceneSpec, count: usize, dir: &Path) -> Result<DatasetManifest, IoError> {
    std::fs::create_dir_all(dir.join("images"))?;
    let mut records = Vec::with_capacity(count);
    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let scene = generate_scene(spec, i as u64);
        let image_id = format!("scene_{i:05}");
        let file = format!("images/{image_id}.png");
        let buf: image::GrayImage = image::ImageBuffer::from_raw(
            scene.width as u32,
            scene.height as u32,
            scene.pixels.clone(),
        )
        .expect("pixel buffer matches extents");
        buf.save(dir.join(&file))
            .map_err(|e| IoError::Invalid(format!("png write failed: {e}")))?;
        let detections = scene
            .polygons
            .iter()
            .zip(scene.spines.iter())
            .map(|(poly, spine)| {
                let mut e = Entry::from_polygon(poly, None);
                e.spine = Some(spine.points.iter().map(|p| [p.x, p.y]).collect());
                e
            })
            .collect();
        records.push(Record {
            image_id: image_id.clone(),
            detections,
        });
        images.push(ManifestImage { image_id, file });
    }
    crate::io::write_jsonl(&dir.join("gt.jsonl"), &records)?;
    let manifest = DatasetManifest {
        seed: spec.seed,
        width: spec.width,
        height: spec.height,
        gt_file: "gt.jsonl".into(),
        images,
    };
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::centerline_gt;

    #[test]
    fn scenes_are_bitwise_deterministic() {
        let spec = SceneSpec {
            seed: 42,
            ..Default::default()
        };
        let a = generate_scene(&spec, 7);
        let b = generate_scene(&spec, 7);
        assert_eq!(a.pixels, b.pixels);
        assert_eq!(a.polygons.len(), b.polygons.len());
        for (pa, pb) in a.polygons.iter().zip(b.polygons.iter()) {
            assert_eq!(pa.vertices.len(), pb.vertices.len());
            for (va, vb) in pa.vertices.iter().zip(pb.vertices.iter()) {
                assert_eq!(va.x.to_bits(), vb.x.to_bits());
                assert_eq!(va.y.to_bits(), vb.y.to_bits());
            }
        }
    }

    #[test]
    fn instances_are_mask_disjoint_and_canonical() {
        let spec = SceneSpec {
            seed: 5,
            max_instances: 4,
            ..Default::default()
        };
        for idx in 0..6 {
            let scene = generate_scene(&spec, idx);
            let mut seen = vec![false; scene.width * scene.height];
            for poly in &scene.polygons {
                assert!(poly.area() > 0.0);
                assert!(!poly.is_self_intersecting());
                let mask = rasterize_mask(poly, scene.height, scene.width);
                for (i, &m) in mask.iter().enumerate() {
                    if m {
                        assert!(!seen[i], "instances overlap");
                        seen[i] = true;
                    }
                }
            }
        }
    }

    #[test]
    fn zero_curvature_gives_straight_centerline() {
        let spec = SceneSpec {
            seed: 11,
            curvature: (0.0, 0.0),
            min_instances: 1,
            max_instances: 1,
            ..Default::default()
        };
        let scene = generate_scene(&spec, 0);
        assert_eq!(scene.polygons.len(), 1);
        let spine = &scene.spines[0];
        // All spine points must lie on the straight line through the ends.
        let a = spine.points[0];
        let b = *spine.points.last().unwrap();
        let len = a.dist(b);
        for p in &spine.points {
            let cross =
                ((b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)).abs() / len;
            assert!(cross < 1e-3, "spine deviates {cross}");
        }
    }

    #[test]
    fn centerline_of_generated_ribbon_follows_spine() {
        let spec = SceneSpec {
            seed: 23,
            min_instances: 1,
            max_instances: 1,
            curvature: (0.1, 0.2),
            size_mix: (0.0, 1.0, 0.0),
            ..Default::default()
        };
        let scene = generate_scene(&spec, 1);
        assert_eq!(scene.polygons.len(), 1);
        let line = centerline_gt(&scene.polygons[0], 10).unwrap();
        let spine = &scene.spines[0];
        for p in &line.points {
            // Distance from the computed center point to the true spine.
            let mut best = f64::MAX;
            for i in 0..spine.points.len() - 1 {
                let (a, b) = (spine.points[i], spine.points[i + 1]);
                let (abx, aby) = (b.x - a.x, b.y - a.y);
                let denom = abx * abx + aby * aby;
                let t = (((p.x - a.x) * abx + (p.y - a.y) * aby) / denom).clamp(0.0, 1.0);
                let q = Point::new(a.x + t * abx, a.y + t * aby);
                best = best.min(p.dist(q));
            }
            assert!(best < 1.0, "center point {best} px off the spine");
        }
    }

    #[test]
    fn size_mix_fractions_concentrate() {
        let spec = SceneSpec {
            seed: 77,
            width: 384,
            height: 384,
            min_instances: 2,
            max_instances: 3,
            size_mix: (0.3, 0.4, 0.3),
            ..Default::default()
        };
        let mut counts = [0usize; 3];
        let mut total = 0usize;
        let mut dropped = 0usize;
        let mut idx = 0u64;
        while total < 1000 {
            let scene = generate_scene(&spec, idx);
            dropped += scene.dropped;
            for poly in &scene.polygons {
                counts[bucket_of(poly.area()) as usize] += 1;
                total += 1;
            }
            idx += 1;
        }
        // A rare drop skews the mix negligibly; more than ~1% would.
        assert!(dropped * 100 <= total, "dropped {dropped} of {total}");
        let f = |i: usize| counts[i] as f64 / total as f64;
        assert!((f(0) - 0.3).abs() < 0.05, "small {}", f(0));
        assert!((f(1) - 0.4).abs() < 0.05, "medium {}", f(1));
        assert!((f(2) - 0.3).abs() < 0.05, "large {}", f(2));
    }

    #[test]
    fn dataset_regeneration_matches_checksums() {
        let spec = SceneSpec {
            seed: 3,
            ..Default::default()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = make_dataset(&spec, 3, d1.path()).unwrap();
        let m2 = make_dataset(&spec, 3, d2.path()).unwrap();
        assert_eq!(m1.images.len(), 3);
        for (a, b) in m1.images.iter().zip(m2.images.iter()) {
            let ba = std::fs::read(d1.path().join(&a.file)).unwrap();
            let bb = std::fs::read(d2.path().join(&b.file)).unwrap();
            assert_eq!(ba, bb, "png bytes differ for {}", a.image_id);
        }
        let g1 = std::fs::read(d1.path().join("gt.jsonl")).unwrap();
        let g2 = std::fs::read(d2.path().join("gt.jsonl")).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn empty_dataset_has_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_dataset(&SceneSpec::default(), 0, dir.path()).unwrap();
        assert!(m.images.is_empty());
        let loaded = DatasetManifest::load(&dir.path().join("manifest.json")).unwrap();
        assert!(loaded.images.is_empty());
    }
}
