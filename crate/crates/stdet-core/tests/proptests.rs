//! Property-based invariants for geometry, evaluation and tape ops.

use proptest::prelude::*;
use stdet_core::eval::{impulse_noise, match_detections, Detection};
use stdet_core::geometry::{
    apply_offsets, polygon_iou, raster_iou, Point, Polygon, Polyline,
};
use stdet_core::tensor::Tape;

/// Convex polygon from random radii: always simple, never degenerate.
fn convex_polygon(seed: (f64, Vec<f64>)) -> Polygon {
    let (rot, radii) = seed;
    let n = radii.len();
    let pts: Vec<Point> = radii
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let a = rot + std::f64::consts::TAU * i as f64 / n as f64;
            Point::new(40.0 + r * a.cos(), 40.0 + r * a.sin())
        })
        .collect();
    Polygon::new(pts).expect("convex polygon")
}

fn polygon_strategy() -> impl Strategy<Value = Polygon> {
    (
        0.0..std::f64::consts::TAU,
        prop::collection::vec(5.0..30.0f64, 4..12),
    )
        .prop_map(convex_polygon)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn canonical_form_is_idempotent(poly in polygon_strategy()) {
        let again = Polygon::new(poly.vertices.clone()).unwrap();
        prop_assert_eq!(&poly.vertices, &again.vertices);
        prop_assert!(poly.area() > 0.0);
    }

    #[test]
    fn contour_resampling_is_equally_spaced(poly in polygon_strategy(), n in 8usize..40) {
        let pts = poly.resample_contour(n).unwrap();
        prop_assert_eq!(pts.len(), n);
        let spacing = poly.perimeter() / n as f64;
        // consecutive samples can cut corners, so spacing is measured
        // along the boundary via closest-point projection
        for w in pts.windows(2) {
            let d = w[0].dist(w[1]);
            prop_assert!(d <= spacing + 1e-6, "chord {d} exceeds arc step {spacing}");
        }
    }

    #[test]
    fn polyline_resample_keeps_endpoints(xs in prop::collection::vec((0.0..100.0f64, 0.0..100.0f64), 2..10), n in 2usize..50) {
        let line = Polyline { points: xs.iter().map(|&(x, y)| Point::new(x, y)).collect() };
        let r = line.resample(n).unwrap();
        prop_assert_eq!(r.points.len(), n);
        prop_assert!(r.points[0].dist(line.points[0]) < 1e-9);
        prop_assert!(r.points[n - 1].dist(*line.points.last().unwrap()) < 1e-9);
        prop_assert!(r.length() <= line.length() + 1e-9);
    }

    #[test]
    fn exact_iou_tracks_raster_oracle(a in polygon_strategy(), b in polygon_strategy()) {
        let exact = polygon_iou(&a, &b);
        let raster = raster_iou(&a, &b, 80, 80);
        prop_assert!(exact >= 0.0 && exact <= 1.0);
        prop_assert!((exact - raster).abs() < 0.05, "exact {exact} vs raster {raster}");
    }

    #[test]
    fn self_iou_is_one(poly in polygon_strategy()) {
        prop_assert!((polygon_iou(&poly, &poly) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn offsets_keep_points_inside(
        pts in prop::collection::vec((0.0..64.0f64, 0.0..64.0f64), 1..20),
        offs in prop::collection::vec((-200.0..200.0f64, -200.0..200.0f64), 20),
    ) {
        let points: Vec<Point> = pts.iter().map(|&(x, y)| Point::new(x, y)).collect();
        let moved = apply_offsets(&points, &offs[..points.len()], 64, 64).unwrap();
        for p in &moved {
            prop_assert!(p.x >= 0.0 && p.x <= 63.0);
            prop_assert!(p.y >= 0.0 && p.y <= 63.0);
        }
    }

    #[test]
    fn matching_counts_are_consistent(
        scores in prop::collection::vec(0.0..1.0f64, 0..8),
        iou in 0.05..0.95f64,
    ) {
        let gts: Vec<Polygon> = (0..3)
            .map(|i| {
                let x = 10.0 + 20.0 * i as f64;
                Polygon::new(vec![
                    Point::new(x, 10.0),
                    Point::new(x + 12.0, 10.0),
                    Point::new(x + 12.0, 22.0),
                    Point::new(x, 22.0),
                ])
                .unwrap()
            })
            .collect();
        let preds: Vec<Detection> = scores
            .iter()
            .enumerate()
            .map(|(i, &score)| Detection {
                polygon: gts[i % 3].clone(),
                score,
            })
            .collect();
        let m = match_detections("img", &preds, &gts, iou);
        let tp = m.records.iter().filter(|r| r.gt.is_some()).count();
        prop_assert!(tp <= gts.len());
        prop_assert!(tp <= preds.len());
        prop_assert_eq!(m.records.len(), preds.len());
        // every matched gt appears at most once
        let mut seen = std::collections::HashSet::new();
        for r in &m.records {
            if let Some(g) = r.gt {
                prop_assert!(seen.insert(g), "gt {g} matched twice");
            }
        }
    }

    #[test]
    fn impulse_noise_writes_extremes_only(p in 0.0..1.0f64, seed in 0u64..1000) {
        let mut pixels: Vec<u8> = (0..32 * 32).map(|i| (i % 251) as u8).collect();
        let original = pixels.clone();
        impulse_noise(&mut pixels, 32, 32, 1, p, seed);
        for (a, b) in pixels.iter().zip(original.iter()) {
            prop_assert!(a == b || *a == 0 || *a == 255);
        }
    }

    #[test]
    fn tape_add_commutes_and_reshape_preserves(xs in prop::collection::vec(-10.0..10.0f64, 12)) {
        let mut t: Tape<f64> = Tape::new();
        let a = t.constant(&[3, 4], xs.clone());
        let b = t.constant(&[3, 4], xs.iter().rev().cloned().collect());
        let ab = t.add(a, b).unwrap();
        let ba = t.add(b, a).unwrap();
        prop_assert_eq!(t.values(ab), t.values(ba));
        let r = t.reshape(a, &[2, 6]).unwrap();
        prop_assert_eq!(t.values(r), &xs[..]);
    }

    #[test]
    fn softmax_rows_are_distributions(xs in prop::collection::vec(-20.0..20.0f64, 15)) {
        let mut t: Tape<f64> = Tape::new();
        let a = t.constant(&[3, 5], xs);
        let s = t.softmax_last(a);
        for row in t.values(s).chunks(5) {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
}
