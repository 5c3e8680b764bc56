//! Detection scoring: greedy IoU matching, precision/recall/F1 with
//! size-bucketed recall, impulse-noise corruption and a small throughput
//! timer.

use serde::{Deserialize, Serialize};

use crate::geometry::{polygon_iou, Polygon};

/// One predicted instance.
#[derive(Debug, Clone)]
pub struct Detection {
    pub polygon: Polygon,
    pub score: f64,
}

/// Outcome of matching one prediction (in rank order).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MatchRecord {
    /// Index into the original prediction list.
    pub pred: usize,
    pub score: f64,
    /// Matched ground-truth index, None for a false positive.
    pub gt: Option<usize>,
    pub iou: f64,
}

/// Match bookkeeping for one image; serializable so a report can be
/// recomputed later from stored matches alone.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ImageMatches {
    pub image_id: String,
    pub records: Vec<MatchRecord>,
    pub gt_areas: Vec<f64>,
}

/// Greedy matcher: predictions in descending confidence (ties broken by
/// smaller polygon area), each ground truth claimed at most once, a match
/// requires IoU >= `iou_threshold`.
pub fn match_detections(
    image_id: &str,
    preds: &[Detection],
    gts: &[Polygon],
    iou_threshold: f64,
) -> ImageMatches {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .score
            .partial_cmp(&preds[a].score)
            .unwrap()
            .then(
                preds[a]
                    .polygon
                    .area()
                    .partial_cmp(&preds[b].polygon.area())
                    .unwrap(),
            )
            .then(a.cmp(&b))
    });
    let mut taken = vec![false; gts.len()];
    let mut records = Vec::with_capacity(preds.len());
    for &pi in &order {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if taken[gi] {
                continue;
            }
            let iou = polygon_iou(&preds[pi].polygon, gt);
            if iou >= iou_threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, iou)) => {
                taken[gi] = true;
                records.push(MatchRecord {
                    pred: pi,
                    score: preds[pi].score,
                    gt: Some(gi),
                    iou,
                });
            }
            None => records.push(MatchRecord {
                pred: pi,
                score: preds[pi].score,
                gt: None,
                iou: 0.0,
            }),
        }
    }
    ImageMatches {
        image_id: image_id.to_string(),
        records,
        gt_areas: gts.iter().map(|g| g.area()).collect(),
    }
}

/// Size buckets by ground-truth polygon area (COCO-style thresholds).
pub const SMALL_AREA: f64 = 32.0 * 32.0;
pub const MEDIUM_AREA: f64 = 96.0 * 96.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

pub fn bucket_of(area: f64) -> SizeBucket {
    if area < SMALL_AREA {
        SizeBucket::Small
    } else if area < MEDIUM_AREA {
        SizeBucket::Medium
    } else {
        SizeBucket::Large
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// Per-bucket recall; None when the bucket has no ground truth.
    pub small_recall: Option<f64>,
    pub medium_recall: Option<f64>,
    pub large_recall: Option<f64>,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let pct = |v: f64| format!("{:.1}", v * 100.0);
        let opt = |v: Option<f64>| v.map_or("N/A".to_string(), pct);
        format!(
            "{:<10} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}\n{:<10} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}\n(tp {} fp {} fn {})\n",
            "",
            "prec",
            "recall",
            "f1",
            "small",
            "medium",
            "large",
            "overall",
            pct(self.precision),
            pct(self.recall),
            pct(self.f1),
            opt(self.small_recall),
            opt(self.medium_recall),
            opt(self.large_recall),
            self.true_positives,
            self.false_positives,
            self.false_negatives,
        )
    }
}

/// Aggregates per-image match lists into an overall report. Per-bucket
/// values are recall within that bucket; empty buckets report N/A.
pub fn bucketed_report(images: &[ImageMatches]) -> EvalReport {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut gt_total = 0usize;
    let mut bucket_gt = [0usize; 3];
    let mut bucket_tp = [0usize; 3];
    for im in images {
        gt_total += im.gt_areas.len();
        for (gi, &area) in im.gt_areas.iter().enumerate() {
            let b = bucket_of(area) as usize;
            bucket_gt[b] += 1;
            if im.records.iter().any(|r| r.gt == Some(gi)) {
                bucket_tp[b] += 1;
            }
        }
        for r in &im.records {
            if r.gt.is_some() {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    let fn_count = gt_total - tp;
    let precision = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else {
        0.0
    };
    let recall = if gt_total > 0 {
        tp as f64 / gt_total as f64
    } else {
        0.0
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let bucket = |i: usize| {
        if bucket_gt[i] > 0 {
            Some(bucket_tp[i] as f64 / bucket_gt[i] as f64)
        } else {
            None
        }
    };
    EvalReport {
        precision,
        recall,
        f1,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_count,
        small_recall: bucket(0),
        medium_recall: bucket(1),
        large_recall: bucket(2),
    }
}

/// Stateless per-pixel hash so noise commutes with cropping: the decision
/// for pixel (x, y) depends only on (seed, x, y).
fn pixel_hash(seed: u64, x: u64, y: u64) -> u64 {
    let mut z = seed ^ x.wrapping_mul(0x9E3779B97F4A7C15) ^ y.wrapping_mul(0xD1B54A32D192ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Salt-and-pepper corruption: each pixel is independently replaced with
/// probability `p`, equally likely by full black or full white (all
/// channels). Deterministic in (seed, x, y).
pub fn impulse_noise(
    pixels: &mut [u8],
    width: usize,
    height: usize,
    channels: usize,
    p: f64,
    seed: u64,
) {
    assert_eq!(pixels.len(), width * height * channels);
    for y in 0..height {
        for x in 0..width {
            let h = pixel_hash(seed, x as u64, y as u64);
            let u = (h >> 11) as f64 / (1u64 << 53) as f64;
            if u < p {
                let v = if h & 1 == 1 { 255 } else { 0 };
                let base = (y * width + x) * channels;
                for c in 0..channels {
                    pixels[base + c] = v;
                }
            }
        }
    }
}

/// Runs `work` (which reports how many images it processed) `runs` times
/// and returns the median images/second. At least 5 runs.
pub fn bench_throughput<F: FnMut() -> usize>(mut work: F, runs: usize) -> f64 {
    let runs = runs.max(5);
    let mut rates = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = std::time::Instant::now();
        let images = work();
        let dt = start.elapsed().as_secs_f64().max(1e-9);
        rates.push(images as f64 / dt);
    }
    rates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = rates.len() / 2;
    if rates.len() % 2 == 1 {
        rates[mid]
    } else {
        0.5 * (rates[mid - 1] + rates[mid])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point;

    fn square(x: f64, y: f64, side: f64) -> Polygon {
        Polygon::new(vec![
            Point::new(x, y),
            Point::new(x + side, y),
            Point::new(x + side, y + side),
            Point::new(x, y + side),
        ])
        .unwrap()
    }

    #[test]
    fn one_perfect_prediction_out_of_two_gts() {
        let gts = vec![square(0.0, 0.0, 10.0), square(50.0, 0.0, 10.0)];
        let preds = vec![Detection {
            polygon: square(0.0, 0.0, 10.0),
            score: 0.9,
        }];
        let m = match_detections("img", &preds, &gts, 0.5);
        let r = bucketed_report(&[m]);
        assert!((r.precision - 1.0).abs() < 1e-12);
        assert!((r.recall - 0.5).abs() < 1e-12);
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.true_positives + r.false_negatives, 2);
    }

    #[test]
    fn duplicate_predictions_yield_one_tp_one_fp() {
        let gts = vec![square(0.0, 0.0, 10.0)];
        let preds = vec![
            Detection {
                polygon: square(0.0, 0.0, 10.0),
                score: 0.8,
            },
            Detection {
                polygon: square(0.5, 0.0, 10.0),
                score: 0.7,
            },
        ];
        let m = match_detections("img", &preds, &gts, 0.5);
        let r = bucketed_report(&[m]);
        assert_eq!(r.true_positives, 1);
        assert_eq!(r.false_positives, 1);
    }

    #[test]
    fn iou_just_below_threshold_is_fp() {
        // Unit squares offset by 0.5 have IoU exactly 1/3.
        let gts = vec![square(0.0, 0.0, 1.0)];
        let preds = vec![Detection {
            polygon: square(0.5, 0.0, 1.0),
            score: 0.9,
        }];
        let m = match_detections("img", &preds, &gts, 0.34);
        assert!(m.records[0].gt.is_none());
        let m = match_detections("img", &preds, &gts, 0.33);
        assert!(m.records[0].gt.is_some());
    }

    #[test]
    fn empty_bucket_reports_none_not_zero() {
        let gts = vec![square(0.0, 0.0, 200.0)]; // large only
        let preds = vec![Detection {
            polygon: square(0.0, 0.0, 200.0),
            score: 0.9,
        }];
        let m = match_detections("img", &preds, &gts, 0.5);
        let r = bucketed_report(&[m]);
        assert_eq!(r.small_recall, None);
        assert_eq!(r.medium_recall, None);
        assert_eq!(r.large_recall, Some(1.0));
        assert!(r.table().contains("N/A"));
    }

    #[test]
    fn mixed_buckets_hand_tally() {
        // 5 instances: 2 small (one matched), 2 medium (both matched),
        // 1 large (unmatched).
        let gts = vec![
            square(0.0, 0.0, 10.0),
            square(100.0, 0.0, 10.0),
            square(0.0, 100.0, 50.0),
            square(200.0, 100.0, 50.0),
            square(0.0, 300.0, 150.0),
        ];
        let preds: Vec<Detection> = [0usize, 2, 3]
            .iter()
            .map(|&i| Detection {
                polygon: gts[i].clone(),
                score: 0.9,
            })
            .collect();
        let m = match_detections("img", &preds, &gts, 0.5);
        let r = bucketed_report(&[m]);
        assert_eq!(r.small_recall, Some(0.5));
        assert_eq!(r.medium_recall, Some(1.0));
        assert_eq!(r.large_recall, Some(0.0));
        assert!((r.recall - 3.0 / 5.0).abs() < 1e-12);
        assert!((r.precision - 1.0).abs() < 1e-12);
    }

    #[test]
    fn report_recomputes_bitwise_from_serialized_matches() {
        let gts = vec![square(0.0, 0.0, 40.0), square(100.0, 0.0, 20.0)];
        let preds = vec![
            Detection {
                polygon: square(1.0, 0.5, 40.0),
                score: 0.7,
            },
            Detection {
                polygon: square(300.0, 300.0, 10.0),
                score: 0.6,
            },
        ];
        let m = match_detections("img", &preds, &gts, 0.5);
        let json = serde_json::to_string(&m).unwrap();
        let back: ImageMatches = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
        assert_eq!(bucketed_report(&[back]), bucketed_report(&[m]));
    }

    #[test]
    fn equal_scores_are_order_invariant() {
        let gts = vec![square(0.0, 0.0, 10.0)];
        let a = Detection {
            polygon: square(0.0, 0.0, 10.0),
            score: 0.5,
        };
        let b = Detection {
            polygon: square(0.0, 0.0, 14.0),
            score: 0.5,
        };
        let m1 = match_detections("img", &[a.clone(), b.clone()], &gts, 0.5);
        let m2 = match_detections("img", &[b, a], &gts, 0.5);
        // The smaller polygon wins the tie in both orders.
        let tp1: Vec<f64> = m1
            .records
            .iter()
            .filter(|r| r.gt.is_some())
            .map(|r| r.iou)
            .collect();
        let tp2: Vec<f64> = m2
            .records
            .iter()
            .filter(|r| r.gt.is_some())
            .map(|r| r.iou)
            .collect();
        assert_eq!(tp1, tp2);
        assert!((tp1[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn noise_identity_and_saturation() {
        let mut img = vec![128u8; 16 * 16];
        let orig = img.clone();
        impulse_noise(&mut img, 16, 16, 1, 0.0, 7);
        assert_eq!(img, orig);
        impulse_noise(&mut img, 16, 16, 1, 1.0, 7);
        assert!(img.iter().all(|&v| v == 0 || v == 255));
    }

    #[test]
    fn noise_fraction_concentrates_at_p() {
        for &p in &[0.05f64, 0.10] {
            let mut img = vec![128u8; 640 * 640];
            impulse_noise(&mut img, 640, 640, 1, p, 99);
            let altered = img.iter().filter(|&&v| v != 128).count();
            let frac = altered as f64 / (640.0 * 640.0);
            assert!((frac - p).abs() < 0.005, "p={p} frac={frac}");
        }
    }

    #[test]
    fn noise_commutes_with_cropping() {
        let w = 64;
        let mut full = vec![50u8; w * w];
        impulse_noise(&mut full, w, w, 1, 0.2, 3);
        // A crop starting at the origin sees the same (x, y) stream.
        let cw = 32;
        let mut crop = vec![50u8; cw * cw];
        impulse_noise(&mut crop, cw, cw, 1, 0.2, 3);
        for y in 0..cw {
            for x in 0..cw {
                assert_eq!(crop[y * cw + x], full[y * w + x]);
            }
        }
    }

    #[test]
    fn throughput_median_is_stable() {
        let r1 = bench_throughput(
            || {
                std::hint::black_box((0..20_000).sum::<u64>());
                4
            },
            5,
        );
        assert!(r1 > 0.0);
    }
}
