//! Ablation studies: controlled train/eval sweeps over fusion mode,
//! input noise and contour token count, with per-seed statistics.

use serde::Serialize;

use crate::backbone::FusionMode;
use crate::eval::{
    bench_throughput, bucketed_report, impulse_noise, match_detections, EvalReport,
};
use crate::geometry::Point;
use crate::pipeline::{infer, train, Model, PipelineError, TrainConfig, TrainSample};
use crate::profile::Profile;
use crate::synth::{generate_scene, Scene, SceneSpec};
use crate::tensor::Tape;

/// Held-out scene indices start here so they never overlap training.
const EVAL_INDEX_BASE: u64 = 1_000_000;

#[derive(Debug, Clone, Copy)]
pub struct StudyOptions {
    pub seeds: usize,
    pub epochs: usize,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    /// Impulse fraction for the corrupted evaluations.
    pub noise: f64,
}

impl Default for StudyOptions {
    fn default() -> Self {
        StudyOptions {
            seeds: 3,
            epochs: 10,
            train_scenes: 16,
            eval_scenes: 30,
            noise: 0.10,
        }
    }
}

pub fn train_samples(spec: &SceneSpec, count: usize) -> Vec<TrainSample> {
    (0..count as u64)
        .map(|i| TrainSample::from_scene(&generate_scene(spec, i)))
        .collect()
}

pub fn held_out(spec: &SceneSpec, count: usize) -> Vec<Scene> {
    (0..count as u64)
        .map(|i| generate_scene(spec, EVAL_INDEX_BASE + i))
        .collect()
}

pub fn train_one(
    profile: &Profile,
    fusion: FusionMode,
    seed: u64,
    epochs: usize,
    samples: &[TrainSample],
) -> Result<Model, PipelineError> {
    let mut spec = profile.model.clone();
    spec.backbone.fusion_mode = fusion;
    let mut model = Model::new(spec, seed)?;
    let cfg = TrainConfig {
        epochs,
        seed,
        ..profile.train.clone()
    };
    train(&mut model, samples, &cfg, |_| {})?;
    Ok(model)
}

/// Evaluates `model` on `scenes`, optionally corrupting inputs first.
pub fn eval_scenes(
    model: &Model,
    profile: &Profile,
    scenes: &[Scene],
    noise: Option<(f64, u64)>,
) -> Result<EvalReport, PipelineError> {
    let mut matches = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let mut pixels = scene.pixels.clone();
        if let Some((p, seed)) = noise {
            impulse_noise(&mut pixels, scene.width, scene.height, 1, p, seed);
        }
        let out = infer(model, &pixels, scene.height, scene.width, &profile.infer)?;
        matches.push(match_detections(
            &format!("eval_{i:05}"),
            &out.detections,
            &scene.polygons,
            profile.iou_threshold,
        ));
    }
    Ok(bucketed_report(&matches))
}

pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Serialize)]
pub struct ModeStats {
    pub mode: String,
    pub clean_f1: Vec<f64>,
    pub noisy_f1: Vec<f64>,
    pub clean_mean: f64,
    pub clean_sd: f64,
    pub noisy_mean: f64,
    pub noisy_sd: f64,
}

#[derive(Debug, Serialize)]
pub struct ShuffleStudy {
    pub noise: f64,
    /// Index 0 is shuffle fusion, index 1 is no fusion exchange.
    pub modes: Vec<ModeStats>,
    /// Per-seed (shuffle − none) gaps, paired by seed.
    pub clean_gaps: Vec<f64>,
    pub noisy_gaps: Vec<f64>,
    pub clean_gap_mean: f64,
    pub noisy_gap_mean: f64,
    /// Seeds where the noisy gap is at least the clean gap.
    pub widened_seeds: usize,
    pub verdict: String,
}

/// Fusion ablation: identical budgets with and without the shuffle
/// layers, on clean and noise-corrupted held-out scenes, paired by seed.
pub fn shuffle_study(
    profile: &Profile,
    opts: &StudyOptions,
) -> Result<ShuffleStudy, PipelineError> {
    let samples = train_samples(&profile.scene, opts.train_scenes);
    let scenes = held_out(&profile.scene, opts.eval_scenes);
    let mut per_mode: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for mode in [FusionMode::Shuffle, FusionMode::None] {
        let mut clean = Vec::new();
        let mut noisy = Vec::new();
        for s in 0..opts.seeds as u64 {
            let model = train_one(profile, mode, 100 + s, opts.epochs, &samples)?;
            clean.push(eval_scenes(&model, profile, &scenes, None)?.f1);
            noisy.push(eval_scenes(&model, profile, &scenes, Some((opts.noise, s)))?.f1);
        }
        per_mode.push((clean, noisy));
    }
    let modes: Vec<ModeStats> = per_mode
        .iter()
        .zip(["shuffle", "none"])
        .map(|((clean, noisy), name)| {
            let (cm, cs) = mean_sd(clean);
            let (nm, ns) = mean_sd(noisy);
            ModeStats {
                mode: name.to_string(),
                clean_f1: clean.clone(),
                noisy_f1: noisy.clone(),
                clean_mean: cm,
                clean_sd: cs,
                noisy_mean: nm,
                noisy_sd: ns,
            }
        })
        .collect();
    let clean_gaps: Vec<f64> = per_mode[0]
        .0
        .iter()
        .zip(per_mode[1].0.iter())
        .map(|(a, b)| a - b)
        .collect();
    let noisy_gaps: Vec<f64> = per_mode[0]
        .1
        .iter()
        .zip(per_mode[1].1.iter())
        .map(|(a, b)| a - b)
        .collect();
    let widened_seeds = clean_gaps
        .iter()
        .zip(noisy_gaps.iter())
        .filter(|(c, n)| n >= c)
        .count();
    let clean_gap_mean = mean_sd(&clean_gaps).0;
    let noisy_gap_mean = mean_sd(&noisy_gaps).0;
    let verdict = format!(
        "shuffle − none: clean {clean_gap_mean:+.3}, noisy {noisy_gap_mean:+.3}; \
         gap widened under noise in {widened_seeds}/{} seeds",
        opts.seeds
    );
    Ok(ShuffleStudy {
        noise: opts.noise,
        modes,
        clean_gaps,
        noisy_gaps,
        clean_gap_mean,
        noisy_gap_mean,
        widened_seeds,
        verdict,
    })
}

#[derive(Debug, Serialize)]
pub struct NoiseLevel {
    pub p: f64,
    pub f1: f64,
    pub recall: f64,
    pub small_recall: Option<f64>,
    pub medium_recall: Option<f64>,
    pub large_recall: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct BucketDrop {
    pub noise_seed: u64,
    pub small_drop: Option<f64>,
    pub large_drop: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct NoiseStudy {
    pub levels: Vec<NoiseLevel>,
    /// Small- vs large-bucket recall loss at the top noise level, one row
    /// per corruption seed.
    pub bucket_drops: Vec<BucketDrop>,
    pub verdict: String,
}

/// Robustness curve for one model (trained here unless supplied):
/// evaluation under growing impulse noise, watching the small bucket.
pub fn noise_study(
    profile: &Profile,
    opts: &StudyOptions,
    pretrained: Option<&Model>,
) -> Result<NoiseStudy, PipelineError> {
    let trained;
    let model = match pretrained {
        Some(m) => m,
        None => {
            let samples = train_samples(&profile.scene, opts.train_scenes);
            trained = train_one(
                profile,
                profile.model.backbone.fusion_mode,
                100,
                opts.epochs,
                &samples,
            )?;
            &trained
        }
    };
    let scenes = held_out(&profile.scene, opts.eval_scenes);
    let clean = eval_scenes(model, profile, &scenes, None)?;
    let mut levels = vec![NoiseLevel {
        p: 0.0,
        f1: clean.f1,
        recall: clean.recall,
        small_recall: clean.small_recall,
        medium_recall: clean.medium_recall,
        large_recall: clean.large_recall,
    }];
    for &p in &[0.02, 0.05, opts.noise] {
        let report = eval_scenes(model, profile, &scenes, Some((p, 1)))?;
        levels.push(NoiseLevel {
            p,
            f1: report.f1,
            recall: report.recall,
            small_recall: report.small_recall,
            medium_recall: report.medium_recall,
            large_recall: report.large_recall,
        });
    }
    let mut bucket_drops = Vec::new();
    for seed in 0..opts.seeds as u64 {
        let noisy = eval_scenes(model, profile, &scenes, Some((opts.noise, seed)))?;
        let drop = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) => Some(a - b),
            _ => None,
        };
        bucket_drops.push(BucketDrop {
            noise_seed: seed,
            small_drop: drop(clean.small_recall, noisy.small_recall),
            large_drop: drop(clean.large_recall, noisy.large_recall),
        });
    }
    let f1_drop = levels[0].f1 - levels.last().expect("levels non-empty").f1;
    let verdict = format!(
        "f1 drops {f1_drop:.3} from p=0 to p={:.2}; bucket drops per seed: {}",
        opts.noise,
        bucket_drops
            .iter()
            .map(|b| format!(
                "small {} vs large {}",
                b.small_drop.map_or("N/A".into(), |v| format!("{v:.3}")),
                b.large_drop.map_or("N/A".into(), |v| format!("{v:.3}"))
            ))
            .collect::<Vec<_>>()
            .join("; ")
    );
    Ok(NoiseStudy {
        levels,
        bucket_drops,
        verdict,
    })
}

#[derive(Debug, Serialize)]
pub struct NsweepRow {
    pub n_contour: usize,
    pub f1: f64,
    /// Refinement throughput, instances per second.
    pub instances_per_sec: f64,
}

#[derive(Debug, Serialize)]
pub struct NsweepSeed {
    pub seed: u64,
    pub rows: Vec<NsweepRow>,
}

#[derive(Debug, Serialize)]
pub struct NsweepStudy {
    pub seeds: Vec<NsweepSeed>,
    pub verdict: String,
}

pub const NSWEEP_POINTS: [usize; 5] = [12, 16, 20, 24, 28];

/// Contour-token sweep on single checkpoints: the token count is an
/// inference-time knob, so one trained model per seed serves every
/// setting. Throughput isolates the refinement stage.
pub fn nsweep_study(
    profile: &Profile,
    opts: &StudyOptions,
) -> Result<NsweepStudy, PipelineError> {
    let samples = train_samples(&profile.scene, opts.train_scenes);
    let scenes = held_out(&profile.scene, opts.eval_scenes);
    let mut seeds = Vec::new();
    for s in 0..opts.seeds as u64 {
        let seed = 100 + s;
        let mut model = train_one(
            profile,
            profile.model.backbone.fusion_mode,
            seed,
            opts.epochs,
            &samples,
        )?;
        let mut rows = Vec::new();
        for &n in &NSWEEP_POINTS {
            model.refiner.config.n_contour = n;
            let report = eval_scenes(&model, profile, &scenes, None)?;
            rows.push(NsweepRow {
                n_contour: n,
                f1: report.f1,
                instances_per_sec: refiner_throughput(&model, &scenes[0], n)?,
            });
        }
        seeds.push(NsweepSeed { seed, rows });
    }
    let monotone = seeds.iter().all(|s| {
        s.rows
            .windows(2)
            .all(|w| w[1].instances_per_sec <= w[0].instances_per_sec * 1.02)
    });
    let stable = seeds.iter().all(|s| {
        let f1_at = |n: usize| {
            s.rows
                .iter()
                .find(|r| r.n_contour == n)
                .map(|r| r.f1)
                .unwrap_or(0.0)
        };
        f1_at(20) >= f1_at(12) - 0.01
    });
    let verdict = format!(
        "throughput non-increasing with n: {monotone}; f1 stable for n >= 20: {stable}"
    );
    Ok(NsweepStudy { seeds, verdict })
}

/// Instances refined per second at token count `n`, measured on one
/// scene's feature maps with the backbone cost excluded.
pub fn refiner_throughput(
    model: &Model,
    scene: &Scene,
    n: usize,
) -> Result<f64, PipelineError> {
    let mut tape: Tape<f32> = Tape::new();
    let bind = model.store.bind(&mut tape);
    let input = crate::pipeline::image_input(&mut tape, &scene.pixels, scene.height, scene.width);
    let pyramid = model.backbone.forward(&mut tape, &bind, input)?;
    let heads = model.backbone.heads(&mut tape, &bind, pyramid.fused)?;
    // A fixed circular contour keeps the workload identical across runs.
    let (cx, cy, r) = (
        scene.width as f64 / 2.0,
        scene.height as f64 / 2.0,
        scene.width.min(scene.height) as f64 / 4.0,
    );
    let rough: Vec<Point> = (0..n)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / n as f64;
            Point::new(cx + r * a.cos(), cy + r * a.sin())
        })
        .collect();
    let mut refiner = model.refiner.clone();
    refiner.config.n_contour = n;
    let hw = (scene.height, scene.width);
    let batch = 16;
    let mark = tape.len();
    // Warm once so allocator effects don't land on the first sample.
    refiner
        .forward(&mut tape, &bind, pyramid.fused, &heads, hw, &rough)
        .expect("refiner forward");
    tape.truncate(mark);
    let rate = bench_throughput(
        || {
            for _ in 0..batch {
                refiner
                    .forward(&mut tape, &bind, pyramid.fused, &heads, hw, &rough)
                    .expect("refiner forward");
                tape.truncate(mark);
            }
            batch
        },
        7,
    );
    Ok(rate)
}
