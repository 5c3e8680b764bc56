//! End-to-end glue: model bundle (backbone + refiner + parameters),
//! dense-target training loop, and inference from grayscale pixels to
//! scored polygons.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{
    init_backbone_params, Backbone, BackboneConfig, ConfigError, HeadVars, HeatmapSet,
};
use crate::eval::Detection;
use crate::geometry::{
    extract_rough_contours, rasterize_mask, raster_iou, GeometryError, LabelSet, Point, Polygon,
    Polyline,
};
use crate::io::OverlayInstance;
use crate::params::{ParamError, ParamStore};
use crate::refine::{init_refiner_params, Refiner, RefinerConfig};
use crate::synth::Scene;
use crate::tensor::{Adam, AdamConfig, Tape, TensorError, Var};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("model file: {0}")]
    ModelFile(String),
}

type Result<T> = std::result::Result<T, PipelineError>;

/// Architecture description persisted next to the checkpoint so a saved
/// model can be reopened without outside knowledge.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub backbone: BackboneConfig,
    pub refiner: RefinerConfig,
}

impl ModelSpec {
    /// Small profile: per-scale width 24, contour/center sizes 20/10.
    pub fn toy() -> Self {
        let backbone = BackboneConfig::toy();
        let fused: usize = backbone.widths.iter().sum();
        let refiner = RefinerConfig::toy(fused, backbone.embed_dim);
        ModelSpec { backbone, refiner }
    }
}

pub struct Model {
    pub backbone: Backbone,
    pub refiner: Refiner,
    pub store: ParamStore<f32>,
}

impl Model {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let backbone = Backbone::new(spec.backbone.clone())?;
        let refiner = Refiner::new(spec.refiner.clone())?;
        let mut store = ParamStore::new();
        init_backbone_params(&spec.backbone, &mut store, seed)?;
        init_refiner_params(&spec.refiner, &mut store, seed ^ 0x5EED)?;
        Ok(Model {
            backbone,
            refiner,
            store,
        })
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            backbone: self.backbone.config.clone(),
            refiner: self.refiner.config.clone(),
        }
    }

    /// Writes `model.json` plus the parameter checkpoint into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(&self.spec())
            .map_err(|e| PipelineError::ModelFile(e.to_string()))?;
        std::fs::write(dir.join("model.json"), json)?;
        self.store.save_checkpoint(dir)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(dir.join("model.json"))?;
        let spec: ModelSpec =
            serde_json::from_str(&raw).map_err(|e| PipelineError::ModelFile(e.to_string()))?;
        let backbone = Backbone::new(spec.backbone)?;
        let refiner = Refiner::new(spec.refiner)?;
        let store = ParamStore::load_checkpoint(dir)?;
        Ok(Model {
            backbone,
            refiner,
            store,
        })
    }
}

/// Grayscale pixels replicated to three channels in [0, 1].
pub fn image_input(tape: &mut Tape<f32>, pixels: &[u8], height: usize, width: usize) -> Var {
    let plane: Vec<f32> = pixels.iter().map(|&v| v as f32 / 255.0).collect();
    let mut data = Vec::with_capacity(3 * plane.len());
    for _ in 0..3 {
        data.extend_from_slice(&plane);
    }
    tape.constant(&[1, 3, height, width], data)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Multiplied into the learning rate every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    pub w_cls: f64,
    pub w_dist: f64,
    pub w_orient: f64,
    pub w_embed: f64,
    pub w_refine: f64,
    /// Separation target between instance embedding means.
    pub embed_margin: f64,
    /// Interior pixels sampled per instance for the embedding loss.
    pub embed_samples: usize,
    /// Minimum overlap for training the refiner on its own rough contour.
    pub iou_match: f64,
    pub cls_threshold: f32,
    pub min_area: usize,
    /// Uniform jitter (pixels) on ground-truth contours used as rough
    /// input when no prediction matches yet.
    pub rough_jitter: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            lr: 0.001,
            lr_decay: 0.9,
            decay_every: 5,
            w_cls: 1.0,
            w_dist: 0.5,
            w_orient: 0.5,
            w_embed: 0.25,
            w_refine: 1.0,
            embed_margin: 1.0,
            embed_samples: 48,
            iou_match: 0.3,
            cls_threshold: 0.5,
            min_area: 16,
            rough_jitter: 1.5,
            seed: 0,
        }
    }
}

/// One training image with its dense targets rendered once up front.
pub struct TrainSample {
    pub pixels: Vec<u8>,
    pub width: usize,
    pub height: usize,
    pub polygons: Vec<Polygon>,
    pub spines: Vec<Polyline>,
    pub labels: LabelSet,
}

impl TrainSample {
    pub fn from_scene(scene: &Scene) -> Self {
        let labels = crate::geometry::label_fields(&scene.polygons, scene.height, scene.width);
        TrainSample {
            pixels: scene.pixels.clone(),
            width: scene.width,
            height: scene.height,
            polygons: scene.polygons.clone(),
            spines: scene.spines.clone(),
            labels,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub cls: f64,
    pub dist: f64,
    pub orient: f64,
    pub embed: f64,
    pub refine: f64,
    /// Steps dropped because the loss went non-finite.
    pub skipped: usize,
}

struct StepLosses {
    total: f64,
    cls: f64,
    dist: f64,
    orient: f64,
    embed: f64,
    refine: f64,
    finite: bool,
}

/// Runs Adam over `samples` for `cfg.epochs` epochs, calling `progress`
/// after each epoch. Deterministic for a fixed config and sample order.
pub fn train(
    model: &mut Model,
    samples: &[TrainSample],
    cfg: &TrainConfig,
    mut progress: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0xC0FFEE));
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr * cfg.lr_decay.powi((epoch / cfg.decay_every.max(1)) as i32);
        adam.set_lr(lr);
        let mut stats = EpochStats {
            epoch,
            lr,
            ..EpochStats::default()
        };
        for sample in samples {
            let step = train_step(model, sample, cfg, &mut rng, &mut adam)?;
            if !step.finite {
                stats.skipped += 1;
                continue;
            }
            stats.total += step.total;
            stats.cls += step.cls;
            stats.dist += step.dist;
            stats.orient += step.orient;
            stats.embed += step.embed;
            stats.refine += step.refine;
        }
        let n = (samples.len() - stats.skipped).max(1) as f64;
        stats.total /= n;
        stats.cls /= n;
        stats.dist /= n;
        stats.orient /= n;
        stats.embed /= n;
        stats.refine /= n;
        progress(&stats);
        history.push(stats);
    }
    Ok(history)
}

fn train_step(
    model: &mut Model,
    sample: &TrainSample,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    adam: &mut Adam<f32>,
) -> Result<StepLosses> {
    let (h, w) = (sample.height, sample.width);
    let mut tape = Tape::new();
    let bind = model.store.bind(&mut tape);
    let input = image_input(&mut tape, &sample.pixels, h, w);
    let pyramid = model.backbone.forward(&mut tape, &bind, input)?;
    let heads = model.backbone.heads(&mut tape, &bind, pyramid.fused)?;

    let mut terms: Vec<(Var, f64)> = Vec::new();

    // Dense head losses against the rendered targets.
    let cls_t = tape.constant(&[1, 1, h, w], sample.labels.class_mask.clone());
    let cls_loss = tape.bce_with_logits(heads.cls_logits, cls_t)?;
    let dist_t = tape.constant(&[1, 1, h, w], sample.labels.distance.clone());
    let dist_loss = tape.mse(heads.dist, dist_t)?;
    let orient_loss = orient_loss(&mut tape, &heads, &sample.labels)?;
    let embed_loss = embed_loss(&mut tape, &heads, &sample.labels, cfg)?;
    terms.push((cls_loss, cfg.w_cls));
    terms.push((dist_loss, cfg.w_dist));
    terms.push((orient_loss, cfg.w_orient));
    terms.push((embed_loss, cfg.w_embed));

    // Refiner loss per ground-truth instance. Early on no prediction
    // overlaps the truth, so a jittered true contour stands in for the
    // rough input until the detector catches up.
    let n = model.refiner.config.n_contour;
    let c = model.refiner.config.c_center;
    let heatmaps = heads.to_heatmaps(&tape);
    let rough_preds =
        extract_rough_contours(&heatmaps.cls, h, w, cfg.cls_threshold, cfg.min_area);
    let mut refine_terms = 0usize;
    let mut refine_acc: Option<Var> = None;
    for (poly, spine) in sample.polygons.iter().zip(sample.spines.iter()) {
        let rough = match matched_rough(poly, &rough_preds, cfg.iou_match, h, w, n) {
            Some(points) => points,
            None => jittered_contour(poly, n, cfg.rough_jitter, rng)?,
        };
        let out = model
            .refiner
            .forward(&mut tape, &bind, pyramid.fused, &heads, (h, w), &rough)?;
        let gt_contour: Vec<Point> = rough.iter().map(|&p| poly.boundary_closest(p).1).collect();
        let gt_center = aligned_center(spine, &out.center, c)?;
        let l = model
            .refiner
            .loss(&mut tape, &out, &gt_center, &gt_contour, (h, w))?;
        refine_acc = Some(match refine_acc {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
        refine_terms += 1;
    }
    let refine_loss = match refine_acc {
        Some(acc) => tape.scale(acc, 1.0 / refine_terms as f32),
        None => tape.scalar(0.0),
    };
    terms.push((refine_loss, cfg.w_refine));

    let mut total = None;
    for &(term, weight) in &terms {
        let scaled = tape.scale(term, weight as f32);
        total = Some(match total {
            Some(acc) => tape.add(acc, scaled)?,
            None => scaled,
        });
    }
    let total = total.expect("at least one loss term");

    let losses = StepLosses {
        total: tape.value_scalar(total) as f64,
        cls: tape.value_scalar(cls_loss) as f64,
        dist: tape.value_scalar(dist_loss) as f64,
        orient: tape.value_scalar(orient_loss) as f64,
        embed: tape.value_scalar(embed_loss) as f64,
        refine: tape.value_scalar(refine_loss) as f64,
        finite: tape.value_scalar(total).is_finite(),
    };
    if losses.finite {
        tape.backward(total)?;
        model.store.apply_grads(&tape, &bind, adam)?;
    }
    Ok(losses)
}

/// Squared error on the orientation field, restricted to pixels inside
/// an instance (the target is undefined elsewhere).
fn orient_loss(
    tape: &mut Tape<f32>,
    heads: &HeadVars,
    labels: &LabelSet,
) -> Result<Var> {
    let (h, w) = (labels.height, labels.width);
    let target = tape.constant(&[1, 2, h, w], labels.orientation.clone());
    let mut mask2 = Vec::with_capacity(2 * h * w);
    mask2.extend_from_slice(&labels.class_mask);
    mask2.extend_from_slice(&labels.class_mask);
    let count: f32 = labels.class_mask.iter().sum();
    let mask = tape.constant(&[1, 2, h, w], mask2);
    let diff = tape.sub(heads.orient, target)?;
    let sq = tape.mul(diff, diff)?;
    let masked = tape.mul(sq, mask)?;
    let s = tape.sum(masked);
    Ok(tape.scale(s, 1.0 / (2.0 * count.max(1.0))))
}

/// Pull-push loss on instance embeddings: pixels of one instance cluster
/// around their mean, distinct means repel to at least `embed_margin`.
fn embed_loss(
    tape: &mut Tape<f32>,
    heads: &HeadVars,
    labels: &LabelSet,
    cfg: &TrainConfig,
) -> Result<Var> {
    let (h, w) = (labels.height, labels.width);
    let instances = labels.instance_ids.iter().copied().max().unwrap_or(0) as usize;
    if instances == 0 {
        return Ok(tape.scalar(0.0));
    }
    let eshape = tape.shape(heads.embed).to_vec();
    let e = eshape[1];
    let embed3 = tape.reshape(heads.embed, &[e, h, w])?;

    let mut means = Vec::new();
    let mut pulls = Vec::new();
    for k in 1..=instances as u32 {
        let inside: Vec<(f64, f64)> = labels
            .instance_ids
            .iter()
            .enumerate()
            .filter(|&(_, &id)| id == k)
            .map(|(i, _)| ((i % w) as f64, (i / w) as f64))
            .collect();
        if inside.is_empty() {
            continue;
        }
        // Deterministic even subsample, no rng required.
        let stride = (inside.len() / cfg.embed_samples).max(1);
        let points: Vec<(f64, f64)> = inside.iter().step_by(stride).copied().collect();
        let p = points.len();
        let feats = tape.gather_bilinear(embed3, &points)?; // [P, E]
        let avg = tape.constant(&[1, p], vec![1.0 / p as f32; p]);
        let mu = tape.matmul(avg, feats)?; // [1, E]
        let ones = tape.constant(&[p, 1], vec![1.0; p]);
        let mu_wide = tape.matmul(ones, mu)?;
        let diff = tape.sub(feats, mu_wide)?;
        let sq = tape.mul(diff, diff)?;
        pulls.push(tape.mean(sq));
        means.push(mu);
    }

    let mut acc = tape.scalar(0.0);
    for pull in &pulls {
        acc = tape.add(acc, *pull)?;
    }
    acc = tape.scale(acc, 1.0 / pulls.len().max(1) as f32);

    let mut pair_count = 0usize;
    let mut push_acc = tape.scalar(0.0);
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            let d = tape.sub(means[i], means[j])?;
            let sq = tape.mul(d, d)?;
            let s = tape.sum(sq);
            let s = tape.add_scalar(s, 1e-8);
            let dist = tape.sqrt(s);
            let neg = tape.neg(dist);
            let gap = tape.add_scalar(neg, cfg.embed_margin as f32);
            let hinge = tape.relu(gap);
            let hinge_sq = tape.mul(hinge, hinge)?;
            push_acc = tape.add(push_acc, hinge_sq)?;
            pair_count += 1;
        }
    }
    if pair_count > 0 {
        let scaled = tape.scale(push_acc, 1.0 / pair_count as f32);
        acc = tape.add(acc, scaled)?;
    }
    Ok(acc)
}

/// Best-overlap predicted contour for a ground-truth polygon, resampled
/// to `n` points; `None` when nothing reaches the threshold.
fn matched_rough(
    gt: &Polygon,
    preds: &[Polygon],
    iou_threshold: f64,
    h: usize,
    w: usize,
    n: usize,
) -> Option<Vec<Point>> {
    let mut best: Option<(f64, &Polygon)> = None;
    for p in preds {
        let iou = raster_iou(gt, p, h, w);
        if iou >= iou_threshold && best.map_or(true, |(b, _)| iou > b) {
            best = Some((iou, p));
        }
    }
    best.and_then(|(_, p)| p.resample_contour(n).ok())
}

fn jittered_contour(
    poly: &Polygon,
    n: usize,
    jitter: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Point>> {
    let mut points = poly.resample_contour(n)?;
    for p in &mut points {
        p.x += rng.gen_range(-jitter..=jitter);
        p.y += rng.gen_range(-jitter..=jitter);
    }
    Ok(points)
}

/// Resamples the true spine to `c` points, oriented to match the current
/// prediction (the center line has no inherent direction).
fn aligned_center(spine: &Polyline, predicted: &Polyline, c: usize) -> Result<Polyline> {
    let fwd = spine.resample(c)?;
    let cost = |line: &Polyline| -> f64 {
        line.points
            .iter()
            .zip(predicted.points.iter())
            .map(|(a, b)| a.dist(*b))
            .sum()
    };
    let mut rev_points = fwd.points.clone();
    rev_points.reverse();
    let rev = Polyline { points: rev_points };
    Ok(if cost(&rev) < cost(&fwd) { rev } else { fwd })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferConfig {
    pub cls_threshold: f32,
    pub min_area: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            cls_threshold: 0.5,
            min_area: 16,
        }
    }
}

/// Everything one forward pass produces: scored polygons for evaluation,
/// per-instance geometry for overlays, raw maps for debugging.
pub struct Inference {
    pub detections: Vec<Detection>,
    pub instances: Vec<OverlayInstance>,
    pub heatmaps: HeatmapSet,
}

pub fn infer(
    model: &Model,
    pixels: &[u8],
    height: usize,
    width: usize,
    cfg: &InferConfig,
) -> Result<Inference> {
    let mut tape = Tape::new();
    let bind = model.store.bind(&mut tape);
    let input = image_input(&mut tape, pixels, height, width);
    let pyramid = model.backbone.forward(&mut tape, &bind, input)?;
    let heads = model.backbone.heads(&mut tape, &bind, pyramid.fused)?;
    let heatmaps = heads.to_heatmaps(&tape);

    let roughs = extract_rough_contours(
        &heatmaps.cls,
        height,
        width,
        cfg.cls_threshold,
        cfg.min_area,
    );
    let n = model.refiner.config.n_contour;
    let mut detections = Vec::new();
    let mut instances = Vec::new();
    for rough_poly in &roughs {
        let Ok(rough) = rough_poly.resample_contour(n) else {
            continue;
        };
        let out = model.refiner.forward(
            &mut tape,
            &bind,
            pyramid.fused,
            &heads,
            (height, width),
            &rough,
        )?;
        let Ok(polygon) = Polygon::new(out.refined.clone()) else {
            continue;
        };
        let score = mean_inside(&heatmaps.cls, &polygon, height, width);
        instances.push(OverlayInstance {
            rough: Some(rough.clone()),
            center: Some(out.center.points.clone()),
            refined: Some(out.refined.clone()),
        });
        detections.push(Detection { polygon, score });
    }
    Ok(Inference {
        detections,
        instances,
        heatmaps,
    })
}

/// Detection confidence: mean class probability over the polygon's pixels.
fn mean_inside(prob: &[f32], poly: &Polygon, height: usize, width: usize) -> f64 {
    let mask = rasterize_mask(poly, height, width);
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for (i, &m) in mask.iter().enumerate() {
        if m {
            sum += prob[i] as f64;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}
