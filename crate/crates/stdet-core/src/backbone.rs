//! Multi-resolution convolutional backbone with parameter-free channel
//! shuffling between scale branches.
//!
//! The network grows one branch per stage: a stem brings the image to
//! stride 4, then down-sample convolutions open strides 8, 16 and 32.
//! After the two- and three-branch stages the shuffle layer exchanges
//! channel slices across scales (no weights). The four final maps are
//! upsampled to stride 4 and concatenated, and four small heads predict
//! per-pixel classification, distance, orientation and embedding maps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{Binding, ParamStore};
use crate::tensor::{Elem, ResampleMode, ScaleFactor, Tape, TensorError, Var};

pub const NUM_SCALES: usize = 4;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("scale {scale}: width {width} not divisible by {by} (required by the {stage}-input shuffle layer)")]
    ShuffleDivisibility {
        scale: usize,
        width: usize,
        by: usize,
        stage: usize,
    },
    #[error("additive fusion requires equal per-scale widths, got {0:?}")]
    AdditiveUnequalWidths(Vec<usize>),
    #[error("scale {scale}: width must be positive")]
    ZeroWidth { scale: usize },
    #[error("scale {scale}: stacking depth must be positive")]
    ZeroDepth { scale: usize },
    #[error("version {0:?} fixes depths {1:?}, config says {2:?}")]
    VersionDepthMismatch(Version, [usize; 4], [usize; 4]),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Preset stacking-depth profiles. Depths are per scale branch
/// (stride 4, 8, 16, 32); a branch reuses its depth in every stage it
/// appears in. V1 is the full profile, V2 the slimmest, V3 trades
/// high-resolution layers for low-resolution ones, V4 is V3 widened.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Version {
    V1,
    V2,
    V3,
    V4,
    Custom,
}

impl Version {
    pub fn depths(self) -> Option<[usize; 4]> {
        match self {
            Version::V1 => Some([4, 4, 4, 4]),
            Version::V2 => Some([2, 2, 2, 2]),
            Version::V3 => Some([2, 3, 5, 3]),
            Version::V4 => Some([2, 4, 6, 3]),
            Version::Custom => None,
        }
    }
}

/// How the scale branches exchange information at the two fusion points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Split channels, route one slice to every scale, concatenate.
    Shuffle,
    /// Resample every branch to every scale and sum (requires equal widths).
    Additive,
    /// No cross-scale exchange (ablation baseline).
    None,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    /// Channel width per scale branch (stride 4, 8, 16, 32).
    pub widths: [usize; 4],
    /// Stacking depth per scale branch.
    pub depths: [usize; 4],
    pub version: Version,
    pub fusion_mode: FusionMode,
    /// Hidden width of each prediction head.
    pub head_hidden: usize,
    /// Embedding head output channels.
    pub embed_dim: usize,
}

impl BackboneConfig {
    pub fn with_version(version: Version, width: usize, stem_channels: usize) -> Self {
        let depths = version.depths().unwrap_or([2, 2, 2, 2]);
        BackboneConfig {
            stem_channels,
            widths: [width; 4],
            depths,
            version,
            fusion_mode: FusionMode::Shuffle,
            head_hidden: width,
            embed_dim: 4,
        }
    }

    /// Small profile for tests: width 24 everywhere, V2 depths.
    pub fn toy() -> Self {
        Self::with_version(Version::V2, 24, 16)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (scale, &w) in self.widths.iter().enumerate() {
            if w == 0 {
                return Err(ConfigError::ZeroWidth { scale });
            }
        }
        for (scale, &d) in self.depths.iter().enumerate() {
            if d == 0 {
                return Err(ConfigError::ZeroDepth { scale });
            }
        }
        if let Some(fixed) = self.version.depths() {
            if fixed != self.depths {
                return Err(ConfigError::VersionDepthMismatch(
                    self.version,
                    fixed,
                    self.depths,
                ));
            }
        }
        match self.fusion_mode {
            FusionMode::Shuffle => {
                // First shuffle sees scales 0..2, second sees 0..3.
                for (stage, n) in [(2usize, 2usize), (3, 3)] {
                    for scale in 0..stage {
                        let width = self.channels_into_fusion(stage, scale);
                        if width % n != 0 {
                            return Err(ConfigError::ShuffleDivisibility {
                                scale,
                                width,
                                by: n,
                                stage: n,
                            });
                        }
                    }
                }
            }
            FusionMode::Additive => {
                if self.widths.iter().any(|&w| w != self.widths[0]) {
                    return Err(ConfigError::AdditiveUnequalWidths(self.widths.to_vec()));
                }
            }
            FusionMode::None => {}
        }
        Ok(())
    }

    /// Channel count of `scale`'s map entering the fusion point after
    /// stage `stage` (stages are counted by live branch count: 2 or 3).
    fn channels_into_fusion(&self, _stage: usize, scale: usize) -> usize {
        // Each stack ends at the configured width, so fusion always sees
        // configured widths regardless of what the previous fusion emitted.
        self.widths[scale]
    }

    /// Channel count of `scale`'s map right after the fusion point that
    /// follows the stage with `n` live branches.
    fn channels_out_of_fusion(&self, n: usize, _scale: usize) -> usize {
        match self.fusion_mode {
            FusionMode::Shuffle => self.widths[..n].iter().map(|w| w / n).sum(),
            FusionMode::Additive | FusionMode::None => self.widths[_scale],
        }
    }
}

#[derive(Debug, Clone)]
enum PlanItem {
    Conv {
        name: String,
        cin: usize,
        cout: usize,
        k: usize,
        norm: bool,
        /// Output spatial extents for MAC accounting.
        out_hw: (usize, usize),
    },
    Shuffle { name: String },
}

/// Flat layer list shared by parameter init and accounting; the order and
/// names mirror `forward`.
fn plan(cfg: &BackboneConfig, h: usize, w: usize) -> Vec<PlanItem> {
    let mut items = Vec::new();
    let conv = |items: &mut Vec<PlanItem>,
                name: String,
                cin: usize,
                cout: usize,
                k: usize,
                norm: bool,
                hw: (usize, usize)| {
        items.push(PlanItem::Conv {
            name,
            cin,
            cout,
            k,
            norm,
            out_hw: hw,
        });
    };
    let hw_at = |stride: usize| (h / stride, w / stride);

    conv(&mut items, "stem.0".into(), 3, cfg.stem_channels, 3, true, hw_at(2));
    conv(&mut items, "stem.1".into(), cfg.stem_channels, cfg.widths[0], 3, true, hw_at(4));

    // ch[j] tracks the live channel count of each branch.
    let mut ch = [0usize; 4];
    ch[0] = cfg.widths[0];
    for stage in 1..=4 {
        let scales = stage; // branches live during this stage
        if stage > 1 {
            // Open the new branch from the previous deepest one.
            let j = stage - 1;
            conv(
                &mut items,
                format!("down.{j}"),
                ch[j - 1],
                cfg.widths[j],
                3,
                true,
                hw_at(4 << j),
            );
            ch[j] = cfg.widths[j];
        }
        for j in 0..scales {
            for k in 0..cfg.depths[j] {
                let cin = if k == 0 { ch[j] } else { cfg.widths[j] };
                conv(
                    &mut items,
                    format!("s{stage}.b{j}.{k}"),
                    cin,
                    cfg.widths[j],
                    3,
                    true,
                    hw_at(4 << j),
                );
            }
            ch[j] = cfg.widths[j];
        }
        if (stage == 2 || stage == 3) && cfg.fusion_mode == FusionMode::Shuffle {
            items.push(PlanItem::Shuffle {
                name: format!("fuse{}.shuffle", stage - 1),
            });
            for (j, c) in ch.iter_mut().enumerate().take(scales) {
                *c = cfg.channels_out_of_fusion(scales, j);
            }
        }
    }

    let fused: usize = cfg.widths.iter().sum();
    for (head, out) in [
        ("cls", 1usize),
        ("dist", 1),
        ("orient", 2),
        ("embed", cfg.embed_dim),
    ] {
        conv(&mut items, format!("head.{head}.0"), fused, cfg.head_hidden, 3, true, hw_at(4));
        conv(&mut items, format!("head.{head}.1"), cfg.head_hidden, out, 1, false, hw_at(4));
    }
    items
}

fn gn_groups(c: usize) -> usize {
    // Largest power-of-two group count dividing C, capped at 8.
    let mut g = 8;
    while c % g != 0 {
        g /= 2;
    }
    g
}

/// Registers every backbone parameter. Conv weights are Kaiming-uniform,
/// biases zero, norm scales one.
pub fn init_backbone_params<S: Elem>(
    cfg: &BackboneConfig,
    store: &mut ParamStore<S>,
    seed: u64,
) -> Result<(), crate::params::ParamError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for item in plan(cfg, 32, 32) {
        if let PlanItem::Conv {
            name,
            cin,
            cout,
            k,
            norm,
            ..
        } = item
        {
            let fan_in = cin * k * k;
            store.add_kaiming(&format!("{name}.w"), &[cout, cin, k, k], fan_in, &mut rng)?;
            store.add_zeros(&format!("{name}.b"), &[cout])?;
            if norm {
                store.add_ones(&format!("{name}.g"), &[cout])?;
                store.add_zeros(&format!("{name}.beta"), &[cout])?;
            }
        }
    }
    Ok(())
}

/// Per-scale feature maps plus the stride-4 fusion of all scales.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    /// Maps at strides 4, 8, 16, 32.
    pub maps: [Var; 4],
    /// All scales upsampled to stride 4 and channel-concatenated.
    pub fused: Var,
}

/// On-tape head outputs at input resolution.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub cls_logits: Var,
    /// Sigmoid of `cls_logits`.
    pub cls: Var,
    pub dist_logits: Var,
    /// Sigmoid of `dist_logits`.
    pub dist: Var,
    /// Raw 2-channel orientation field (normalized outside the tape).
    pub orient: Var,
    pub embed: Var,
}

/// Plain-data head outputs for post-processing, row-major per channel.
#[derive(Debug, Clone)]
pub struct HeatmapSet {
    pub height: usize,
    pub width: usize,
    pub cls: Vec<f32>,
    pub dist: Vec<f32>,
    /// dx plane then dy plane; clamped to unit norm.
    pub orient: Vec<f32>,
    pub embed: Vec<f32>,
    pub embed_dim: usize,
}

impl HeadVars {
    /// Extracts the first batch element into plain buffers; orientation
    /// vectors with norm > 1 are scaled back onto the unit disc.
    pub fn to_heatmaps<S: Elem>(&self, tape: &Tape<S>) -> HeatmapSet {
        let shape = tape.shape(self.cls);
        let (h, w) = (shape[2], shape[3]);
        let n = h * w;
        let grab = |v: Var, count: usize| -> Vec<f32> {
            tape.values(v)[..count].iter().map(|x| x.to_f64() as f32).collect()
        };
        let mut orient = grab(self.orient, 2 * n);
        for i in 0..n {
            let (dx, dy) = (orient[i], orient[n + i]);
            let norm = (dx * dx + dy * dy).sqrt();
            if norm > 1.0 {
                orient[i] /= norm;
                orient[n + i] /= norm;
            }
        }
        let embed_dim = tape.shape(self.embed)[1];
        HeatmapSet {
            height: h,
            width: w,
            cls: grab(self.cls, n),
            dist: grab(self.dist, n),
            orient,
            embed: grab(self.embed, embed_dim * n),
            embed_dim,
        }
    }
}

/// Resamples `x` from its current spatial size to `target_h` rows by
/// composing power-of-two steps (the largest ratio in the network is 8).
fn resample_to<S: Elem>(
    tape: &mut Tape<S>,
    mut x: Var,
    target_h: usize,
    mode: ResampleMode,
) -> crate::tensor::Result<Var> {
    loop {
        let h = tape.shape(x)[2];
        if h == target_h {
            return Ok(x);
        }
        let factor = if target_h > h {
            if target_h / h >= 4 {
                ScaleFactor::Up4
            } else {
                ScaleFactor::Up2
            }
        } else if h / target_h >= 4 {
            ScaleFactor::Down4
        } else {
            ScaleFactor::Down2
        };
        x = tape.resample(x, factor, mode)?;
    }
}

/// Parameter-free cross-scale exchange: splits each input into
/// `feats.len()` channel slices, routes slice j of every input to scale j
/// (resampled), and concatenates in ascending input order. Downsampling is
/// always nearest; upsampling uses `up_mode`.
pub fn shuffle_layer<S: Elem>(
    tape: &mut Tape<S>,
    feats: &[Var],
    up_mode: ResampleMode,
) -> crate::tensor::Result<Vec<Var>> {
    let n = feats.len();
    if n == 1 {
        return Ok(feats.to_vec());
    }
    let mut parts = Vec::with_capacity(n);
    for &f in feats {
        parts.push(tape.split_channels(f, n)?);
    }
    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        let target_h = tape.shape(feats[j])[2];
        let mut slices = Vec::with_capacity(n);
        for p in &parts {
            let h = tape.shape(p[j])[2];
            let mode = if target_h > h { up_mode } else { ResampleMode::Nearest };
            slices.push(resample_to(tape, p[j], target_h, mode)?);
        }
        out.push(tape.concat_channels(&slices)?);
    }
    Ok(out)
}

/// HRNet-style baseline: every output scale is the sum of all branches
/// resampled to it. Requires equal channel counts.
fn additive_fusion<S: Elem>(
    tape: &mut Tape<S>,
    feats: &[Var],
    up_mode: ResampleMode,
) -> crate::tensor::Result<Vec<Var>> {
    let mut out = Vec::with_capacity(feats.len());
    for &fj in feats {
        let target_h = tape.shape(fj)[2];
        let mut acc = fj;
        for &fi in feats {
            if fi == fj {
                continue;
            }
            let h = tape.shape(fi)[2];
            let mode = if target_h > h { up_mode } else { ResampleMode::Nearest };
            let r = resample_to(tape, fi, target_h, mode)?;
            acc = tape.add(acc, r)?;
        }
        out.push(acc);
    }
    Ok(out)
}

/// The backbone proper. Holds only the validated config; weights live in a
/// [`ParamStore`] and are bound to a tape per forward pass.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    /// Upsampling mode inside fusion layers. Bilinear for training,
    /// nearest for the routing oracle.
    pub up_mode: ResampleMode,
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        Ok(Backbone {
            config,
            up_mode: ResampleMode::Bilinear,
        })
    }

    fn conv_unit<S: Elem>(
        &self,
        tape: &mut Tape<S>,
        bind: &Binding,
        name: &str,
        x: Var,
        stride: usize,
        k: usize,
        norm: bool,
        act: bool,
    ) -> crate::tensor::Result<Var> {
        let w = bind.var(&format!("{name}.w"));
        let b = bind.var(&format!("{name}.b"));
        let y = tape.conv2d(x, w, b, stride, (k - 1) / 2)?;
        let y = if norm {
            let g = bind.var(&format!("{name}.g"));
            let beta = bind.var(&format!("{name}.beta"));
            let groups = gn_groups(tape.shape(y)[1]);
            tape.group_norm(y, g, beta, groups, 1e-5)?
        } else {
            y
        };
        Ok(if act { tape.relu(y) } else { y })
    }

    fn stack<S: Elem>(
        &self,
        tape: &mut Tape<S>,
        bind: &Binding,
        stage: usize,
        scale: usize,
        mut x: Var,
    ) -> crate::tensor::Result<Var> {
        for k in 0..self.config.depths[scale] {
            x = self.conv_unit(tape, bind, &format!("s{stage}.b{scale}.{k}"), x, 1, 3, true, true)?;
        }
        Ok(x)
    }

    fn fuse<S: Elem>(
        &self,
        tape: &mut Tape<S>,
        feats: &[Var],
    ) -> crate::tensor::Result<Vec<Var>> {
        match self.config.fusion_mode {
            FusionMode::Shuffle => shuffle_layer(tape, feats, self.up_mode),
            FusionMode::Additive => additive_fusion(tape, feats, self.up_mode),
            FusionMode::None => Ok(feats.to_vec()),
        }
    }

    /// Runs the image through stem, branches and fusion. `image` is
    /// [B,3,H,W] with H, W divisible by 32.
    pub fn forward<S: Elem>(
        &self,
        tape: &mut Tape<S>,
        bind: &Binding,
        image: Var,
    ) -> crate::tensor::Result<FeaturePyramid> {
        let shape = tape.shape(image).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "backbone",
                detail: format!("expected [B,3,H,W], got {shape:?}"),
            });
        }
        if shape[2] % 32 != 0 || shape[3] % 32 != 0 {
            return Err(TensorError::Invalid(format!(
                "input extents {}x{} must be divisible by 32",
                shape[2], shape[3]
            )));
        }

        let x = self.conv_unit(tape, bind, "stem.0", image, 2, 3, true, true)?;
        let x = self.conv_unit(tape, bind, "stem.1", x, 2, 3, true, true)?;

        let mut feats: Vec<Var> = vec![x];
        for stage in 1..=4 {
            if stage > 1 {
                let j = stage - 1;
                let prev = feats[j - 1];
                let down = self.conv_unit(tape, bind, &format!("down.{j}"), prev, 2, 3, true, true)?;
                feats.push(down);
            }
            for (j, f) in feats.iter_mut().enumerate() {
                *f = self.stack(tape, bind, stage, j, *f)?;
            }
            if stage == 2 || stage == 3 {
                feats = self.fuse(tape, &feats)?;
            }
        }

        let target_h = tape.shape(feats[0])[2];
        let mut up = Vec::with_capacity(4);
        for &f in &feats {
            up.push(resample_to(tape, f, target_h, ResampleMode::Bilinear)?);
        }
        let fused = tape.concat_channels(&up)?;
        Ok(FeaturePyramid {
            maps: [feats[0], feats[1], feats[2], feats[3]],
            fused,
        })
    }

    /// Prediction heads on the fused stride-4 map; outputs are bilinearly
    /// upsampled to input resolution.
    pub fn heads<S: Elem>(
        &self,
        tape: &mut Tape<S>,
        bind: &Binding,
        fused: Var,
    ) -> crate::tensor::Result<HeadVars> {
        let run = |tape: &mut Tape<S>, head: &str| -> crate::tensor::Result<Var> {
            let h = self.conv_unit(tape, bind, &format!("head.{head}.0"), fused, 1, 3, true, true)?;
            let h = self.conv_unit(tape, bind, &format!("head.{head}.1"), h, 1, 1, false, false)?;
            let h = tape.resample(h, ScaleFactor::Up4, ResampleMode::Bilinear)?;
            Ok(h)
        };
        let cls_logits = run(tape, "cls")?;
        let cls = tape.sigmoid(cls_logits);
        let dist_logits = run(tape, "dist")?;
        let dist = tape.sigmoid(dist_logits);
        let orient = run(tape, "orient")?;
        let embed = run(tape, "embed")?;
        Ok(HeadVars {
            cls_logits,
            cls,
            dist_logits,
            dist,
            orient,
            embed,
        })
    }
}

/// One row of the architecture accounting table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerRow {
    pub name: String,
    pub params: usize,
    /// Multiply-accumulates for a single image at the given input size.
    pub macs: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchReport {
    pub input: (usize, usize),
    pub rows: Vec<LayerRow>,
    pub total_params: usize,
    pub total_macs: u64,
}

impl ArchReport {
    pub fn table(&self) -> String {
        let mut s = format!("{:<16} {:>12} {:>14}\n", "layer", "params", "macs");
        for r in &self.rows {
            s.push_str(&format!("{:<16} {:>12} {:>14}\n", r.name, r.params, r.macs));
        }
        s.push_str(&format!(
            "{:<16} {:>12} {:>14}\n",
            "total", self.total_params, self.total_macs
        ));
        s
    }
}

/// Analytic parameter and MAC accounting for a backbone at the given
/// input size. Fusion layers appear as explicit zero-parameter rows.
pub fn count_params_flops(cfg: &BackboneConfig, h: usize, w: usize) -> ArchReport {
    let mut rows = Vec::new();
    for item in plan(cfg, h, w) {
        match item {
            PlanItem::Conv {
                name,
                cin,
                cout,
                k,
                norm,
                out_hw,
                ..
            } => {
                let mut params = cout * cin * k * k + cout;
                if norm {
                    params += 2 * cout;
                }
                let macs = (cout * cin * k * k) as u64 * (out_hw.0 * out_hw.1) as u64;
                rows.push(LayerRow { name, params, macs });
            }
            PlanItem::Shuffle { name } => rows.push(LayerRow {
                name,
                params: 0,
                macs: 0,
            }),
        }
    }
    let total_params = rows.iter().map(|r| r.params).sum();
    let total_macs = rows.iter().map(|r| r.macs).sum();
    ArchReport {
        input: (h, w),
        rows,
        total_params,
        total_macs,
    }
}
