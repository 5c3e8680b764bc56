//! Contour refinement: sampled point tokens through two small transformer
//! encoders. Module 1 turns N contour tokens into per-point offsets whose
//! displaced polyline is resampled to a C-point center line; module 2
//! attends over contour + center tokens and emits a final offset per
//! contour vertex.
//!
//! Both offset decoders have zero-initialized output layers, so an
//! untrained refiner reproduces its input contour exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::HeadVars;
use crate::geometry::{apply_offsets, Point, Polyline};
use crate::params::{Binding, ParamStore};
use crate::tensor::{AttentionWeights, Elem, Tape, TensorError, TransformerWeights, Var};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefinerConfig {
    /// Contour sample points per instance.
    pub n_contour: usize,
    /// Center-line points per instance.
    pub c_center: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Encoder transformer blocks per module.
    pub depth: usize,
    pub mlp_hidden: usize,
    /// Sinusoidal frequencies per coordinate; 0 disables the positional
    /// encoding. Encoded width is 4 * this.
    pub pe_frequencies: usize,
    /// Channel count of the fused backbone map the tokens sample.
    pub feature_channels: usize,
    /// Embedding head channels.
    pub embed_dim: usize,
}

impl RefinerConfig {
    pub fn toy(feature_channels: usize, embed_dim: usize) -> Self {
        RefinerConfig {
            n_contour: 20,
            c_center: 10,
            d_model: 64,
            heads: 4,
            depth: 3,
            mlp_hidden: 128,
            pe_frequencies: 4,
            feature_channels,
            embed_dim,
        }
    }

    /// Sampled feature width per token before projection:
    /// backbone features + (cls, dist, 2x orient, embedding) + positional
    /// encoding + 2-way kind tag.
    pub fn token_dim(&self) -> usize {
        self.feature_channels + 4 + self.embed_dim + 4 * self.pe_frequencies + 2
    }
}

/// Registers both modules' parameters. Decoder output layers start at
/// zero so the refiner is the identity until trained.
pub fn init_refiner_params<S: Elem>(
    cfg: &RefinerConfig,
    store: &mut ParamStore<S>,
    seed: u64,
) -> Result<(), crate::params::ParamError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.d_model;
    for m in ["m1", "m2"] {
        store.add_kaiming(
            &format!("ref.{m}.proj.w"),
            &[cfg.token_dim(), d],
            cfg.token_dim(),
            &mut rng,
        )?;
        store.add_zeros(&format!("ref.{m}.proj.b"), &[d])?;
        for t in 0..cfg.depth {
            for p in ["wq", "wk", "wv", "wo"] {
                store.add_kaiming(&format!("ref.{m}.t{t}.{p}"), &[d, d], d, &mut rng)?;
            }
            for p in ["bq", "bk", "bv", "bo"] {
                store.add_zeros(&format!("ref.{m}.t{t}.{p}"), &[d])?;
            }
            for p in ["ln1.g", "ln2.g"] {
                store.add_ones(&format!("ref.{m}.t{t}.{p}"), &[d])?;
            }
            for p in ["ln1.b", "ln2.b"] {
                store.add_zeros(&format!("ref.{m}.t{t}.{p}"), &[d])?;
            }
            store.add_kaiming(
                &format!("ref.{m}.t{t}.mlp.w1"),
                &[d, cfg.mlp_hidden],
                d,
                &mut rng,
            )?;
            store.add_zeros(&format!("ref.{m}.t{t}.mlp.b1"), &[cfg.mlp_hidden])?;
            store.add_kaiming(
                &format!("ref.{m}.t{t}.mlp.w2"),
                &[cfg.mlp_hidden, d],
                cfg.mlp_hidden,
                &mut rng,
            )?;
            store.add_zeros(&format!("ref.{m}.t{t}.mlp.b2"), &[d])?;
        }
        store.add_kaiming(&format!("ref.{m}.dec.w1"), &[d, cfg.mlp_hidden], d, &mut rng)?;
        store.add_zeros(&format!("ref.{m}.dec.b1"), &[cfg.mlp_hidden])?;
        // Zero output layer: offsets start at exactly zero.
        store.add_zeros(&format!("ref.{m}.dec.w2"), &[cfg.mlp_hidden, 2])?;
        store.add_zeros(&format!("ref.{m}.dec.b2"), &[2])?;
    }
    Ok(())
}

fn block_weights(bind: &Binding, m: &str, t: usize) -> TransformerWeights {
    let v = |suffix: &str| bind.var(&format!("ref.{m}.t{t}.{suffix}"));
    TransformerWeights {
        attn: AttentionWeights {
            wq: v("wq"),
            bq: v("bq"),
            wk: v("wk"),
            bk: v("bk"),
            wv: v("wv"),
            bv: v("bv"),
            wo: v("wo"),
            bo: v("bo"),
        },
        ln1_gamma: v("ln1.g"),
        ln1_beta: v("ln1.b"),
        ln2_gamma: v("ln2.g"),
        ln2_beta: v("ln2.b"),
        mlp_w1: v("mlp.w1"),
        mlp_b1: v("mlp.b1"),
        mlp_w2: v("mlp.w2"),
        mlp_b2: v("mlp.b2"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointKind {
    Contour,
    Center,
}

/// One refined instance, with the on-tape coordinate tensors kept around
/// for the training losses.
#[derive(Debug, Clone)]
pub struct RefineOutput {
    /// Predicted center line, [C,2] on tape (x, y per row).
    pub center_var: Var,
    pub center: Polyline,
    /// Refined contour, [N,2] on tape.
    pub refined_var: Var,
    pub refined: Vec<Point>,
    /// True when the displaced polyline collapsed and the center line fell
    /// back to the centroid.
    pub center_fallback: bool,
}

#[derive(Debug, Clone)]
pub struct Refiner {
    pub config: RefinerConfig,
}

impl Refiner {
    pub fn new(config: RefinerConfig) -> Result<Self, TensorError> {
        if config.d_model % config.heads != 0 {
            return Err(TensorError::NotDivisible {
                op: "refiner",
                dim: "d_model",
                value: config.d_model,
                by: config.heads,
            });
        }
        Ok(Refiner { config })
    }

    /// Builds projected tokens for `points` (image pixel coordinates).
    /// `fused` is the [1,Cf,H/4,W/4] backbone map; head maps are at full
    /// resolution. Gradient flows into the maps, not the coordinates.
    fn tokens<S: Elem>(
        &self,
        tape: &mut Tape<S>,
        bind: &Binding,
        module: &str,
        fused: Var,
        heads: &HeadVars,
        image_hw: (usize, usize),
        points: &[Point],
        kind: PointKind,
    ) -> crate::tensor::Result<Var> {
        let t = points.len();
        let fshape = tape.shape(fused).to_vec();
        let fused3 = tape.reshape(fused, &[fshape[1], fshape[2], fshape[3]])?;
        // The fused map lives at stride 4.
        let pts4: Vec<(f64, f64)> = points.iter().map(|p| (p.x / 4.0, p.y / 4.0)).collect();
        let pts1: Vec<(f64, f64)> = points.iter().map(|p| (p.x, p.y)).collect();
        let feat = tape.gather_bilinear(fused3, &pts4)?;

        let mut parts: Vec<Var> = vec![feat];
        for &head in &[heads.cls, heads.dist, heads.orient, heads.embed] {
            let s = tape.shape(head).to_vec();
            let map3 = tape.reshape(head, &[s[1], s[2], s[3]])?;
            parts.push(tape.gather_bilinear(map3, &pts1)?);
        }

        let (h, w) = image_hw;
        if self.config.pe_frequencies > 0 {
            let mut pe = Vec::with_capacity(t * 4 * self.config.pe_frequencies);
            for p in points {
                let (nx, ny) = (p.x / w as f64, p.y / h as f64);
                for f in 0..self.config.pe_frequencies {
                    let freq = std::f64::consts::PI * (1 << f) as f64;
                    pe.push(S::from_f64((freq * nx).sin()));
                    pe.push(S::from_f64((freq * nx).cos()));
                    pe.push(S::from_f64((freq * ny).sin()));
                    pe.push(S::from_f64((freq * ny).cos()));
                }
            }
            parts.push(tape.constant(&[t, 4 * self.config.pe_frequencies], pe));
        }

        let tag = match kind {
            PointKind::Contour => [S::ONE, S::ZERO],
            PointKind::Center => [S::ZERO, S::ONE],
        };
        let tags: Vec<S> = (0..t).flat_map(|_| tag).collect();
        parts.push(tape.constant(&[t, 2], tags));

        let joined = concat_last(tape, &parts)?;
        let proj_w = bind.var(&format!("ref.{module}.proj.w"));
        let proj_b = bind.var(&format!("ref.{module}.proj.b"));
        let projected = tape.linear(joined, proj_w, Some(proj_b))?;
        tape.reshape(projected, &[1, t, self.config.d_model])
    }

    fn encode<S: Elem>(
        &self,
        tape: &mut Tape<S>,
        bind: &Binding,
        module: &str,
        mut tokens: Var,
    ) -> crate::tensor::Result<Var> {
        for t in 0..self.config.depth {
            let w = block_weights(bind, module, t);
            tokens = tape.transformer_block(tokens, self.config.heads, &w)?;
        }
        Ok(tokens)
    }

    /// Per-token offset decoder; output rows are (dx, dy) in pixels.
    fn decode<S: Elem>(
        &self,
        tape: &mut Tape<S>,
        bind: &Binding,
        module: &str,
        tokens: Var,
    ) -> crate::tensor::Result<Var> {
        let t = tape.shape(tokens)[1];
        let w1 = bind.var(&format!("ref.{module}.dec.w1"));
        let b1 = bind.var(&format!("ref.{module}.dec.b1"));
        let w2 = bind.var(&format!("ref.{module}.dec.w2"));
        let b2 = bind.var(&format!("ref.{module}.dec.b2"));
        let h = tape.linear(tokens, w1, Some(b1))?;
        let h = tape.relu(h);
        let off = tape.linear(h, w2, Some(b2))?;
        tape.reshape(off, &[t, 2])
    }

    /// Full per-instance pass: contour tokens → center line → joint
    /// encoding → refined contour. `rough` must have exactly `n_contour`
    /// points (arc-length samples of the rough polygon).
    pub fn forward<S: Elem>(
        &self,
        tape: &mut Tape<S>,
        bind: &Binding,
        fused: Var,
        heads: &HeadVars,
        image_hw: (usize, usize),
        rough: &[Point],
    ) -> crate::tensor::Result<RefineOutput> {
        let n = self.config.n_contour;
        let c = self.config.c_center;
        if rough.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "refiner",
                detail: format!("expected {n} contour points, got {}", rough.len()),
            });
        }
        let rough_flat: Vec<S> = rough
            .iter()
            .flat_map(|p| [S::from_f64(p.x), S::from_f64(p.y)])
            .collect();
        let rough_var = tape.constant(&[n, 2], rough_flat);

        // Module 1: contour tokens → displaced polyline → center line.
        let tok1 = self.tokens(tape, bind, "m1", fused, heads, image_hw, rough, PointKind::Contour)?;
        let enc1 = self.encode(tape, bind, "m1", tok1)?;
        let off1 = self.decode(tape, bind, "m1", enc1)?;
        let displaced = tape.add(rough_var, off1)?;
        let disp_pts: Vec<Point> = tape
            .values(displaced)
            .chunks_exact(2)
            .map(|xy| Point::new(xy[0].to_f64(), xy[1].to_f64()))
            .collect();
        let (matrix, center_fallback) = resample_matrix(&disp_pts, c);
        let mvals: Vec<S> = matrix.iter().map(|&x| S::from_f64(x)).collect();
        let mvar = tape.constant(&[c, n], mvals);
        let center_var = tape.matmul(mvar, displaced)?;
        let center_pts: Vec<Point> = tape
            .values(center_var)
            .chunks_exact(2)
            .map(|xy| Point::new(xy[0].to_f64(), xy[1].to_f64()))
            .collect();

        // Module 2: contour + center tokens, decode contour rows only.
        let ctok = self.tokens(tape, bind, "m2", fused, heads, image_hw, rough, PointKind::Contour)?;
        let ktok = self.tokens(
            tape,
            bind,
            "m2",
            fused,
            heads,
            image_hw,
            &center_pts,
            PointKind::Center,
        )?;
        let joint = concat_tokens(tape, ctok, ktok)?;
        let enc2 = self.encode(tape, bind, "m2", joint)?;
        let enc2_4d = {
            let d = self.config.d_model;
            tape.reshape(enc2, &[1, n + c, d, 1])?
        };
        let contour_rows = tape.slice_channels(enc2_4d, 0, n)?;
        let contour_tokens = tape.reshape(contour_rows, &[1, n, self.config.d_model])?;
        let off2 = self.decode(tape, bind, "m2", contour_tokens)?;
        let refined_var = tape.add(rough_var, off2)?;

        let offsets: Vec<(f64, f64)> = tape
            .values(off2)
            .chunks_exact(2)
            .map(|xy| (xy[0].to_f64(), xy[1].to_f64()))
            .collect();
        let refined = apply_offsets(rough, &offsets, image_hw.1, image_hw.0)
            .expect("offset count matches by construction");

        Ok(RefineOutput {
            center_var,
            center: Polyline {
                points: center_pts,
            },
            refined_var,
            refined,
            center_fallback,
        })
    }

    /// Training loss for one instance: SmoothL1 on the center line plus
    /// SmoothL1 on the refined contour, coordinates normalized by the
    /// larger image extent. Targets must already be aligned (canonical
    /// start, matching counts).
    pub fn loss<S: Elem>(
        &self,
        tape: &mut Tape<S>,
        out: &RefineOutput,
        gt_center: &Polyline,
        gt_contour: &[Point],
        image_hw: (usize, usize),
    ) -> crate::tensor::Result<Var> {
        let n = self.config.n_contour;
        let c = self.config.c_center;
        if gt_center.points.len() != c || gt_contour.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "refine_loss",
                detail: format!(
                    "targets {}x{} vs configured {c}x{n}",
                    gt_center.points.len(),
                    gt_contour.len()
                ),
            });
        }
        let scale = S::from_f64(1.0 / image_hw.0.max(image_hw.1) as f64);
        let flat = |pts: &[Point]| -> Vec<S> {
            pts.iter()
                .flat_map(|p| [S::from_f64(p.x), S::from_f64(p.y)])
                .collect()
        };
        let gt_c = tape.constant(&[c, 2], flat(&gt_center.points));
        let gt_n = tape.constant(&[n, 2], flat(gt_contour));
        let pc = tape.scale(out.center_var, scale);
        let gc = tape.scale(gt_c, scale);
        let pr = tape.scale(out.refined_var, scale);
        let gr = tape.scale(gt_n, scale);
        let lc = tape.smooth_l1(pc, gc)?;
        let lr = tape.smooth_l1(pr, gr)?;
        tape.add(lc, lr)
    }
}

/// Row-interpolation matrix that arc-length resamples an open T-point
/// polyline to `c` points (endpoints included). Each row holds the convex
/// weights of the two bracketing input points; the segment parameters are
/// treated as constants, so gradients flow through the point positions
/// only. A collapsed polyline falls back to uniform averaging (centroid),
/// flagged by the second return.
fn resample_matrix(pts: &[Point], c: usize) -> (Vec<f64>, bool) {
    let t = pts.len();
    let mut cum = vec![0.0; t];
    for i in 1..t {
        cum[i] = cum[i - 1] + pts[i - 1].dist(pts[i]);
    }
    let total = cum[t - 1];
    let mut m = vec![0.0; c * t];
    if total <= 1e-12 {
        for row in 0..c {
            for col in 0..t {
                m[row * t + col] = 1.0 / t as f64;
            }
        }
        return (m, true);
    }
    for row in 0..c {
        let target = total * row as f64 / (c - 1) as f64;
        let mut i = match cum.binary_search_by(|x| x.partial_cmp(&target).unwrap()) {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        };
        if i >= t - 1 {
            i = t - 2;
        }
        let seg = cum[i + 1] - cum[i];
        let frac = if seg > 1e-12 { (target - cum[i]) / seg } else { 0.0 };
        m[row * t + i] = 1.0 - frac;
        m[row * t + i + 1] = frac;
    }
    (m, false)
}

/// Concatenates 2-D [T, Di] tensors along the last axis into [T, ΣDi].
fn concat_last<S: Elem>(tape: &mut Tape<S>, parts: &[Var]) -> crate::tensor::Result<Var> {
    let t = tape.shape(parts[0])[0];
    let mut as_maps = Vec::with_capacity(parts.len());
    for &p in parts {
        let d = tape.shape(p)[1];
        let tr = tape.permute(p, &[1, 0])?;
        as_maps.push(tape.reshape(tr, &[1, d, t, 1])?);
    }
    let cat = tape.concat_channels(&as_maps)?;
    let total = tape.shape(cat)[1];
    let back = tape.permute(cat, &[0, 2, 1, 3])?;
    tape.reshape(back, &[t, total])
}

/// Concatenates two token sequences [1,Ta,D] and [1,Tb,D] along the token
/// axis.
fn concat_tokens<S: Elem>(tape: &mut Tape<S>, a: Var, b: Var) -> crate::tensor::Result<Var> {
    let (ta, d) = (tape.shape(a)[1], tape.shape(a)[2]);
    let tb = tape.shape(b)[1];
    let a4 = tape.reshape(a, &[1, ta, d, 1])?;
    let b4 = tape.reshape(b, &[1, tb, d, 1])?;
    let cat = tape.concat_channels(&[a4, b4])?;
    tape.reshape(cat, &[1, ta + tb, d])
}
