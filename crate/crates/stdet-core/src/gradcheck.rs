//! Gradient-check battery: every differentiable building block compared
//! against central differences on small random tensors.

use serde::Serialize;

use crate::backbone::shuffle_layer;
use crate::tensor::{
    grad_check_subset, AttentionWeights, GradCheckReport, ResampleMode, ScaleFactor, Tape,
    TensorError, TransformerWeights, Var,
};

/// Single ops must agree with central differences this closely;
/// multi-layer composites accumulate more rounding and get a looser bound.
pub const OP_BOUND: f64 = 1e-4;
pub const COMPOSITE_BOUND: f64 = 1e-3;

#[derive(Debug, Serialize)]
pub struct OpResult {
    pub op: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub bound: f64,
    pub pass: bool,
}

fn det_values(len: usize, scale: f64, offset: u64) -> Vec<f64> {
    // Cheap deterministic pseudo-values, spread over [-scale, scale].
    (0..len)
        .map(|i| {
            let mut x = (i as u64).wrapping_add(offset).wrapping_mul(0x9E3779B97F4A7C15);
            x ^= x >> 31;
            scale * (2.0 * (x % 10_000) as f64 / 10_000.0 - 1.0)
        })
        .collect()
}

fn input(shape: &[usize], scale: f64, offset: u64) -> (Vec<usize>, Vec<f64>) {
    let len = shape.iter().product();
    (shape.to_vec(), det_values(len, scale, offset))
}

type CheckFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>>;
type Case = (&'static str, f64, Vec<(Vec<usize>, Vec<f64>)>, CheckFn);

fn battery() -> Vec<Case> {
    let mut ops: Vec<Case> = Vec::new();

    ops.push((
        "conv2d",
        OP_BOUND,
        vec![
            input(&[1, 3, 6, 6], 1.0, 1),
            input(&[4, 3, 3, 3], 0.5, 2),
            input(&[4], 0.2, 3),
        ],
        Box::new(|t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 1, 1)?;
            Ok(t.mean(y))
        }),
    ));
    ops.push((
        "conv2d_stride2",
        OP_BOUND,
        vec![
            input(&[1, 2, 8, 8], 1.0, 4),
            input(&[3, 2, 3, 3], 0.5, 5),
            input(&[3], 0.2, 6),
        ],
        Box::new(|t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 2, 1)?;
            let y = t.sigmoid(y);
            Ok(t.mean(y))
        }),
    ));
    ops.push((
        "group_norm",
        OP_BOUND,
        vec![
            input(&[2, 4, 5, 5], 1.5, 7),
            input(&[4], 0.5, 8),
            input(&[4], 0.3, 9),
        ],
        Box::new(|t, v| {
            let y = t.group_norm(v[0], v[1], v[2], 2, 1e-5)?;
            let y = t.mul(y, y)?;
            Ok(t.mean(y))
        }),
    ));
    ops.push((
        "layer_norm",
        OP_BOUND,
        vec![
            input(&[2, 3, 8], 1.0, 10),
            input(&[8], 0.5, 11),
            input(&[8], 0.3, 12),
        ],
        Box::new(|t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-6)?;
            let y = t.mul(y, y)?;
            Ok(t.mean(y))
        }),
    ));
    ops.push((
        "mhsa",
        COMPOSITE_BOUND,
        vec![
            input(&[1, 5, 8], 0.8, 13),
            input(&[8, 8], 0.4, 14),
            input(&[8], 0.1, 15),
            input(&[8, 8], 0.4, 16),
            input(&[8], 0.1, 17),
            input(&[8, 8], 0.4, 18),
            input(&[8], 0.1, 19),
            input(&[8, 8], 0.4, 20),
            input(&[8], 0.1, 21),
        ],
        Box::new(|t, v| {
            let w = AttentionWeights {
                wq: v[1],
                bq: v[2],
                wk: v[3],
                bk: v[4],
                wv: v[5],
                bv: v[6],
                wo: v[7],
                bo: v[8],
            };
            let y = t.mhsa(v[0], 2, &w)?;
            Ok(t.mean(y))
        }),
    ));
    ops.push((
        "transformer_block",
        COMPOSITE_BOUND,
        vec![
            input(&[1, 4, 8], 0.8, 22),
            input(&[8, 8], 0.3, 23),
            input(&[8], 0.1, 24),
            input(&[8, 8], 0.3, 25),
            input(&[8], 0.1, 26),
            input(&[8, 8], 0.3, 27),
            input(&[8], 0.1, 28),
            input(&[8, 8], 0.3, 29),
            input(&[8], 0.1, 30),
            input(&[8], 0.5, 31),
            input(&[8], 0.2, 32),
            input(&[8], 0.5, 33),
            input(&[8], 0.2, 34),
            input(&[8, 16], 0.3, 35),
            input(&[16], 0.1, 36),
            input(&[16, 8], 0.3, 37),
            input(&[8], 0.1, 38),
        ],
        Box::new(|t, v| {
            let w = TransformerWeights {
                attn: AttentionWeights {
                    wq: v[1],
                    bq: v[2],
                    wk: v[3],
                    bk: v[4],
                    wv: v[5],
                    bv: v[6],
                    wo: v[7],
                    bo: v[8],
                },
                ln1_gamma: v[9],
                ln1_beta: v[10],
                ln2_gamma: v[11],
                ln2_beta: v[12],
                mlp_w1: v[13],
                mlp_b1: v[14],
                mlp_w2: v[15],
                mlp_b2: v[16],
            };
            let y = t.transformer_block(v[0], 2, &w)?;
            let y = t.mul(y, y)?;
            Ok(t.mean(y))
        }),
    ));
    ops.push((
        "resample_bilinear",
        COMPOSITE_BOUND,
        vec![input(&[1, 2, 4, 4], 1.0, 39)],
        Box::new(|t, v| {
            let up = t.resample(v[0], ScaleFactor::Up2, ResampleMode::Bilinear)?;
            let down = t.resample(up, ScaleFactor::Down2, ResampleMode::Nearest)?;
            let y = t.mul(down, down)?;
            Ok(t.mean(y))
        }),
    ));
    ops.push((
        "gather_bilinear",
        OP_BOUND,
        vec![input(&[2, 5, 5], 1.0, 40)],
        Box::new(|t, v| {
            let pts = [(0.3, 0.7), (2.5, 2.5), (4.9, 0.1), (1.25, 3.75)];
            let y = t.gather_bilinear(v[0], &pts)?;
            let y = t.mul(y, y)?;
            Ok(t.mean(y))
        }),
    ));
    ops.push((
        "shuffle_fuse",
        COMPOSITE_BOUND,
        vec![input(&[1, 4, 8, 8], 1.0, 41), input(&[1, 4, 4, 4], 1.0, 42)],
        Box::new(|t, v| {
            let shuffled = shuffle_layer(t, &[v[0], v[1]], ResampleMode::Bilinear)?;
            let mut acc = None;
            for s in shuffled {
                let m = t.mean(s);
                acc = Some(match acc {
                    Some(a) => t.add(a, m)?,
                    None => m,
                });
            }
            Ok(acc.expect("two scales"))
        }),
    ));
    ops.push((
        "bce_with_logits",
        OP_BOUND,
        vec![input(&[1, 1, 4, 4], 2.0, 43)],
        Box::new(|t, v| {
            let targets: Vec<f64> = (0..16).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
            let tv = t.constant(&[1, 1, 4, 4], targets);
            t.bce_with_logits(v[0], tv)
        }),
    ));
    ops.push((
        "smooth_l1",
        OP_BOUND,
        vec![input(&[6, 2], 2.0, 44)],
        Box::new(|t, v| {
            let target = t.constant(&[6, 2], det_values(12, 1.5, 45));
            t.smooth_l1(v[0], target)
        }),
    ));
    ops.push((
        "softmax_matmul",
        COMPOSITE_BOUND,
        vec![input(&[3, 4], 1.0, 46), input(&[4, 3], 1.0, 47)],
        Box::new(|t, v| {
            let y = t.matmul(v[0], v[1])?;
            let s = t.softmax_last(y);
            let sq = t.mul(s, s)?;
            Ok(t.mean(sq))
        }),
    ));

    ops
}

pub fn run(epsilon: f64) -> Result<Vec<OpResult>, TensorError> {
    let mut results = Vec::new();
    for (name, bound, inputs, f) in battery() {
        let report: GradCheckReport = grad_check_subset(&inputs, epsilon, 64, f)?;
        results.push(OpResult {
            op: name.to_string(),
            checked: report.checked,
            max_rel_err: report.max_rel_err,
            bound,
            pass: report.max_rel_err < bound && report.nan_encounters == 0,
        });
    }
    Ok(results)
}

pub fn print_table(results: &[OpResult]) {
    println!("{:<20} {:>8} {:>14}  status", "op", "checked", "max rel err");
    for r in results {
        println!(
            "{:<20} {:>8} {:>14.3e}  {}",
            r.op,
            r.checked,
            r.max_rel_err,
            if r.pass { "ok" } else { "FAIL" }
        );
    }
}

/// Names of the ops whose check failed, empty when everything passed.
pub fn failures(results: &[OpResult]) -> Vec<String> {
    results
        .iter()
        .filter(|r| !r.pass)
        .map(|r| r.op.clone())
        .collect()
}
