//! Group and layer normalization.

use super::{Elem, Op, Result, Tape, TensorError, Var};

impl<S: Elem> Tape<S> {
    /// Group normalization over [B,C,H,W]; gamma/beta are per-channel.
    pub fn group_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        eps: f64,
    ) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "group_norm",
                detail: format!("expected [B,C,H,W], got {shape:?}"),
            });
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if groups == 0 || c % groups != 0 {
            return Err(TensorError::NotDivisible {
                op: "group_norm",
                dim: "channels",
                value: c,
                by: groups,
            });
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "group_norm",
                detail: format!(
                    "gamma {:?} / beta {:?} on {c} channels",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            });
        }
        let cg = c / groups;
        let glen = cg * h * w;
        let vals = self.values(input);
        let gv = self.values(gamma).to_vec();
        let bv = self.values(beta).to_vec();
        let mut out = vec![S::ZERO; vals.len()];
        for bi in 0..b {
            for gi in 0..groups {
                let base = (bi * c + gi * cg) * h * w;
                let xs = &vals[base..base + glen];
                let (mean, istd) = moments(xs, eps);
                for lc in 0..cg {
                    let ch = gi * cg + lc;
                    let scale = gv[ch] * istd;
                    let shift = bv[ch];
                    for i in 0..h * w {
                        let off = lc * h * w + i;
                        out[base + off] = (xs[off] - mean) * scale + shift;
                    }
                }
            }
        }
        Ok(self.push(
            shape,
            out,
            Op::GroupNorm {
                input: input.0,
                gamma: gamma.0,
                beta: beta.0,
                groups,
                eps,
            },
        ))
    }

    /// Layer normalization over the last axis; gamma/beta are [D].
    pub fn layer_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                detail: format!("gamma/beta must be [{d}]"),
            });
        }
        let vals = self.values(input);
        let gv = self.values(gamma).to_vec();
        let bv = self.values(beta).to_vec();
        let mut out = vec![S::ZERO; vals.len()];
        for (row, orow) in vals.chunks(d).zip(out.chunks_mut(d)) {
            let (mean, istd) = moments(row, eps);
            for ((o, &x), (&g, &b)) in orow
                .iter_mut()
                .zip(row.iter())
                .zip(gv.iter().zip(bv.iter()))
            {
                *o = (x - mean) * istd * g + b;
            }
        }
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                input: input.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
        ))
    }
}

fn moments<S: Elem>(xs: &[S], eps: f64) -> (S, S) {
    let n = S::from_f64(xs.len() as f64);
    let mut sum = S::ZERO;
    for &x in xs {
        sum += x;
    }
    let mean = sum / n;
    let mut var = S::ZERO;
    for &x in xs {
        let d = x - mean;
        var += d * d;
    }
    var = var / n;
    let istd = S::ONE / (var + S::from_f64(eps)).sqrt_e();
    (mean, istd)
}

/// Shared normalization backward over one group of `xs` with upstream
/// grads `gs` already multiplied by gamma. Writes dx into `dxs`.
fn norm_group_backward<S: Elem>(xs: &[S], dys: &[S], eps: f64, dxs: &mut [S]) {
    let n = xs.len();
    let nf = S::from_f64(n as f64);
    let (mean, istd) = moments(xs, eps);
    let mut sum_dy = S::ZERO;
    let mut sum_dy_xhat = S::ZERO;
    for (&x, &dy) in xs.iter().zip(dys.iter()) {
        let xhat = (x - mean) * istd;
        sum_dy += dy;
        sum_dy_xhat += dy * xhat;
    }
    for ((dx, &x), &dy) in dxs.iter_mut().zip(xs.iter()).zip(dys.iter()) {
        let xhat = (x - mean) * istd;
        *dx += istd / nf * (dy * nf - sum_dy - xhat * sum_dy_xhat);
    }
}

pub(crate) fn group_norm_backward<S: Elem>(
    t: &mut Tape<S>,
    id: usize,
    input: usize,
    gamma: usize,
    beta: usize,
    groups: usize,
    eps: f64,
) {
    let shape = t.nodes[input].shape.clone();
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let cg = c / groups;
    let glen = cg * h * w;
    let g = t.nodes[id].grad.clone().unwrap();
    let gv = t.nodes[gamma].values.clone();
    let xs_all = t.nodes[input].values.clone();

    if t.nodes[gamma].grad.is_some() || t.nodes[beta].grad.is_some() {
        let mut dgamma = vec![S::ZERO; c];
        let mut dbeta = vec![S::ZERO; c];
        for bi in 0..b {
            for gi in 0..groups {
                let base = (bi * c + gi * cg) * h * w;
                let xs = &xs_all[base..base + glen];
                let (mean, istd) = moments(xs, eps);
                for lc in 0..cg {
                    let ch = gi * cg + lc;
                    for i in 0..h * w {
                        let off = lc * h * w + i;
                        let xhat = (xs[off] - mean) * istd;
                        dgamma[ch] += g[base + off] * xhat;
                        dbeta[ch] += g[base + off];
                    }
                }
            }
        }
        t.accumulate(gamma, &dgamma);
        t.accumulate(beta, &dbeta);
    }
    if t.nodes[input].grad.is_some() {
        let mut din = vec![S::ZERO; xs_all.len()];
        let mut dys = vec![S::ZERO; glen];
        for bi in 0..b {
            for gi in 0..groups {
                let base = (bi * c + gi * cg) * h * w;
                for lc in 0..cg {
                    let ch = gi * cg + lc;
                    for i in 0..h * w {
                        let off = lc * h * w + i;
                        dys[off] = g[base + off] * gv[ch];
                    }
                }
                norm_group_backward(
                    &xs_all[base..base + glen],
                    &dys,
                    eps,
                    &mut din[base..base + glen],
                );
            }
        }
        t.accumulate(input, &din);
    }
}

pub(crate) fn layer_norm_backward<S: Elem>(
    t: &mut Tape<S>,
    id: usize,
    input: usize,
    gamma: usize,
    beta: usize,
    eps: f64,
) {
    let d = *t.nodes[input].shape.last().unwrap();
    let g = t.nodes[id].grad.clone().unwrap();
    let gv = t.nodes[gamma].values.clone();
    let xs_all = t.nodes[input].values.clone();

    if t.nodes[gamma].grad.is_some() || t.nodes[beta].grad.is_some() {
        let mut dgamma = vec![S::ZERO; d];
        let mut dbeta = vec![S::ZERO; d];
        for (row, grow) in xs_all.chunks(d).zip(g.chunks(d)) {
            let (mean, istd) = moments(row, eps);
            for i in 0..d {
                let xhat = (row[i] - mean) * istd;
                dgamma[i] += grow[i] * xhat;
                dbeta[i] += grow[i];
            }
        }
        t.accumulate(gamma, &dgamma);
        t.accumulate(beta, &dbeta);
    }
    if t.nodes[input].grad.is_some() {
        let mut din = vec![S::ZERO; xs_all.len()];
        let mut dys = vec![S::ZERO; d];
        for ((row, grow), drow) in xs_all.chunks(d).zip(g.chunks(d)).zip(din.chunks_mut(d)) {
            for i in 0..d {
                dys[i] = grow[i] * gv[i];
            }
            norm_group_backward(row, &dys, eps, drow);
        }
        t.accumulate(input, &din);
    }
}
