//! Multi-head self-attention and the pre-norm transformer block, composed
//! from primitive tape ops so every path is covered by the gradient checker.

use super::{Elem, Result, Tape, TensorError, Var};

/// Projection weights for one attention block. All matrices are [D,D],
/// biases [D].
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Pre-norm transformer block: x + attn(ln1(x)), then y + mlp(ln2(y)).
#[derive(Debug, Clone, Copy)]
pub struct TransformerWeights {
    pub attn: AttentionWeights,
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
}

impl<S: Elem> Tape<S> {
    /// Scaled dot-product multi-head self-attention over tokens [B,T,D].
    pub fn mhsa(&mut self, tokens: Var, heads: usize, w: &AttentionWeights) -> Result<Var> {
        let shape = self.shape(tokens).to_vec();
        if shape.len() != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "mhsa",
                detail: format!("expected [B,T,D], got {shape:?}"),
            });
        }
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::NotDivisible {
                op: "mhsa",
                dim: "model width",
                value: d,
                by: heads,
            });
        }
        let dh = d / heads;
        let q = self.linear(tokens, w.wq, Some(w.bq))?;
        let k = self.linear(tokens, w.wk, Some(w.bk))?;
        let v = self.linear(tokens, w.wv, Some(w.bv))?;
        let split = |tape: &mut Self, x: Var| -> Result<Var> {
            let x = tape.reshape(x, &[b, t, heads, dh])?;
            let x = tape.permute(x, &[0, 2, 1, 3])?;
            tape.reshape(x, &[b * heads, t, dh])
        };
        let qh = split(self, q)?;
        let kh = split(self, k)?;
        let vh = split(self, v)?;
        let scores = self.bmm_nt(qh, kh)?;
        let scaled = self.scale(scores, S::from_f64(1.0 / (dh as f64).sqrt()));
        let attn = self.softmax_last(scaled);
        let ctx = self.bmm(attn, vh)?;
        let ctx = self.reshape(ctx, &[b, heads, t, dh])?;
        let ctx = self.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = self.reshape(ctx, &[b, t, d])?;
        self.linear(ctx, w.wo, Some(w.bo))
    }

    /// Pre-norm transformer block: mhsa + residual, MLP + residual.
    pub fn transformer_block(
        &mut self,
        tokens: Var,
        heads: usize,
        w: &TransformerWeights,
    ) -> Result<Var> {
        let normed = self.layer_norm(tokens, w.ln1_gamma, w.ln1_beta, 1e-6)?;
        let attn = self.mhsa(normed, heads, &w.attn)?;
        let x = self.add(tokens, attn)?;
        let normed2 = self.layer_norm(x, w.ln2_gamma, w.ln2_beta, 1e-6)?;
        let h = self.linear(normed2, w.mlp_w1, Some(w.mlp_b1))?;
        let h = self.relu(h);
        let h = self.linear(h, w.mlp_w2, Some(w.mlp_b2))?;
        self.add(x, h)
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Tape, Var};
    use super::AttentionWeights;

    fn identity_weights(t: &mut Tape<f64>, d: usize) -> AttentionWeights {
        let eye: Vec<f64> = (0..d * d)
            .map(|i| if i / d == i % d { 1.0 } else { 0.0 })
            .collect();
        let zero = vec![0.0; d];
        let mk = |t: &mut Tape<f64>| -> (Var, Var) {
            let w = t.leaf(&[d, d], eye.clone(), true);
            let b = t.leaf(&[d], zero.clone(), true);
            (w, b)
        };
        let (wq, bq) = mk(t);
        let (wk, bk) = mk(t);
        let (wv, bv) = mk(t);
        let (wo, bo) = mk(t);
        AttentionWeights {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        }
    }

    #[test]
    fn single_token_attention_is_projection_only() {
        // T=1: the softmax is over a singleton, so out = Wo(Wv x + bv) + bo
        let mut t: Tape<f64> = Tape::new();
        let w = identity_weights(&mut t, 4);
        let x = t.constant(&[1, 1, 4], vec![0.3, -1.0, 2.0, 0.7]);
        let y = t.mhsa(x, 2, &w).unwrap();
        let out = t.values(y).to_vec();
        assert_eq!(out, vec![0.3, -1.0, 2.0, 0.7]);
    }

    #[test]
    fn permutation_equivariance_without_positional_encoding() {
        let d = 8;
        let tn = 5;
        let mut t: Tape<f64> = Tape::new();
        let w = identity_weights(&mut t, d);
        let vals: Vec<f64> = (0..tn * d).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.17).collect();
        let x = t.constant(&[1, tn, d], vals.clone());
        let y = t.mhsa(x, 2, &w).unwrap();
        let y_vals = t.values(y).to_vec();
        // reverse the tokens
        let mut rev = vec![0.0; tn * d];
        for i in 0..tn {
            rev[i * d..(i + 1) * d].copy_from_slice(&vals[(tn - 1 - i) * d..(tn - i) * d]);
        }
        let xr = t.constant(&[1, tn, d], rev);
        let yr = t.mhsa(xr, 2, &w).unwrap();
        let yr_vals = t.values(yr);
        for i in 0..tn {
            for j in 0..d {
                let a = y_vals[(tn - 1 - i) * d + j];
                let b = yr_vals[i * d + j];
                assert!((a - b).abs() < 1e-6, "token {i} dim {j}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn two_token_one_head_matches_hand_computation() {
        // d=1, identity projections: scores s_ij = x_i * x_j, softmax rows,
        // out_i = sum_j a_ij x_j.
        let mut t: Tape<f64> = Tape::new();
        let w = identity_weights(&mut t, 1);
        let (x0, x1) = (0.5f64, -1.0f64);
        let x = t.constant(&[1, 2, 1], vec![x0, x1]);
        let y = t.mhsa(x, 1, &w).unwrap();
        let out = t.values(y);
        let row = |a: f64, b: f64, xa: f64| {
            let (ea, eb) = ((xa * a).exp(), (xa * b).exp());
            (ea * a + eb * b) / (ea + eb)
        };
        assert!((out[0] - row(x0, x1, x0)).abs() < 1e-6);
        assert!((out[1] - row(x0, x1, x1)).abs() < 1e-6);
    }

    #[test]
    fn mhsa_rejects_indivisible_heads() {
        let mut t: Tape<f64> = Tape::new();
        let w = identity_weights(&mut t, 4);
        let x = t.constant(&[1, 2, 4], vec![0.0; 8]);
        assert!(t.mhsa(x, 3, &w).is_err());
    }
}
