//! Elementwise ops, matmuls, reductions and shape ops.

use super::{check_same_shape, Elem, Op, Result, Tape, TensorError, Var};

/// C += A x B where A is m-by-k, B is k-by-n, all row-major.
/// `ta`/`tb` transpose the logical operand (the buffer stays as given:
/// with `ta` the buffer is k-by-m, with `tb` it is n-by-k).
pub(crate) fn gemm<S: Elem>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    ta: bool,
    b: &[S],
    tb: bool,
    c: &mut [S],
) {
    debug_assert_eq!(c.len(), m * n);
    if !ta && !tb {
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                let brow = &b[p * n..(p + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                    *cv += av * bv;
                }
            }
        }
    } else if !ta && tb {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                let mut acc = S::ZERO;
                for (&av, &bv) in arow.iter().zip(brow.iter()) {
                    acc += av * bv;
                }
                c[i * n + j] += acc;
            }
        }
    } else if ta && !tb {
        // a buffer is k-by-m
        for p in 0..k {
            let arow = &a[p * m..(p + 1) * m];
            let brow = &b[p * n..(p + 1) * n];
            for i in 0..m {
                let av = arow[i];
                let crow = &mut c[i * n..(i + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                    *cv += av * bv;
                }
            }
        }
    } else {
        for i in 0..m {
            for j in 0..n {
                let mut acc = S::ZERO;
                for p in 0..k {
                    acc += a[p * m + i] * b[j * k + p];
                }
                c[i * n + j] += acc;
            }
        }
    }
}

impl<S: Elem> Tape<S> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape("add", self, a, b)?;
        let vals: Vec<S> = self
            .values(a)
            .iter()
            .zip(self.values(b).iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, vals, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape("sub", self, a, b)?;
        let vals: Vec<S> = self
            .values(a)
            .iter()
            .zip(self.values(b).iter())
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, vals, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape("mul", self, a, b)?;
        let vals: Vec<S> = self
            .values(a)
            .iter()
            .zip(self.values(b).iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, vals, Op::Mul(a.0, b.0)))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let vals: Vec<S> = self.values(a).iter().map(|&x| -x).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, vals, Op::Neg(a.0))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let vals: Vec<S> = self.values(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, vals, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Var {
        let vals: Vec<S> = self.values(a).iter().map(|&x| x + c).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, vals, Op::AddScalar(a.0, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let vals: Vec<S> = self.values(a).iter().map(|&x| x.max_e(S::ZERO)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, vals, Op::Relu(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let vals: Vec<S> = self
            .values(a)
            .iter()
            .map(|&x| {
                // split on sign for numerical stability
                if x >= S::ZERO {
                    S::ONE / (S::ONE + (-x).exp_e())
                } else {
                    let e = x.exp_e();
                    e / (S::ONE + e)
                }
            })
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, vals, Op::Sigmoid(a.0))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let vals: Vec<S> = self.values(a).iter().map(|&x| x.sqrt_e()).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, vals, Op::Sqrt(a.0))
    }

    /// 2-D matmul: \[m,k\] x \[k,n\] -> \[m,n\].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("{sa:?} x {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::ZERO; m * n];
        gemm(m, k, n, self.values(a), false, self.values(b), false, &mut out);
        Ok(self.push(vec![m, n], out, Op::Matmul { a: a.0, b: b.0 }))
    }

    /// Batched matmul: \[B,m,k\] x \[B,k,n\] -> \[B,m,n\].
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                detail: format!("{sa:?} x {sb:?}"),
            });
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![S::ZERO; bs * m * n];
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &self.values(a)[i * m * k..(i + 1) * m * k],
                false,
                &self.values(b)[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        Ok(self.push(vec![bs, m, n], out, Op::Bmm { a: a.0, b: b.0 }))
    }

    /// Batched matmul with transposed rhs: \[B,m,k\] x \[B,n,k\] -> \[B,m,n\].
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(TensorError::ShapeMismatch {
                op: "bmm_nt",
                detail: format!("{sa:?} x {sb:?}^T"),
            });
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
        let mut out = vec![S::ZERO; bs * m * n];
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &self.values(a)[i * m * k..(i + 1) * m * k],
                false,
                &self.values(b)[i * n * k..(i + 1) * n * k],
                true,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        Ok(self.push(vec![bs, m, n], out, Op::BmmNt { a: a.0, b: b.0 }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let count: usize = shape.iter().product();
        if count != self.values(a).len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.shape(a), shape),
            });
        }
        let vals = self.values(a).to_vec();
        Ok(self.push(shape.to_vec(), vals, Op::Reshape(a.0)))
    }

    /// Materialized axis permutation.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if perm.len() != shape.len() {
            return Err(TensorError::ShapeMismatch {
                op: "permute",
                detail: format!("perm {perm:?} on shape {shape:?}"),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let vals = permute_values(self.values(a), &shape, perm);
        Ok(self.push(
            out_shape,
            vals,
            Op::Permute {
                input: a.0,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().unwrap();
        let vals = self.values(a);
        let mut out = vec![S::ZERO; vals.len()];
        for (row_in, row_out) in vals.chunks(d).zip(out.chunks_mut(d)) {
            let mut mx = row_in[0];
            for &v in row_in.iter() {
                mx = mx.max_e(v);
            }
            let mut sum = S::ZERO;
            for (o, &v) in row_out.iter_mut().zip(row_in.iter()) {
                *o = (v - mx).exp_e();
                sum += *o;
            }
            for o in row_out.iter_mut() {
                *o = *o / sum;
            }
        }
        self.push(shape, out, Op::SoftmaxLast(a.0))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let mut acc = S::ZERO;
        for &v in self.values(a) {
            acc += v;
        }
        self.push(vec![1], vec![acc], Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.values(a).len();
        let mut acc = S::ZERO;
        for &v in self.values(a) {
            acc += v;
        }
        let m = acc / S::from_f64(n as f64);
        self.push(vec![1], vec![m], Op::Mean(a.0))
    }

    /// Broadcast add of a \[D\] bias over the last axis of `a`.
    pub fn add_bias_last(&mut self, a: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(a).last().unwrap();
        if self.shape(bias) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias_last",
                detail: format!("bias {:?} on {:?}", self.shape(bias), self.shape(a)),
            });
        }
        let bvals = self.values(bias).to_vec();
        let vals: Vec<S> = self
            .values(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bvals[i % d])
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(
            shape,
            vals,
            Op::AddBiasLast {
                input: a.0,
                bias: bias.0,
            },
        ))
    }

    /// x \[..., Din\] x w \[Din, Dout\] + b.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let din = *shape.last().unwrap();
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = self.reshape(x, &[rows, din])?;
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = b {
            y = self.add_bias_last(y, b)?;
        }
        let dout = self.shape(w)[1];
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        out_shape.push(dout);
        self.reshape(y, &out_shape)
    }
}

pub(crate) fn permute_values<S: Elem>(vals: &[S], shape: &[usize], perm: &[usize]) -> Vec<S> {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut out = vec![vals[0]; vals.len()];
    let mut idx = vec![0usize; rank];
    for slot in out.iter_mut() {
        let mut src = 0;
        for (d, &i) in idx.iter().enumerate() {
            src += i * in_strides[perm[d]];
        }
        *slot = vals[src];
        // odometer over out_shape
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

pub(crate) fn matmul_backward<S: Elem>(t: &mut Tape<S>, id: usize, a: usize, b: usize) {
    let (m, n) = (t.nodes[id].shape[0], t.nodes[id].shape[1]);
    let k = t.nodes[a].shape[1];
    let g = t.nodes[id].grad.clone().unwrap();
    if t.nodes[a].grad.is_some() {
        let mut da = vec![S::ZERO; m * k];
        gemm(m, n, k, &g, false, &t.nodes[b].values, true, &mut da);
        t.accumulate(a, &da);
    }
    if t.nodes[b].grad.is_some() {
        let mut db = vec![S::ZERO; k * n];
        gemm(k, m, n, &t.nodes[a].values, true, &g, false, &mut db);
        t.accumulate(b, &db);
    }
}

pub(crate) fn bmm_backward<S: Elem>(t: &mut Tape<S>, id: usize, a: usize, b: usize, nt: bool) {
    let bs = t.nodes[id].shape[0];
    let (m, n) = (t.nodes[id].shape[1], t.nodes[id].shape[2]);
    let k = t.nodes[a].shape[2];
    let g = t.nodes[id].grad.clone().unwrap();
    if t.nodes[a].grad.is_some() {
        let mut da = vec![S::ZERO; bs * m * k];
        for i in 0..bs {
            let gs = &g[i * m * n..(i + 1) * m * n];
            let bv = &t.nodes[b].values[i * k * n..(i + 1) * k * n];
            // nn: dA = G x B^T ; nt: dA = G x B (B stored n-by-k)
            gemm(
                m,
                n,
                k,
                gs,
                false,
                bv,
                !nt,
                &mut da[i * m * k..(i + 1) * m * k],
            );
        }
        t.accumulate(a, &da);
    }
    if t.nodes[b].grad.is_some() {
        let blen = t.nodes[b].values.len();
        let mut db = vec![S::ZERO; blen];
        for i in 0..bs {
            let gs = &g[i * m * n..(i + 1) * m * n];
            let av = &t.nodes[a].values[i * m * k..(i + 1) * m * k];
            let dbs = &mut db[i * (blen / bs)..(i + 1) * (blen / bs)];
            if nt {
                // B is n-by-k; dB = G^T x A
                gemm(n, m, k, gs, true, av, false, dbs);
            } else {
                // dB = A^T x G
                gemm(k, m, n, av, true, gs, false, dbs);
            }
        }
        t.accumulate(b, &db);
    }
}

pub(crate) fn permute_backward<S: Elem>(t: &mut Tape<S>, id: usize, input: usize, perm: &[usize]) {
    if t.nodes[input].grad.is_none() {
        return;
    }
    let rank = perm.len();
    let mut inv = vec![0usize; rank];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    let g = t.nodes[id].grad.clone().unwrap();
    let out_shape = t.nodes[id].shape.clone();
    let dg = permute_values(&g, &out_shape, &inv);
    t.accumulate(input, &dg);
}

pub(crate) fn softmax_backward<S: Elem>(t: &mut Tape<S>, id: usize, a: usize) {
    if t.nodes[a].grad.is_none() {
        return;
    }
    let d = *t.nodes[id].shape.last().unwrap();
    let g = t.nodes[id].grad.clone().unwrap();
    let y = &t.nodes[id].values;
    let mut da = vec![S::ZERO; g.len()];
    for ((grow, yrow), drow) in g.chunks(d).zip(y.chunks(d)).zip(da.chunks_mut(d)) {
        let mut dot = S::ZERO;
        for (&gv, &yv) in grow.iter().zip(yrow.iter()) {
            dot += gv * yv;
        }
        for ((dv, &gv), &yv) in drow.iter_mut().zip(grow.iter()).zip(yrow.iter()) {
            *dv = yv * (gv - dot);
        }
    }
    t.accumulate(a, &da);
}

pub(crate) fn add_bias_last_backward<S: Elem>(t: &mut Tape<S>, id: usize, input: usize, bias: usize) {
    let g = t.nodes[id].grad.clone().unwrap();
    if t.nodes[input].grad.is_some() {
        t.accumulate(input, &g);
    }
    if t.nodes[bias].grad.is_some() {
        let d = t.nodes[bias].values.len();
        let mut db = vec![S::ZERO; d];
        for (i, &gv) in g.iter().enumerate() {
            db[i % d] += gv;
        }
        t.accumulate(bias, &db);
    }
}
