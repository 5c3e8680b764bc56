//! Convolution, spatial resampling, channel split/concat and bilinear
//! point gathering on [B,C,H,W] (or [C,H,W]) tensors.

use super::ops::gemm;
use super::{Elem, Op, ResampleMode, Result, ScaleFactor, Tape, TensorError, Var};

fn im2col<S: Elem>(
    input: &[S],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
    cols: &mut [S],
) {
    debug_assert_eq!(cols.len(), cin * kh * kw * ho * wo);
    let area = ho * wo;
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * area;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        for ox in 0..wo {
                            cols[row + oy * wo + ox] = S::ZERO;
                        }
                        continue;
                    }
                    let base = (c * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        cols[row + oy * wo + ox] = if ix < 0 || ix >= w as isize {
                            S::ZERO
                        } else {
                            input[base + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<S: Elem>(
    cols: &[S],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
    out: &mut [S],
) {
    let area = ho * wo;
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * area;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (c * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            out[base + ix as usize] += cols[row + oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<S: Elem> Tape<S> {
    /// 2-D convolution with odd kernel, stride 1 or 2 and "same" padding.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let ishape = self.shape(input).to_vec();
        let wshape = self.shape(weight).to_vec();
        if ishape.len() != 4 || wshape.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input {ishape:?}, weight {wshape:?}"),
            });
        }
        let (b, cin, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let (cout, wcin, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        if wcin != cin {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input has {cin} channels, weight expects {wcin}"),
            });
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(TensorError::Invalid(format!(
                "conv2d kernel must be odd, got {kh}x{kw}"
            )));
        }
        if stride != 1 && stride != 2 {
            return Err(TensorError::Invalid(format!(
                "conv2d stride must be 1 or 2, got {stride}"
            )));
        }
        if padding != (kh - 1) / 2 || padding != (kw - 1) / 2 {
            return Err(TensorError::Invalid(format!(
                "conv2d padding must be (k-1)/2, got {padding} for {kh}x{kw}"
            )));
        }
        if stride == 2 && (h % 2 != 0 || w % 2 != 0) {
            return Err(TensorError::Invalid(format!(
                "conv2d stride 2 requires even spatial extents, got {h}x{w}"
            )));
        }
        if self.shape(bias) != [cout] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("bias {:?}, expected [{cout}]", self.shape(bias)),
            });
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;
        let k2 = cin * kh * kw;
        let area = ho * wo;
        let mut cols = vec![S::ZERO; k2 * area];
        let mut out = vec![S::ZERO; b * cout * area];
        for bi in 0..b {
            im2col(
                &self.values(input)[bi * cin * h * w..(bi + 1) * cin * h * w],
                cin,
                h,
                w,
                kh,
                kw,
                stride,
                padding,
                ho,
                wo,
                &mut cols,
            );
            gemm(
                cout,
                k2,
                area,
                self.values(weight),
                false,
                &cols,
                false,
                &mut out[bi * cout * area..(bi + 1) * cout * area],
            );
        }
        let bvals = self.values(bias).to_vec();
        for bi in 0..b {
            for c in 0..cout {
                let base = (bi * cout + c) * area;
                let bv = bvals[c];
                for o in out[base..base + area].iter_mut() {
                    *o += bv;
                }
            }
        }
        Ok(self.push(
            vec![b, cout, ho, wo],
            out,
            Op::Conv2d {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
                stride,
                padding,
            },
        ))
    }

    /// Spatial resampling by a power-of-two factor.
    pub fn resample(&mut self, input: Var, factor: ScaleFactor, mode: ResampleMode) -> Result<Var> {
        let ishape = self.shape(input).to_vec();
        if ishape.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "resample",
                detail: format!("expected [B,C,H,W], got {ishape:?}"),
            });
        }
        let (b, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let (num, den) = factor.ratio();
        if den > 1 && (h % den != 0 || w % den != 0) {
            return Err(TensorError::NotDivisible {
                op: "resample",
                dim: "spatial extent",
                value: h.min(w),
                by: den,
            });
        }
        let (ho, wo) = (h * num / den, w * num / den);
        let mut out = vec![S::ZERO; b * c * ho * wo];
        let vals = self.values(input);
        for bc in 0..b * c {
            let src = &vals[bc * h * w..(bc + 1) * h * w];
            let dst = &mut out[bc * ho * wo..(bc + 1) * ho * wo];
            resample_plane_forward(src, h, w, dst, ho, wo, factor, mode);
        }
        Ok(self.push(
            vec![b, c, ho, wo],
            out,
            Op::Resample {
                input: input.0,
                factor,
                mode,
            },
        ))
    }

    /// Contiguous channel slice \[B, start..start+count, H, W\].
    pub fn slice_channels(&mut self, input: Var, start: usize, count: usize) -> Result<Var> {
        let ishape = self.shape(input).to_vec();
        let (b, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        if start + count > c {
            return Err(TensorError::ShapeMismatch {
                op: "slice_channels",
                detail: format!("slice {start}..{} out of {c} channels", start + count),
            });
        }
        let plane = h * w;
        let mut out = vec![S::ZERO; b * count * plane];
        for bi in 0..b {
            let src = &self.values(input)[(bi * c + start) * plane..(bi * c + start + count) * plane];
            out[bi * count * plane..(bi + 1) * count * plane].copy_from_slice(src);
        }
        Ok(self.push(
            vec![b, count, h, w],
            out,
            Op::SliceChannels {
                input: input.0,
                start,
                count,
            },
        ))
    }

    /// Splits channels into `parts` contiguous equal slices.
    pub fn split_channels(&mut self, input: Var, parts: usize) -> Result<Vec<Var>> {
        let c = self.shape(input)[1];
        if parts == 0 || c % parts != 0 {
            return Err(TensorError::NotDivisible {
                op: "split_channels",
                dim: "channels",
                value: c,
                by: parts,
            });
        }
        let each = c / parts;
        (0..parts)
            .map(|p| self.slice_channels(input, p * each, each))
            .collect()
    }

    /// Concatenates along the channel axis. Inputs must share B, H, W.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(TensorError::Invalid("concat_channels of zero inputs".into()));
        }
        let first = self.shape(inputs[0]).to_vec();
        let (b, h, w) = (first[0], first[2], first[3]);
        let mut ctotal = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != 4 || s[0] != b || s[2] != h || s[3] != w {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_channels",
                    detail: format!("{s:?} incompatible with [B={b},*,{h},{w}]"),
                });
            }
            ctotal += s[1];
        }
        let plane = h * w;
        let mut out = vec![S::ZERO; b * ctotal * plane];
        for bi in 0..b {
            let mut coff = 0;
            for &v in inputs {
                let ci = self.shape(v)[1];
                let src = &self.values(v)[bi * ci * plane..(bi + 1) * ci * plane];
                out[(bi * ctotal + coff) * plane..(bi * ctotal + coff + ci) * plane]
                    .copy_from_slice(src);
                coff += ci;
            }
        }
        Ok(self.push(
            vec![b, ctotal, h, w],
            out,
            Op::ConcatChannels {
                inputs: inputs.iter().map(|v| v.0).collect(),
            },
        ))
    }

    /// Bilinear read of a \[C,H,W\] map at sub-pixel points (pixel-center
    /// convention). Out-of-bounds points are clamped. Gradient flows to the
    /// map only; point coordinates are fixed.
    pub fn gather_bilinear(&mut self, map: Var, points: &[(f64, f64)]) -> Result<Var> {
        let shape = self.shape(map).to_vec();
        if shape.len() != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "gather_bilinear",
                detail: format!("expected [C,H,W], got {shape:?}"),
            });
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let vals = self.values(map);
        let mut out = vec![S::ZERO; points.len() * c];
        for (pi, &(px, py)) in points.iter().enumerate() {
            let (x0, y0, fx, fy) = bilinear_cell(px, py, w, h);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            for ci in 0..c {
                let p = ci * h * w;
                let v00 = vals[p + y0 * w + x0].to_f64();
                let v01 = vals[p + y0 * w + x1].to_f64();
                let v10 = vals[p + y1 * w + x0].to_f64();
                let v11 = vals[p + y1 * w + x1].to_f64();
                let v = v00 * (1.0 - fx) * (1.0 - fy)
                    + v01 * fx * (1.0 - fy)
                    + v10 * (1.0 - fx) * fy
                    + v11 * fx * fy;
                out[pi * c + ci] = S::from_f64(v);
            }
        }
        Ok(self.push(
            vec![points.len(), c],
            out,
            Op::GatherBilinear {
                map: map.0,
                points: points.to_vec(),
            },
        ))
    }
}

fn bilinear_cell(px: f64, py: f64, w: usize, h: usize) -> (usize, usize, f64, f64) {
    let x = px.clamp(0.0, (w - 1) as f64);
    let y = py.clamp(0.0, (h - 1) as f64);
    let x0 = (x.floor() as usize).min(w - 1);
    let y0 = (y.floor() as usize).min(h - 1);
    (x0, y0, x - x0 as f64, y - y0 as f64)
}

fn resample_plane_forward<S: Elem>(
    src: &[S],
    h: usize,
    w: usize,
    dst: &mut [S],
    ho: usize,
    wo: usize,
    factor: ScaleFactor,
    mode: ResampleMode,
) {
    let (num, den) = factor.ratio();
    match (mode, num >= den) {
        (ResampleMode::Nearest, false) => {
            // downscale: pick top-left of each block
            for oy in 0..ho {
                for ox in 0..wo {
                    dst[oy * wo + ox] = src[(oy * den) * w + ox * den];
                }
            }
        }
        (ResampleMode::Nearest, true) => {
            for oy in 0..ho {
                for ox in 0..wo {
                    dst[oy * wo + ox] = src[(oy / num) * w + ox / num];
                }
            }
        }
        (ResampleMode::Bilinear, false) => {
            // downscale: box average
            let inv = S::from_f64(1.0 / (den * den) as f64);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = S::ZERO;
                    for dy in 0..den {
                        for dx in 0..den {
                            acc += src[(oy * den + dy) * w + ox * den + dx];
                        }
                    }
                    dst[oy * wo + ox] = acc * inv;
                }
            }
        }
        (ResampleMode::Bilinear, true) => {
            let s = num as f64;
            for oy in 0..ho {
                let sy = (oy as f64 + 0.5) / s - 0.5;
                for ox in 0..wo {
                    let sx = (ox as f64 + 0.5) / s - 0.5;
                    let (x0, y0, fx, fy) = bilinear_cell(sx, sy, w, h);
                    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                    let v = src[y0 * w + x0].to_f64() * (1.0 - fx) * (1.0 - fy)
                        + src[y0 * w + x1].to_f64() * fx * (1.0 - fy)
                        + src[y1 * w + x0].to_f64() * (1.0 - fx) * fy
                        + src[y1 * w + x1].to_f64() * fx * fy;
                    dst[oy * wo + ox] = S::from_f64(v);
                }
            }
        }
    }
    if num == 1 && den == 1 {
        dst.copy_from_slice(src);
    }
}

pub(crate) fn conv2d_backward<S: Elem>(
    t: &mut Tape<S>,
    id: usize,
    input: usize,
    weight: usize,
    bias: usize,
    stride: usize,
    padding: usize,
) {
    let ishape = t.nodes[input].shape.clone();
    let wshape = t.nodes[weight].shape.clone();
    let (b, cin, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
    let (cout, _, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
    let (ho, wo) = (t.nodes[id].shape[2], t.nodes[id].shape[3]);
    let k2 = cin * kh * kw;
    let area = ho * wo;
    let g = t.nodes[id].grad.clone().unwrap();
    let need_input = t.nodes[input].grad.is_some();
    let need_weight = t.nodes[weight].grad.is_some();
    let need_bias = t.nodes[bias].grad.is_some();

    if need_bias {
        let mut db = vec![S::ZERO; cout];
        for bi in 0..b {
            for c in 0..cout {
                let base = (bi * cout + c) * area;
                for &gv in &g[base..base + area] {
                    db[c] += gv;
                }
            }
        }
        t.accumulate(bias, &db);
    }
    if need_input || need_weight {
        let mut cols = vec![S::ZERO; k2 * area];
        let mut dinput = if need_input {
            vec![S::ZERO; b * cin * h * w]
        } else {
            Vec::new()
        };
        let mut dweight = if need_weight {
            vec![S::ZERO; cout * k2]
        } else {
            Vec::new()
        };
        let mut dcols = vec![S::ZERO; k2 * area];
        for bi in 0..b {
            let gs = &g[bi * cout * area..(bi + 1) * cout * area];
            if need_weight {
                im2col(
                    &t.nodes[input].values[bi * cin * h * w..(bi + 1) * cin * h * w],
                    cin,
                    h,
                    w,
                    kh,
                    kw,
                    stride,
                    padding,
                    ho,
                    wo,
                    &mut cols,
                );
                // dW += G x cols^T
                gemm(cout, area, k2, gs, false, &cols, true, &mut dweight);
            }
            if need_input {
                for v in dcols.iter_mut() {
                    *v = S::ZERO;
                }
                // dcols = W^T x G
                gemm(
                    k2,
                    cout,
                    area,
                    &t.nodes[weight].values,
                    true,
                    gs,
                    false,
                    &mut dcols,
                );
                col2im(
                    &dcols,
                    cin,
                    h,
                    w,
                    kh,
                    kw,
                    stride,
                    padding,
                    ho,
                    wo,
                    &mut dinput[bi * cin * h * w..(bi + 1) * cin * h * w],
                );
            }
        }
        if need_weight {
            t.accumulate(weight, &dweight);
        }
        if need_input {
            t.accumulate(input, &dinput);
        }
    }
}

pub(crate) fn resample_backward<S: Elem>(
    t: &mut Tape<S>,
    id: usize,
    input: usize,
    factor: ScaleFactor,
    mode: ResampleMode,
) {
    if t.nodes[input].grad.is_none() {
        return;
    }
    let ishape = t.nodes[input].shape.clone();
    let (b, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
    let (ho, wo) = (t.nodes[id].shape[2], t.nodes[id].shape[3]);
    let (num, den) = factor.ratio();
    let g = t.nodes[id].grad.clone().unwrap();
    let mut din = vec![S::ZERO; b * c * h * w];
    for bc in 0..b * c {
        let gs = &g[bc * ho * wo..(bc + 1) * ho * wo];
        let ds = &mut din[bc * h * w..(bc + 1) * h * w];
        if num == 1 && den == 1 {
            for (d, &gv) in ds.iter_mut().zip(gs.iter()) {
                *d += gv;
            }
            continue;
        }
        match (mode, num >= den) {
            (ResampleMode::Nearest, false) => {
                for oy in 0..ho {
                    for ox in 0..wo {
                        ds[(oy * den) * w + ox * den] += gs[oy * wo + ox];
                    }
                }
            }
            (ResampleMode::Nearest, true) => {
                for oy in 0..ho {
                    for ox in 0..wo {
                        ds[(oy / num) * w + ox / num] += gs[oy * wo + ox];
                    }
                }
            }
            (ResampleMode::Bilinear, false) => {
                let inv = S::from_f64(1.0 / (den * den) as f64);
                for oy in 0..ho {
                    for ox in 0..wo {
                        let gv = gs[oy * wo + ox] * inv;
                        for dy in 0..den {
                            for dx in 0..den {
                                ds[(oy * den + dy) * w + ox * den + dx] += gv;
                            }
                        }
                    }
                }
            }
            (ResampleMode::Bilinear, true) => {
                let s = num as f64;
                for oy in 0..ho {
                    let sy = (oy as f64 + 0.5) / s - 0.5;
                    for ox in 0..wo {
                        let sx = (ox as f64 + 0.5) / s - 0.5;
                        let (x0, y0, fx, fy) = bilinear_cell(sx, sy, w, h);
                        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                        let gv = gs[oy * wo + ox].to_f64();
                        ds[y0 * w + x0] += S::from_f64(gv * (1.0 - fx) * (1.0 - fy));
                        ds[y0 * w + x1] += S::from_f64(gv * fx * (1.0 - fy));
                        ds[y1 * w + x0] += S::from_f64(gv * (1.0 - fx) * fy);
                        ds[y1 * w + x1] += S::from_f64(gv * fx * fy);
                    }
                }
            }
        }
    }
    t.accumulate(input, &din);
}

pub(crate) fn slice_channels_backward<S: Elem>(
    t: &mut Tape<S>,
    id: usize,
    input: usize,
    start: usize,
    count: usize,
) {
    if t.nodes[input].grad.is_none() {
        return;
    }
    let ishape = t.nodes[input].shape.clone();
    let (b, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
    let plane = h * w;
    let g = t.nodes[id].grad.clone().unwrap();
    let mut din = vec![S::ZERO; b * c * plane];
    for bi in 0..b {
        let dst = &mut din[(bi * c + start) * plane..(bi * c + start + count) * plane];
        let src = &g[bi * count * plane..(bi + 1) * count * plane];
        for (d, &s) in dst.iter_mut().zip(src.iter()) {
            *d += s;
        }
    }
    t.accumulate(input, &din);
}

pub(crate) fn concat_channels_backward<S: Elem>(t: &mut Tape<S>, id: usize, inputs: &[usize]) {
    let oshape = t.nodes[id].shape.clone();
    let (b, ctotal, h, w) = (oshape[0], oshape[1], oshape[2], oshape[3]);
    let plane = h * w;
    let g = t.nodes[id].grad.clone().unwrap();
    let mut coff = 0;
    for &inp in inputs {
        let ci = t.nodes[inp].shape[1];
        if t.nodes[inp].grad.is_some() {
            let mut din = vec![S::ZERO; b * ci * plane];
            for bi in 0..b {
                let src = &g[(bi * ctotal + coff) * plane..(bi * ctotal + coff + ci) * plane];
                din[bi * ci * plane..(bi + 1) * ci * plane].copy_from_slice(src);
            }
            t.accumulate(inp, &din);
        }
        coff += ci;
    }
}

pub(crate) fn gather_bilinear_backward<S: Elem>(
    t: &mut Tape<S>,
    id: usize,
    map: usize,
    points: &[(f64, f64)],
) {
    if t.nodes[map].grad.is_none() {
        return;
    }
    let shape = t.nodes[map].shape.clone();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let g = t.nodes[id].grad.clone().unwrap();
    let mut dm = vec![S::ZERO; c * h * w];
    for (pi, &(px, py)) in points.iter().enumerate() {
        let (x0, y0, fx, fy) = bilinear_cell(px, py, w, h);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        for ci in 0..c {
            let gv = g[pi * c + ci].to_f64();
            let p = ci * h * w;
            dm[p + y0 * w + x0] += S::from_f64(gv * (1.0 - fx) * (1.0 - fy));
            dm[p + y0 * w + x1] += S::from_f64(gv * fx * (1.0 - fy));
            dm[p + y1 * w + x0] += S::from_f64(gv * (1.0 - fx) * fy);
            dm[p + y1 * w + x1] += S::from_f64(gv * fx * fy);
        }
    }
    t.accumulate(map, &dm);
}

#[cfg(test)]
mod tests {
    use super::super::{ResampleMode, ScaleFactor, Tape};

    #[test]
    fn conv_box_sum_identity() {
        // all-ones 3x3 input and 3x3 kernel: center 9, corners 4
        let mut t: Tape<f64> = Tape::new();
        let x = t.constant(&[1, 1, 3, 3], vec![1.0; 9]);
        let w = t.constant(&[1, 1, 3, 3], vec![1.0; 9]);
        let b = t.constant(&[1], vec![0.0]);
        let y = t.conv2d(x, w, b, 1, 1).unwrap();
        let v = t.values(y);
        assert_eq!(v[4], 9.0);
        assert_eq!(v[0], 4.0);
        assert_eq!(v[8], 4.0);
    }

    #[test]
    fn conv_stride2_shape() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.constant(&[1, 1, 8, 8], vec![0.5; 64]);
        let w = t.constant(&[1, 1, 3, 3], vec![0.1; 9]);
        let b = t.constant(&[1], vec![0.0]);
        let y = t.conv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 4, 4]);
    }

    #[test]
    fn conv_rejects_odd_extent_with_stride2() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.constant(&[1, 1, 7, 8], vec![0.0; 56]);
        let w = t.constant(&[1, 1, 3, 3], vec![0.0; 9]);
        let b = t.constant(&[1], vec![0.0]);
        assert!(t.conv2d(x, w, b, 2, 1).is_err());
    }

    #[test]
    fn nearest_preserves_constants() {
        for factor in [
            ScaleFactor::Down4,
            ScaleFactor::Down2,
            ScaleFactor::One,
            ScaleFactor::Up2,
            ScaleFactor::Up4,
        ] {
            let mut t: Tape<f64> = Tape::new();
            let x = t.constant(&[1, 1, 8, 8], vec![7.0; 64]);
            let y = t.resample(x, factor, ResampleMode::Nearest).unwrap();
            assert!(t.values(y).iter().all(|&v| v == 7.0), "{factor:?}");
        }
    }

    #[test]
    fn nearest_up2_block_replicates() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.constant(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = t.resample(x, ScaleFactor::Up2, ResampleMode::Nearest).unwrap();
        assert_eq!(
            t.values(y),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn bilinear_up_then_down_is_identity_on_linear_ramp_interior() {
        let (h, w) = (16, 16);
        let vals: Vec<f64> = (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                3.0 + 0.25 * x as f64 - 0.125 * y as f64
            })
            .collect();
        let mut t: Tape<f64> = Tape::new();
        let x = t.constant(&[1, 1, h, w], vals.clone());
        let up = t.resample(x, ScaleFactor::Up2, ResampleMode::Bilinear).unwrap();
        let back = t
            .resample(up, ScaleFactor::Down2, ResampleMode::Bilinear)
            .unwrap();
        let out = t.values(back);
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                assert!((out[y * w + x] - vals[y * w + x]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rejects_non_divisible_downscale() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.constant(&[1, 1, 6, 6], vec![0.0; 36]);
        assert!(t.resample(x, ScaleFactor::Down4, ResampleMode::Nearest).is_err());
    }

    #[test]
    fn split_concat_is_identity_bitwise() {
        let mut t: Tape<f64> = Tape::new();
        let vals: Vec<f64> = (0..4 * 2 * 3 * 3).map(|i| i as f64 * 0.37).collect();
        let x = t.constant(&[2, 4, 3, 3], vals.clone());
        let parts = t.split_channels(x, 2).unwrap();
        let y = t.concat_channels(&parts).unwrap();
        assert_eq!(t.values(y), vals.as_slice());
    }

    #[test]
    fn split_assigns_expected_channels() {
        let mut t: Tape<f64> = Tape::new();
        // channel-constant probes 0..3
        let mut vals = Vec::new();
        for c in 0..4 {
            vals.extend(std::iter::repeat(c as f64).take(4));
        }
        let x = t.constant(&[1, 4, 2, 2], vals);
        let parts = t.split_channels(x, 2).unwrap();
        assert_eq!(t.values(parts[0]), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(t.values(parts[1]), &[2.0, 2.0, 2.0, 2.0, 3.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn split_of_one_part_is_identity() {
        let mut t: Tape<f64> = Tape::new();
        let vals: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let x = t.constant(&[1, 4, 2, 2], vals.clone());
        let parts = t.split_channels(x, 1).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(t.values(parts[0]), vals.as_slice());
    }

    #[test]
    fn split_rejects_indivisible() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.constant(&[1, 5, 2, 2], vec![0.0; 20]);
        let err = t.split_channels(x, 2).unwrap_err();
        assert!(err.to_string().contains("divisible"));
    }

    #[test]
    fn gather_bilinear_exact_and_midpoint() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.constant(&[1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]);
        let out = t.gather_bilinear(x, &[(1.0, 0.0), (0.5, 0.0), (0.5, 0.5)]).unwrap();
        let v = t.values(out);
        assert_eq!(v[0], 3.0); // exact pixel center
        assert_eq!(v[1], 2.0); // midway between two pixels
        assert_eq!(v[2], 4.0); // center of the 2x2 cell
    }
}
