//! Convolution, normalization, resampling and attention kernels.

use std::cell::Cell;
use std::rc::Rc;

use super::tape::Var;
use super::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};
use crate::error::{Error, Result};

thread_local! {
    static PAIR_COUNTER: Cell<Option<u64>> = const { Cell::new(None) };
}

/// Counts query–key pairs scored by [`Var::attention`] on this thread while alive.
pub struct PairCounter {
    previous: Option<u64>,
}

impl PairCounter {
    pub fn start() -> Self {
        let previous = PAIR_COUNTER.with(|c| c.replace(Some(0)));
        Self { previous }
    }

    pub fn count(&self) -> u64 {
        PAIR_COUNTER.with(|c| c.get().unwrap_or(0))
    }
}

impl Drop for PairCounter {
    fn drop(&mut self) {
        PAIR_COUNTER.with(|c| c.set(self.previous));
    }
}

impl<'t> Var<'t> {
    /// Cross-correlation of `[C_in×H×W]` with `[C_out×C_in×k×k]`, zero padding.
    pub fn conv2d(
        self,
        kernel: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t>> {
        let (x, w) = (self.value(), kernel.value());
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] || stride == 0 {
            return Err(Error::dim("conv2d", xs, ws));
        }
        let (c_in, h, wd) = (xs[0], xs[1], xs[2]);
        let (c_out, k) = (ws[0], ws[2]);
        if h + 2 * padding < k || wd + 2 * padding < k {
            return Err(Error::dim("conv2d", xs, ws));
        }
        let ho = (h + 2 * padding - k) / stride + 1;
        let wo = (wd + 2 * padding - k) / stride + 1;
        let geom = ConvGeometry {
            c_in,
            h,
            w: wd,
            k,
            stride,
            padding,
            ho,
            wo,
        };
        let cols = Rc::new(geom.im2col(x.data()));
        let ckk = c_in * k * k;
        let hw = ho * wo;
        let mut out = vec![0.0; c_out * hw];
        gemm_acc(w.data(), &cols, &mut out, c_out, ckk, hw);
        let mut parents = vec![self, kernel];
        if let Some(b) = bias {
            let bv = b.value();
            if bv.len() != c_out {
                return Err(Error::dim("conv2d bias", ws, bv.shape()));
            }
            for (c, chunk) in out.chunks_mut(hw).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bv.data()[c]);
            }
            parents.push(b);
        }
        let w_shape = ws.to_vec();
        let has_bias = bias.is_some();
        Ok(self.tape.push(
            Tensor::from_parts(vec![c_out, ho, wo], out),
            &parents,
            Box::new(move |g, needs| {
                let gd = g.data();
                let dx = needs[0].then(|| {
                    let mut dcols = vec![0.0; ckk * hw];
                    gemm_tn_acc(w.data(), gd, &mut dcols, ckk, c_out, hw);
                    Tensor::from_parts(vec![c_in, h, geom.w], geom.col2im(&dcols))
                });
                let dw = needs[1].then(|| {
                    let mut d = vec![0.0; c_out * ckk];
                    gemm_nt_acc(gd, &cols, &mut d, c_out, hw, ckk);
                    Tensor::from_parts(w_shape.clone(), d)
                });
                let mut grads = vec![dx, dw];
                if has_bias {
                    grads.push(needs[2].then(|| {
                        Tensor::from_parts(vec![c_out], gd.chunks(hw).map(|c| c.iter().sum()).collect())
                    }));
                }
                grads
            }),
        ))
    }

    /// Group normalization of `[C×H×W]` with per-channel affine.
    pub fn group_norm(self, groups: usize, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let xs = x.shape();
        if xs.len() != 3 {
            return Err(Error::dim("group_norm", xs, &[3]));
        }
        let c = xs[0];
        if groups == 0 || !c.is_multiple_of(groups) {
            return Err(Error::Config(format!(
                "group_norm: {c} channels not divisible into {groups} groups"
            )));
        }
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.len() != c || bv.len() != c {
            return Err(Error::dim("group_norm affine", xs, gv.shape()));
        }
        let hw = xs[1] * xs[2];
        let per = c / groups * hw;
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; groups];
        for g in 0..groups {
            let seg = &x.data()[g * per..(g + 1) * per];
            let mean = seg.iter().sum::<f64>() / per as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[g] = is;
            for (o, v) in xhat[g * per..(g + 1) * per].iter_mut().zip(seg) {
                *o = (v - mean) * is;
            }
        }
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, xh)| gv.data()[i / hw] * xh + bv.data()[i / hw])
            .collect();
        let shape = xs.to_vec();
        Ok(self.tape.push(
            Tensor::from_parts(shape.clone(), out),
            &[self, gamma, beta],
            Box::new(move |g, needs| {
                let gd = g.data();
                let dx = needs[0].then(|| {
                    let mut dx = vec![0.0; gd.len()];
                    for (grp, &inv) in inv_std.iter().enumerate() {
                        let range = grp * per..(grp + 1) * per;
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for i in range.clone() {
                            let d = gd[i] * gv.data()[i / hw];
                            mean_d += d;
                            mean_dx += d * xhat[i];
                        }
                        mean_d /= per as f64;
                        mean_dx /= per as f64;
                        for i in range {
                            let d = gd[i] * gv.data()[i / hw];
                            dx[i] = inv * (d - mean_d - xhat[i] * mean_dx);
                        }
                    }
                    Tensor::from_parts(shape.clone(), dx)
                });
                let dgamma = needs[1].then(|| {
                    Tensor::from_fn(&[c], |ch| {
                        (ch * hw..(ch + 1) * hw).map(|i| gd[i] * xhat[i]).sum()
                    })
                });
                let dbeta = needs[2].then(|| {
                    Tensor::from_fn(&[c], |ch| gd[ch * hw..(ch + 1) * hw].iter().sum())
                });
                vec![dx, dgamma, dbeta]
            }),
        ))
    }

    /// Bilinear resampling of `[C×H×W]` to `[C×H'×W']` with half-pixel
    /// centres (corner alignment off). Same size is an exact copy.
    pub fn interpolate(self, target: (usize, usize)) -> Result<Var<'t>> {
        let x = self.value();
        let xs = x.shape();
        if xs.len() != 3 || target.0 == 0 || target.1 == 0 {
            return Err(Error::dim("interpolate", xs, &[target.0, target.1]));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        if (h, w) == target {
            return Ok(self.unary_identity());
        }
        let ry = axis_taps(h, target.0);
        let rx = axis_taps(w, target.1);
        let (th, tw) = target;
        let mut out = vec![0.0; c * th * tw];
        let xd = x.data();
        for ch in 0..c {
            let src = &xd[ch * h * w..(ch + 1) * h * w];
            let dst = &mut out[ch * th * tw..(ch + 1) * th * tw];
            for (oy, ty) in ry.iter().enumerate() {
                for (ox, tx) in rx.iter().enumerate() {
                    dst[oy * tw + ox] = ty.w0 * (tx.w0 * src[ty.i0 * w + tx.i0] + tx.w1 * src[ty.i0 * w + tx.i1])
                        + ty.w1 * (tx.w0 * src[ty.i1 * w + tx.i0] + tx.w1 * src[ty.i1 * w + tx.i1]);
                }
            }
        }
        Ok(self.tape.push(
            Tensor::from_parts(vec![c, th, tw], out),
            &[self],
            Box::new(move |g, _| {
                let mut dx = vec![0.0; c * h * w];
                let gd = g.data();
                for ch in 0..c {
                    let src = &gd[ch * th * tw..(ch + 1) * th * tw];
                    let dst = &mut dx[ch * h * w..(ch + 1) * h * w];
                    for (oy, ty) in ry.iter().enumerate() {
                        for (ox, tx) in rx.iter().enumerate() {
                            let gv = src[oy * tw + ox];
                            dst[ty.i0 * w + tx.i0] += ty.w0 * tx.w0 * gv;
                            dst[ty.i0 * w + tx.i1] += ty.w0 * tx.w1 * gv;
                            dst[ty.i1 * w + tx.i0] += ty.w1 * tx.w0 * gv;
                            dst[ty.i1 * w + tx.i1] += ty.w1 * tx.w1 * gv;
                        }
                    }
                }
                vec![Some(Tensor::from_parts(vec![c, h, w], dx))]
            }),
        ))
    }

    fn unary_identity(self) -> Var<'t> {
        let v = (*self.value()).clone();
        self.tape.push(v, &[self], Box::new(|g, _| vec![Some(g.clone())]))
    }

    /// Scaled dot-product attention core over `[B×L×D]` queries, keys and
    /// values split into `heads` heads of width `D/heads`. No projections.
    pub fn attention(self, key: Var<'t>, value: Var<'t>, heads: usize) -> Result<Var<'t>> {
        let (q, k, v) = (self.value(), key.value(), value.value());
        let qs = q.shape();
        if qs.len() != 3 || k.shape() != qs || v.shape() != qs {
            return Err(Error::dim("attention", qs, k.shape()));
        }
        let (b, l, d) = (qs[0], qs[1], qs[2]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "attention: width {d} not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let counting = PAIR_COUNTER.with(|c| c.get().is_some());
        let mut pairs = 0u64;
        let mut probs = vec![0.0; b * heads * l * l];
        let mut out = vec![0.0; b * l * d];
        let (qd, kd, vd) = (q.data(), k.data(), v.data());
        for bi in 0..b {
            let base = bi * l * d;
            for hh in 0..heads {
                let off = hh * dh;
                let a = &mut probs[(bi * heads + hh) * l * l..(bi * heads + hh + 1) * l * l];
                for i in 0..l {
                    let qi = &qd[base + i * d + off..base + i * d + off + dh];
                    let row = &mut a[i * l..(i + 1) * l];
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in row.iter_mut().enumerate() {
                        let kj = &kd[base + j * d + off..base + j * d + off + dh];
                        *s = scale * qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>();
                        max = max.max(*s);
                        if counting && hh == 0 {
                            pairs += 1;
                        }
                    }
                    let mut total = 0.0;
                    for s in row.iter_mut() {
                        *s = (*s - max).exp();
                        total += *s;
                    }
                    row.iter_mut().for_each(|s| *s /= total);
                    let oi = &mut out[base + i * d + off..base + i * d + off + dh];
                    for (j, &p) in row.iter().enumerate() {
                        let vj = &vd[base + j * d + off..base + j * d + off + dh];
                        for (o, x) in oi.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        if counting {
            PAIR_COUNTER.with(|c| c.set(c.get().map(|n| n + pairs)));
        }
        let shape = qs.to_vec();
        Ok(self.tape.push(
            Tensor::from_parts(shape.clone(), out),
            &[self, key, value],
            Box::new(move |g, _| {
                let gd = g.data();
                let (qd, kd, vd) = (q.data(), k.data(), v.data());
                let mut dq = vec![0.0; qd.len()];
                let mut dk = vec![0.0; kd.len()];
                let mut dv = vec![0.0; vd.len()];
                let mut ds = vec![0.0; l];
                for bi in 0..b {
                    let base = bi * l * d;
                    for hh in 0..heads {
                        let off = hh * dh;
                        let a = &probs[(bi * heads + hh) * l * l..(bi * heads + hh + 1) * l * l];
                        for i in 0..l {
                            let gi = &gd[base + i * d + off..base + i * d + off + dh];
                            let row = &a[i * l..(i + 1) * l];
                            let mut dot = 0.0;
                            for j in 0..l {
                                let vj = &vd[base + j * d + off..base + j * d + off + dh];
                                let da: f64 = gi.iter().zip(vj).map(|(x, y)| x * y).sum();
                                ds[j] = da;
                                dot += row[j] * da;
                                let dvj = &mut dv[base + j * d + off..base + j * d + off + dh];
                                for (o, x) in dvj.iter_mut().zip(gi) {
                                    *o += row[j] * x;
                                }
                            }
                            for j in 0..l {
                                let s = scale * row[j] * (ds[j] - dot);
                                if s == 0.0 {
                                    continue;
                                }
                                for t in 0..dh {
                                    dq[base + i * d + off + t] += s * kd[base + j * d + off + t];
                                    dk[base + j * d + off + t] += s * qd[base + i * d + off + t];
                                }
                            }
                        }
                    }
                }
                vec![
                    Some(Tensor::from_parts(shape.clone(), dq)),
                    Some(Tensor::from_parts(shape.clone(), dk)),
                    Some(Tensor::from_parts(shape.clone(), dv)),
                ]
            }),
        ))
    }
}

#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    w0: f64,
    w1: f64,
}

fn axis_taps(input: usize, output: usize) -> Vec<Tap> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let w1 = src - i0 as f64;
            let w1 = if i1 == i0 { 0.0 } else { w1 };
            Tap {
                i0,
                i1,
                w0: 1.0 - w1,
                w1,
            }
        })
        .collect()
}

#[derive(Clone, Copy)]
struct ConvGeometry {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn source(&self, o: usize, kk: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + kk) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let hw = self.ho * self.wo;
        let mut cols = vec![0.0; self.c_in * self.k * self.k * hw];
        for c in 0..self.c_in {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let Some(iy) = self.source(oy, ky, self.h) else { continue };
                        for ox in 0..self.wo {
                            if let Some(ix) = self.source(ox, kx, self.w) {
                                dst[oy * self.wo + ox] = x[(c * self.h + iy) * self.w + ix];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let hw = self.ho * self.wo;
        let mut x = vec![0.0; self.c_in * self.h * self.w];
        for c in 0..self.c_in {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let Some(iy) = self.source(oy, ky, self.h) else { continue };
                        for ox in 0..self.wo {
                            if let Some(ix) = self.source(ox, kx, self.w) {
                                x[(c * self.h + iy) * self.w + ix] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}
