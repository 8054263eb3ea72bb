//! Elementwise, reduction, shape and matrix ops on [`Var`].

use std::rc::Rc;

use super::tape::Var;
use super::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};
use crate::error::{Error, Result};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

impl<'t> Var<'t> {
    fn unary(
        self,
        value: Tensor,
        backward: impl Fn(&Tensor) -> Tensor + 'static,
    ) -> Var<'t> {
        self.tape
            .push(value, &[self], Box::new(move |g, _| vec![Some(backward(g))]))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x + y);
        Ok(self.tape.push(
            out,
            &[self, other],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]),
        ))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x - y);
        Ok(self.tape.push(
            out,
            &[self, other],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.map(|v| -v))]),
        ))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x * y);
        Ok(self.tape.push(
            out,
            &[self, other],
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.zip_map(&b, |gv, bv| gv * bv)),
                    needs[1].then(|| g.zip_map(&a, |gv, av| gv * av)),
                ]
            }),
        ))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let out = self.value().map(|v| v * c);
        self.unary(out, move |g| g.map(|v| v * c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let out = self.value().map(|v| v + c);
        self.unary(out, |g| g.clone())
    }

    /// `1 - x`
    pub fn one_minus(self) -> Var<'t> {
        let out = self.value().map(|v| 1.0 - v);
        self.unary(out, |g| g.map(|v| -v))
    }

    pub fn square(self) -> Var<'t> {
        let x = self.value();
        let out = x.map(|v| v * v);
        self.unary(out, move |g| g.zip_map(&x, |gv, xv| 2.0 * gv * xv))
    }

    pub fn powf(self, p: f64) -> Var<'t> {
        let x = self.value();
        let out = x.map(|v| v.powf(p));
        self.unary(out, move |g| {
            g.zip_map(&x, |gv, xv| {
                if p == 0.0 {
                    0.0
                } else {
                    gv * p * xv.powf(p - 1.0)
                }
            })
        })
    }

    pub fn ln(self) -> Var<'t> {
        let x = self.value();
        let out = x.map(f64::ln);
        self.unary(out, move |g| g.zip_map(&x, |gv, xv| gv / xv))
    }

    pub fn exp(self) -> Var<'t> {
        let out = Rc::new(self.value().map(f64::exp));
        let y = Rc::clone(&out);
        self.unary((*out).clone(), move |g| g.zip_map(&y, |gv, yv| gv * yv))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping was active.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        let x = self.value();
        let out = x.map(|v| v.clamp(lo, hi));
        self.unary(out, move |g| {
            g.zip_map(&x, |gv, xv| if xv < lo || xv > hi { 0.0 } else { gv })
        })
    }

    pub fn sigmoid(self) -> Var<'t> {
        let y = Rc::new(self.value().map(sigmoid));
        let yc = Rc::clone(&y);
        self.unary((*y).clone(), move |g| {
            g.zip_map(&yc, |gv, yv| gv * yv * (1.0 - yv))
        })
    }

    pub fn relu(self) -> Var<'t> {
        self.leaky_relu(0.0)
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        let x = self.value();
        let out = x.map(|v| if v > 0.0 { v } else { slope * v });
        self.unary(out, move |g| {
            g.zip_map(&x, |gv, xv| if xv > 0.0 { gv } else { slope * gv })
        })
    }

    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.unary(Tensor::scalar(x.sum()), move |g| Tensor::full(&shape, g.item()))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let out = x.reshape(shape)?;
        let orig = x.shape().to_vec();
        Ok(self.unary(out, move |g| Tensor::from_parts(orig.clone(), g.data().to_vec())))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let nd = x.ndim();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim("permute", x.shape(), axes));
        }
        let out = permute_tensor(&x, axes);
        let mut inverse = vec![0; nd];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(self.unary(out, move |g| permute_tensor(g, &inverse)))
    }

    /// Contiguous slice `[start, start+len)` along axis 0.
    pub fn narrow0(self, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let rows = x.shape()[0];
        if len == 0 || start + len > rows {
            return Err(Error::dim("narrow0", x.shape(), &[start, len]));
        }
        let inner: usize = x.shape()[1..].iter().product();
        let mut shape = x.shape().to_vec();
        shape[0] = len;
        let out = Tensor::from_parts(
            shape,
            x.data()[start * inner..(start + len) * inner].to_vec(),
        );
        let full = x.shape().to_vec();
        Ok(self.unary(out, move |g| {
            let mut d = Tensor::zeros(&full);
            d.data_mut()[start * inner..(start + len) * inner].copy_from_slice(g.data());
            d
        }))
    }

    /// Gathers rows along axis 0 (indices may repeat).
    pub fn index_rows(self, rows: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let n = x.shape()[0];
        if rows.is_empty() || rows.iter().any(|&r| r >= n) {
            return Err(Error::dim("index_rows", x.shape(), rows));
        }
        let inner: usize = x.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            data.extend_from_slice(&x.data()[r * inner..(r + 1) * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = rows.len();
        let full = x.shape().to_vec();
        let rows = rows.to_vec();
        Ok(self.unary(Tensor::from_parts(shape, data), move |g| {
            let mut d = Tensor::zeros(&full);
            for (i, &r) in rows.iter().enumerate() {
                let src = &g.data()[i * inner..(i + 1) * inner];
                for (o, s) in d.data_mut()[r * inner..(r + 1) * inner].iter_mut().zip(src) {
                    *o += s;
                }
            }
            d
        }))
    }

    /// 2-D matrix product.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::dim("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(a.data(), b.data(), &mut out, m, k, n);
        Ok(self.tape.push(
            Tensor::from_parts(vec![m, n], out),
            &[self, other],
            Box::new(move |g, needs| {
                let da = needs[0].then(|| {
                    let mut d = vec![0.0; m * k];
                    gemm_nt_acc(g.data(), b.data(), &mut d, m, n, k);
                    Tensor::from_parts(vec![m, k], d)
                });
                let db = needs[1].then(|| {
                    let mut d = vec![0.0; k * n];
                    gemm_tn_acc(a.data(), g.data(), &mut d, k, m, n);
                    Tensor::from_parts(vec![k, n], d)
                });
                vec![da, db]
            }),
        ))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (x, b) = (self.value(), bias.value());
        if x.ndim() != 2 || b.len() != x.shape()[1] {
            return Err(Error::dim("add_row_bias", x.shape(), b.shape()));
        }
        let n = x.shape()[1];
        let out = Tensor::from_fn(x.shape(), |i| x.data()[i] + b.data()[i % n]);
        let bshape = b.shape().to_vec();
        Ok(self.tape.push(
            out,
            &[self, bias],
            Box::new(move |g, needs| {
                let db = needs[1].then(|| {
                    let mut d = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (o, v) in d.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    Tensor::from_parts(bshape.clone(), d)
                });
                vec![Some(g.clone()), db]
            }),
        ))
    }

    /// Adds `bias[c]` to every element of channel `c` of a `[C×...]` tensor.
    pub fn add_channel_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (x, b) = (self.value(), bias.value());
        let c = x.shape()[0];
        if b.len() != c {
            return Err(Error::dim("add_channel_bias", x.shape(), b.shape()));
        }
        let inner = x.len() / c;
        let out = Tensor::from_fn(x.shape(), |i| x.data()[i] + b.data()[i / inner]);
        let bshape = b.shape().to_vec();
        Ok(self.tape.push(
            out,
            &[self, bias],
            Box::new(move |g, needs| {
                let db = needs[1].then(|| {
                    Tensor::from_parts(
                        bshape.clone(),
                        g.data().chunks(inner).map(|ch| ch.iter().sum()).collect(),
                    )
                });
                vec![Some(g.clone()), db]
            }),
        ))
    }

    /// `x · w + b` on the last axis of an arbitrary-rank input.
    pub fn linear(self, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        let shape = self.shape();
        let d_in = *shape.last().unwrap();
        let rows = self.value().len() / d_in;
        let w_shape = weight.shape();
        if w_shape.len() != 2 || w_shape[0] != d_in {
            return Err(Error::dim("linear", &shape, &w_shape));
        }
        let mut y = self.reshape(&[rows, d_in])?.matmul(weight)?;
        if let Some(b) = bias {
            y = y.add_row_bias(b)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = w_shape[1];
        y.reshape(&out_shape)
    }

    /// Numerically stabilised softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.ndim() {
            return Err(Error::dim("softmax", x.shape(), &[axis]));
        }
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let mut y = x.as_ref().clone();
        {
            let d = y.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let max = (0..len).map(|j| d[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for j in 0..len {
                        let e = (d[at(j)] - max).exp();
                        d[at(j)] = e;
                        total += e;
                    }
                    for j in 0..len {
                        d[at(j)] /= total;
                    }
                }
            }
        }
        let y = Rc::new(y);
        let yc = Rc::clone(&y);
        Ok(self.unary((*y).clone(), move |g| {
            let mut dx = Tensor::zeros(yc.shape());
            let (yd, gd) = (yc.data(), g.data());
            let out = dx.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let dot: f64 = (0..len).map(|j| yd[at(j)] * gd[at(j)]).sum();
                    for j in 0..len {
                        out[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
                    }
                }
            }
            dx
        }))
    }
}

/// Concatenates along `axis`; all other dims must agree.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Config("concat of zero tensors".into()))?;
    let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let base = values[0].shape().to_vec();
    if axis >= base.len() {
        return Err(Error::dim("concat", &base, &[axis]));
    }
    for v in &values[1..] {
        let s = v.shape();
        if s.len() != base.len()
            || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(Error::dim("concat", &base, s));
        }
    }
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    let total: usize = lens.iter().sum();
    let mut shape = base.clone();
    shape[axis] = total;
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &l) in values.iter().zip(&lens) {
            data.extend_from_slice(&v.data()[o * l * inner..(o + 1) * l * inner]);
        }
    }
    let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
    Ok(first.tape.push(
        Tensor::from_parts(shape, data),
        parts,
        Box::new(move |g, needs| {
            let mut offset = 0;
            let mut grads = Vec::with_capacity(lens.len());
            for ((&l, s), &need) in lens.iter().zip(&shapes).zip(needs) {
                if need {
                    let mut d = Vec::with_capacity(outer * l * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        d.extend_from_slice(&g.data()[start..start + l * inner]);
                    }
                    grads.push(Some(Tensor::from_parts(s.clone(), d)));
                } else {
                    grads.push(None);
                }
                offset += l;
            }
            grads
        }),
    ))
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn permute_tensor(x: &Tensor, axes: &[usize]) -> Tensor {
    let in_shape = x.shape();
    let in_strides = Tensor::strides(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.len();
    let nd = axes.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; nd];
    let mut src = 0usize;
    let data = x.data();
    for _ in 0..n {
        out.push(data[src]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}
