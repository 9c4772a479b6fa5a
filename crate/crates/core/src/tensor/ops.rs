use super::{Graph, Scalar, Tensor};
use crate::error::{Error, Result};

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            "operand shape",
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    fn unary<F, D>(&self, x: &Tensor<T>, f: F, df: D) -> Tensor<T>
    where
        F: Fn(T) -> T,
        D: Fn(T, T) -> T + 'static,
    {
        let out: Vec<T> = x.data().iter().map(|&v| f(v)).collect();
        let xs = x.arc();
        let ys = std::sync::Arc::new(out.clone());
        self.record(x.shape().to_vec(), out, &[x], move |g| {
            let gx = g
                .iter()
                .zip(xs.iter().zip(ys.iter()))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(gx)]
        })
    }

    pub fn add(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("add", a, b)?;
        let out = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        let (ta, tb) = (a.requires_grad(), b.requires_grad());
        Ok(self.record(a.shape().to_vec(), out, &[a, b], move |g| {
            vec![ta.then(|| g.to_vec()), tb.then(|| g.to_vec())]
        }))
    }

    pub fn sub(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("sub", a, b)?;
        let out = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
        let (ta, tb) = (a.requires_grad(), b.requires_grad());
        Ok(self.record(a.shape().to_vec(), out, &[a, b], move |g| {
            vec![
                ta.then(|| g.to_vec()),
                tb.then(|| g.iter().map(|&v| -v).collect()),
            ]
        }))
    }

    pub fn mul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("mul", a, b)?;
        let out = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        let (ta, tb) = (a.requires_grad(), b.requires_grad());
        let (ad, bd) = (a.arc(), b.arc());
        Ok(self.record(a.shape().to_vec(), out, &[a, b], move |g| {
            vec![
                ta.then(|| g.iter().zip(bd.iter()).map(|(&g, &y)| g * y).collect()),
                tb.then(|| g.iter().zip(ad.iter()).map(|(&g, &x)| g * x).collect()),
            ]
        }))
    }

    pub fn div(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("div", a, b)?;
        let out = a.data().iter().zip(b.data()).map(|(&x, &y)| x / y).collect();
        let (ta, tb) = (a.requires_grad(), b.requires_grad());
        let (ad, bd) = (a.arc(), b.arc());
        Ok(self.record(a.shape().to_vec(), out, &[a, b], move |g| {
            vec![
                ta.then(|| g.iter().zip(bd.iter()).map(|(&g, &y)| g / y).collect()),
                tb.then(|| {
                    g.iter()
                        .zip(ad.iter().zip(bd.iter()))
                        .map(|(&g, (&x, &y))| -g * x / (y * y))
                        .collect()
                }),
            ]
        }))
    }

    pub fn add_scalar(&self, x: &Tensor<T>, s: T) -> Tensor<T> {
        self.unary(x, |v| v + s, |_, _| T::one())
    }

    pub fn mul_scalar(&self, x: &Tensor<T>, s: T) -> Tensor<T> {
        self.unary(x, |v| v * s, move |_, _| s)
    }

    pub fn relu(&self, x: &Tensor<T>) -> Tensor<T> {
        self.unary(
            x,
            |v| v.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self, x: &Tensor<T>) -> Tensor<T> {
        self.unary(x, softplus, |x, _| sigmoid(x))
    }

    pub fn exp(&self, x: &Tensor<T>) -> Tensor<T> {
        self.unary(x, |v| v.exp(), |_, y| y)
    }

    pub fn square(&self, x: &Tensor<T>) -> Tensor<T> {
        self.unary(x, |v| v * v, |x, _| x + x)
    }

    /// Square root of a nonnegative input. The derivative at 0 is taken as 0.
    pub fn sqrt(&self, x: &Tensor<T>) -> Tensor<T> {
        self.unary(
            x,
            |v| v.max(T::zero()).sqrt(),
            |_, y| {
                if y > T::zero() {
                    T::one() / (y + y)
                } else {
                    T::zero()
                }
            },
        )
    }

    /// `max(x, lo)` elementwise.
    pub fn clamp_min(&self, x: &Tensor<T>, lo: T) -> Tensor<T> {
        self.unary(
            x,
            move |v| v.max(lo),
            move |x, _| if x >= lo { T::one() } else { T::zero() },
        )
    }

    /// `min(x, hi)` elementwise.
    pub fn clamp_max(&self, x: &Tensor<T>, hi: T) -> Tensor<T> {
        self.unary(
            x,
            move |v| v.min(hi),
            move |x, _| if x <= hi { T::one() } else { T::zero() },
        )
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self, x: &Tensor<T>) -> Tensor<T> {
        let s = x.data().iter().copied().sum();
        let n = x.numel();
        self.record(Vec::new(), vec![s], &[x], move |g| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self, x: &Tensor<T>) -> Tensor<T> {
        let s = self.sum(x);
        self.mul_scalar(&s, T::one() / T::lit(x.numel() as f64))
    }

    /// Shares the buffer under a new shape.
    pub fn reshape(&self, x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        if n != x.numel() {
            return Err(Error::shape("reshape", "numel", x.numel(), n));
        }
        if !x.requires_grad() {
            let mut t = x.clone();
            t.shape = shape.to_vec();
            return Ok(t);
        }
        Ok(self.record(shape.to_vec(), x.to_vec(), &[x], |g| vec![Some(g.to_vec())]))
    }

    /// Sums over the leading axis: `[d, rest..] -> [rest..]`.
    pub fn sum_axis0(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape().is_empty() {
            return Err(Error::shape("sum_axis0", "rank", ">= 1", 0));
        }
        let d = x.shape()[0];
        let inner = x.numel() / d;
        let mut out = vec![T::zero(); inner];
        for row in x.data().chunks_exact(inner) {
            out.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
        }
        Ok(self.record(x.shape()[1..].to_vec(), out, &[x], move |g| {
            let mut gx = Vec::with_capacity(d * inner);
            for _ in 0..d {
                gx.extend_from_slice(g);
            }
            vec![Some(gx)]
        }))
    }

    /// Repeats `x` `d` times along a new leading axis.
    pub fn broadcast_axis0(&self, x: &Tensor<T>, d: usize) -> Tensor<T> {
        let inner = x.numel();
        let mut out = Vec::with_capacity(d * inner);
        for _ in 0..d {
            out.extend_from_slice(x.data());
        }
        let mut shape = vec![d];
        shape.extend_from_slice(x.shape());
        self.record(shape, out, &[x], move |g| {
            let mut gx = vec![T::zero(); inner];
            for row in g.chunks_exact(inner) {
                gx.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
            }
            vec![Some(gx)]
        })
    }

    /// `x · wᵀ + b` for `x: [m, k]`, `w: [n, k]`, `b: [n]`.
    pub fn linear(&self, x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        x.expect_rank("linear", 2)?;
        w.expect_rank("linear", 2)?;
        let (m, k) = (x.shape()[0], x.shape()[1]);
        let n = w.shape()[0];
        if w.shape()[1] != k {
            return Err(Error::shape("linear", "in_features", k, w.shape()[1]));
        }
        let mut out = vec![T::zero(); m * n];
        if let Some(b) = b {
            if b.shape() != [n] {
                return Err(Error::shape("linear", "bias", n, format!("{:?}", b.shape())));
            }
            for row in out.chunks_exact_mut(n) {
                row.copy_from_slice(b.data());
            }
        }
        T::gemm(m, k, n, x.data(), false, w.data(), true, T::one(), &mut out);
        let (tx, tw, tb) = (
            x.requires_grad(),
            w.requires_grad(),
            b.is_some_and(Tensor::requires_grad),
        );
        let (xd, wd) = (x.arc(), w.arc());
        let mut inputs = vec![x, w];
        if let Some(b) = b {
            inputs.push(b);
        }
        let has_bias = b.is_some();
        Ok(self.record(vec![m, n], out, &inputs, move |g| {
            let gx = tx.then(|| {
                let mut gx = vec![T::zero(); m * k];
                T::gemm(m, n, k, g, false, &wd, false, T::zero(), &mut gx);
                gx
            });
            let gw = tw.then(|| {
                let mut gw = vec![T::zero(); n * k];
                T::gemm(n, m, k, g, true, &xd, false, T::zero(), &mut gw);
                gw
            });
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(tb.then(|| {
                    let mut gb = vec![T::zero(); n];
                    for row in g.chunks_exact(n) {
                        gb.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
                    }
                    gb
                }));
            }
            grads
        }))
    }

    /// Concatenates rank-2 tensors along columns.
    pub fn concat_cols(&self, parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_cols: no inputs"))?;
        let m = first.shape().first().copied().unwrap_or(0);
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            p.expect_rank("concat_cols", 2)?;
            if p.shape()[0] != m {
                return Err(Error::shape("concat_cols", "rows", m, p.shape()[0]));
            }
            widths.push(p.shape()[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
            }
        }
        let tracked: Vec<bool> = parts.iter().map(|p| p.requires_grad()).collect();
        Ok(self.record(vec![m, total], out, parts, move |g| {
            let mut off = 0;
            tracked
                .iter()
                .zip(&widths)
                .map(|(&t, &w)| {
                    let o = off;
                    off += w;
                    t.then(|| {
                        let mut gp = Vec::with_capacity(m * w);
                        for r in 0..m {
                            gp.extend_from_slice(&g[r * total + o..r * total + o + w]);
                        }
                        gp
                    })
                })
                .collect()
        }))
    }

    /// Concatenates tensors along the leading axis; trailing dims must agree.
    pub fn concat0(&self, parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat0: no inputs"))?;
        if first.shape().is_empty() {
            return Err(Error::shape("concat0", "rank", ">= 1", 0));
        }
        let tail = first.shape()[1..].to_vec();
        let mut lead = 0;
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            if p.shape().len() != tail.len() + 1 || p.shape()[1..] != tail[..] {
                return Err(Error::shape(
                    "concat0",
                    "trailing dims",
                    format!("{tail:?}"),
                    format!("{:?}", p.shape()),
                ));
            }
            lead += p.shape()[0];
            lens.push(p.numel());
        }
        let mut out = Vec::with_capacity(lens.iter().sum());
        for p in parts {
            out.extend_from_slice(p.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let tracked: Vec<bool> = parts.iter().map(|p| p.requires_grad()).collect();
        Ok(self.record(shape, out, parts, move |g| {
            let mut off = 0;
            tracked
                .iter()
                .zip(&lens)
                .map(|(&t, &n)| {
                    let o = off;
                    off += n;
                    t.then(|| g[o..o + n].to_vec())
                })
                .collect()
        }))
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&self, x: &Tensor<T>, start: usize, end: usize) -> Result<Tensor<T>> {
        x.expect_rank("slice_cols", 2)?;
        let (m, k) = (x.shape()[0], x.shape()[1]);
        if start >= end || end > k {
            return Err(Error::shape("slice_cols", "column range", format!("within 0..{k}"), format!("{start}..{end}")));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for row in x.data().chunks_exact(k) {
            out.extend_from_slice(&row[start..end]);
        }
        Ok(self.record(vec![m, w], out, &[x], move |g| {
            let mut gx = vec![T::zero(); m * k];
            for (r, gr) in g.chunks_exact(w).enumerate() {
                gx[r * k + start..r * k + end].copy_from_slice(gr);
            }
            vec![Some(gx)]
        }))
    }

    /// Entries `start..end` along the leading axis.
    pub fn slice0(&self, x: &Tensor<T>, start: usize, end: usize) -> Result<Tensor<T>> {
        if x.shape().is_empty() || start >= end || end > x.shape()[0] {
            return Err(Error::shape("slice0", "leading range", format!("{:?}", x.shape()), format!("{start}..{end}")));
        }
        let inner = x.numel() / x.shape()[0];
        let n = x.numel();
        let out = x.data()[start * inner..end * inner].to_vec();
        let mut shape = x.shape().to_vec();
        shape[0] = end - start;
        Ok(self.record(shape, out, &[x], move |g| {
            let mut gx = vec![T::zero(); n];
            gx[start * inner..end * inner].copy_from_slice(g);
            vec![Some(gx)]
        }))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.expect_rank("transpose", 2)?;
        let (a, b) = (x.shape()[0], x.shape()[1]);
        let out = transpose_buf(x.data(), a, b);
        Ok(self.record(vec![b, a], out, &[x], move |g| vec![Some(transpose_buf(g, b, a))]))
    }

    /// Rows `idx` of a rank-2 tensor (repeats allowed).
    pub fn gather_rows(&self, x: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
        x.expect_rank("gather_rows", 2)?;
        let (n, k) = (x.shape()[0], x.shape()[1]);
        let mut out = Vec::with_capacity(idx.len() * k);
        for &i in idx {
            if i >= n {
                return Err(Error::shape("gather_rows", "row index", format!("< {n}"), i));
            }
            out.extend_from_slice(&x.data()[i * k..(i + 1) * k]);
        }
        let idx = idx.to_vec();
        Ok(self.record(vec![idx.len(), k], out, &[x], move |g| {
            let mut gx = vec![T::zero(); n * k];
            for (r, &i) in idx.iter().enumerate() {
                gx[i * k..(i + 1) * k]
                    .iter_mut()
                    .zip(&g[r * k..(r + 1) * k])
                    .for_each(|(o, &v)| *o += v);
            }
            vec![Some(gx)]
        }))
    }

    /// Softmax along `axis`, stabilized by subtracting the axis maximum.
    pub fn softmax_axis(&self, x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
        let shape = x.shape();
        if axis >= shape.len() {
            return Err(Error::shape("softmax_axis", "axis", format!("< {}", shape.len()), axis));
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let xd = x.data();
        let mut out = vec![T::zero(); x.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = T::neg_infinity();
                for a in 0..len {
                    mx = mx.max(xd[base + a * inner]);
                }
                let mut s = T::zero();
                for a in 0..len {
                    let e = (xd[base + a * inner] - mx).exp();
                    out[base + a * inner] = e;
                    s += e;
                }
                for a in 0..len {
                    out[base + a * inner] /= s;
                }
            }
        }
        let y = std::sync::Arc::new(out.clone());
        Ok(self.record(shape.to_vec(), out, &[x], move |g| {
            let mut gx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let dot: T = (0..len).map(|a| g[base + a * inner] * y[base + a * inner]).sum();
                    for a in 0..len {
                        let j = base + a * inner;
                        gx[j] = y[j] * (g[j] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Bilinear upsampling of `[c, h, w]` by an integer factor. Output pixel
    /// `(y, x)` reads input coordinate `(y / factor, x / factor)`, clamped to
    /// the last row/column (pixel-center origin convention).
    pub fn upsample_bilinear(&self, x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
        x.expect_rank("upsample_bilinear", 3)?;
        if factor == 0 {
            return Err(Error::invalid("upsample_bilinear: factor must be >= 1"));
        }
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (oh, ow) = (h * factor, w * factor);
        let taps = |o: usize, n: usize| -> (usize, usize, T) {
            let s = (o as f64 / factor as f64).min((n - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, T::lit(s - i0 as f64))
        };
        let ys: Vec<_> = (0..oh).map(|o| taps(o, h)).collect();
        let xs: Vec<_> = (0..ow).map(|o| taps(o, w)).collect();
        let xd = x.data();
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            let src = &xd[ch * h * w..(ch + 1) * h * w];
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                    out[(ch * oh + oy) * ow + ox] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
        Ok(self.record(vec![c, oh, ow], out, &[x], move |g| {
            let mut gx = vec![T::zero(); c * h * w];
            for ch in 0..c {
                let dst = &mut gx[ch * h * w..(ch + 1) * h * w];
                for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                        let gv = g[(ch * oh + oy) * ow + ox];
                        let (gt, gb) = (gv * (T::one() - fy), gv * fy);
                        dst[y0 * w + x0] += gt * (T::one() - fx);
                        dst[y0 * w + x1] += gt * fx;
                        dst[y1 * w + x0] += gb * (T::one() - fx);
                        dst[y1 * w + x1] += gb * fx;
                    }
                }
            }
            vec![Some(gx)]
        }))
    }
}

pub(crate) fn transpose_buf<T: Copy>(x: &[T], a: usize, b: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(a * b);
    for j in 0..b {
        for i in 0..a {
            out.push(x[i * b + j]);
        }
    }
    out
}

pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
