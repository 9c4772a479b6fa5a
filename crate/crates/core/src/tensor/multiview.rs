//! Ops that reduce across a variable set of views with per-row validity.

use super::{Graph, Scalar, Tensor};
use crate::error::{Error, Result};

fn check_parts<T: Scalar>(op: &'static str, parts: &[&Tensor<T>], masks: &[&[bool]]) -> Result<(usize, usize)> {
    let first = parts.first().ok_or_else(|| Error::invalid(format!("{op}: no views")))?;
    first.expect_rank(op, 2)?;
    let (m, c) = (first.shape()[0], first.shape()[1]);
    if masks.len() != parts.len() {
        return Err(Error::shape(op, "mask count", parts.len(), masks.len()));
    }
    for (p, mk) in parts.iter().zip(masks) {
        if p.shape() != [m, c] {
            return Err(Error::shape(op, "view shape", format!("[{m}, {c}]"), format!("{:?}", p.shape())));
        }
        if mk.len() != m {
            return Err(Error::shape(op, "mask length", m, mk.len()));
        }
    }
    Ok((m, c))
}

impl<T: Scalar> Graph<T> {
    /// Per-row mean and population variance across views, counting only
    /// views whose mask is set. `parts` are `[m, c]`; the result is
    /// `[m, 2c]` (mean then variance). Rows with no valid view are zero.
    pub fn masked_moments(&self, parts: &[&Tensor<T>], masks: &[&[bool]]) -> Result<Tensor<T>> {
        let (m, c) = check_parts("masked_moments", parts, masks)?;
        let mut out = vec![T::zero(); m * 2 * c];
        let mut inv_n = vec![T::zero(); m];
        for r in 0..m {
            let n = masks.iter().filter(|mk| mk[r]).count();
            if n == 0 {
                continue;
            }
            let inv = T::one() / T::lit(n as f64);
            inv_n[r] = inv;
            let row = &mut out[r * 2 * c..(r + 1) * 2 * c];
            for (p, mk) in parts.iter().zip(masks) {
                if mk[r] {
                    for (o, &v) in row[..c].iter_mut().zip(&p.data()[r * c..(r + 1) * c]) {
                        *o += v;
                    }
                }
            }
            row[..c].iter_mut().for_each(|v| *v *= inv);
            for (p, mk) in parts.iter().zip(masks) {
                if mk[r] {
                    for j in 0..c {
                        let d = p.data()[r * c + j] - row[j];
                        row[c + j] += d * d;
                    }
                }
            }
            row[c..].iter_mut().for_each(|v| *v *= inv);
        }
        let saved: Vec<_> = parts.iter().map(|p| p.requires_grad().then(|| p.arc())).collect();
        let masks: Vec<Vec<bool>> = masks.iter().map(|m| m.to_vec()).collect();
        let stats = std::sync::Arc::new(out.clone());
        Ok(self.record(vec![m, 2 * c], out, parts, move |g| {
            saved
                .iter()
                .zip(&masks)
                .map(|(p, mk)| {
                    let p = p.as_ref()?;
                    let mut gp = vec![T::zero(); m * c];
                    for r in 0..m {
                        if !mk[r] {
                            continue;
                        }
                        let inv = inv_n[r];
                        for j in 0..c {
                            let mean = stats[r * 2 * c + j];
                            let (gm, gv) = (g[r * 2 * c + j], g[r * 2 * c + c + j]);
                            gp[r * c + j] = inv * (gm + T::lit(2.0) * gv * (p[r * c + j] - mean));
                        }
                    }
                    Some(gp)
                })
                .collect()
        }))
    }

    /// Row-wise softmax of `logits [m, n]` restricted to entries whose mask
    /// is set; masked entries get weight 0, rows with no valid entry are all 0.
    pub fn masked_softmax_rows(&self, logits: &Tensor<T>, mask: &[bool]) -> Result<Tensor<T>> {
        logits.expect_rank("masked_softmax_rows", 2)?;
        if mask.len() != logits.numel() {
            return Err(Error::shape("masked_softmax_rows", "mask length", logits.numel(), mask.len()));
        }
        let (m, n) = (logits.shape()[0], logits.shape()[1]);
        let x = logits.data();
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let row = r * n..(r + 1) * n;
            let mx = row
                .clone()
                .filter(|&i| mask[i])
                .map(|i| x[i])
                .fold(T::neg_infinity(), T::max);
            if mx == T::neg_infinity() {
                continue;
            }
            let mut s = T::zero();
            for i in row.clone() {
                if mask[i] {
                    out[i] = (x[i] - mx).exp();
                    s += out[i];
                }
            }
            for i in row {
                out[i] /= s;
            }
        }
        let y = std::sync::Arc::new(out.clone());
        Ok(self.record(vec![m, n], out, &[logits], move |g| {
            let mut gx = vec![T::zero(); m * n];
            for r in 0..m {
                let row = r * n..(r + 1) * n;
                let dot: T = row.clone().map(|i| g[i] * y[i]).sum();
                for i in row {
                    gx[i] = y[i] * (g[i] - dot);
                }
            }
            vec![Some(gx)]
        }))
    }

    /// `out[r] = Σ_i weights[r, i] · parts[i][r]` for `weights [m, n]` and
    /// `n` parts of shape `[m, c]`.
    pub fn weighted_sum(&self, weights: &Tensor<T>, parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        weights.expect_rank("weighted_sum", 2)?;
        let (m, n) = (weights.shape()[0], weights.shape()[1]);
        if parts.len() != n {
            return Err(Error::shape("weighted_sum", "part count", n, parts.len()));
        }
        let all_valid = vec![true; m];
        let masks: Vec<&[bool]> = vec![&all_valid; n];
        let (_, c) = check_parts("weighted_sum", parts, &masks)?;
        let w = weights.data();
        let mut out = vec![T::zero(); m * c];
        for (i, p) in parts.iter().enumerate() {
            let pd = p.data();
            for r in 0..m {
                let wi = w[r * n + i];
                for j in 0..c {
                    out[r * c + j] += wi * pd[r * c + j];
                }
            }
        }
        let wa = weights.arc();
        let tw = weights.requires_grad();
        let saved: Vec<_> = parts.iter().map(|p| p.arc()).collect();
        let tracked: Vec<bool> = parts.iter().map(|p| p.requires_grad()).collect();
        let mut inputs = vec![weights];
        inputs.extend_from_slice(parts);
        Ok(self.record(vec![m, c], out, &inputs, move |g| {
            let mut grads = Vec::with_capacity(n + 1);
            grads.push(tw.then(|| {
                let mut gw = vec![T::zero(); m * n];
                for (i, p) in saved.iter().enumerate() {
                    for r in 0..m {
                        gw[r * n + i] = (0..c).map(|j| g[r * c + j] * p[r * c + j]).sum();
                    }
                }
                gw
            }));
            for (i, &t) in tracked.iter().enumerate() {
                grads.push(t.then(|| {
                    let mut gp = vec![T::zero(); m * c];
                    for r in 0..m {
                        let wi = wa[r * n + i];
                        for j in 0..c {
                            gp[r * c + j] = wi * g[r * c + j];
                        }
                    }
                    gp
                }));
            }
            grads
        }))
    }

    /// Scales row `r` of `x [m, c]` by the constant `s[r]`.
    pub fn scale_rows(&self, x: &Tensor<T>, s: &[T]) -> Result<Tensor<T>> {
        x.expect_rank("scale_rows", 2)?;
        let (m, c) = (x.shape()[0], x.shape()[1]);
        if s.len() != m {
            return Err(Error::shape("scale_rows", "scale length", m, s.len()));
        }
        let out = x
            .data()
            .chunks_exact(c)
            .zip(s)
            .flat_map(|(row, &k)| row.iter().map(move |&v| v * k))
            .collect();
        let s = s.to_vec();
        Ok(self.record(vec![m, c], out, &[x], move |g| {
            let gx = g
                .chunks_exact(c)
                .zip(&s)
                .flat_map(|(row, &k)| row.iter().map(move |&v| v * k))
                .collect();
            vec![Some(gx)]
        }))
    }
}
