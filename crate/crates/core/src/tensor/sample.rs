//! Bilinear / trilinear sampling at continuous pixel coordinates.
//!
//! Coordinates are in pixel units with the origin at the center of the first
//! element. A sample is valid when every coordinate lies inside
//! `[0, size - 1]`; invalid samples read as zero and carry no gradient.

use super::{Graph, Scalar, Tensor};
use crate::error::{Error, Result};

/// Lower tap index, upper tap index and fractional weight along one axis.
#[inline]
fn taps<T: Scalar>(x: T, n: usize) -> Option<(usize, usize, T)> {
    if !(x >= T::zero() && x <= T::lit((n - 1) as f64)) {
        return None;
    }
    let mut i0 = x.floor().to_usize().unwrap_or(0);
    if n > 1 {
        i0 = i0.min(n - 2);
    } else {
        i0 = 0;
    }
    let i1 = (i0 + 1).min(n - 1);
    Some((i0, i1, x - T::lit(i0 as f64)))
}

impl<T: Scalar> Graph<T> {
    /// Samples `feature [c, h, w]` at `coords [m, 2]` (`x` = column, `y` = row).
    /// Returns `[m, c]` values and a per-sample validity flag. Differentiable
    /// with respect to both the feature map and the coordinates.
    pub fn grid_sample_2d(&self, feature: &Tensor<T>, coords: &Tensor<T>) -> Result<(Tensor<T>, Vec<bool>)> {
        feature.expect_rank("grid_sample_2d", 3)?;
        coords.expect_rank("grid_sample_2d", 2)?;
        if coords.shape()[1] != 2 {
            return Err(Error::shape("grid_sample_2d", "coordinate width", 2, coords.shape()[1]));
        }
        let (c, h, w) = (feature.shape()[0], feature.shape()[1], feature.shape()[2]);
        let m = coords.shape()[0];
        let hw = h * w;
        let fd = feature.data();
        let cd = coords.data();
        let mut taps_all = Vec::with_capacity(m);
        let mut valid = Vec::with_capacity(m);
        let mut out = vec![T::zero(); m * c];
        for i in 0..m {
            let t = taps(cd[2 * i], w).zip(taps(cd[2 * i + 1], h));
            valid.push(t.is_some());
            taps_all.push(t);
            let Some(((x0, x1, fx), (y0, y1, fy))) = t else { continue };
            let (w00, w01) = ((T::one() - fx) * (T::one() - fy), fx * (T::one() - fy));
            let (w10, w11) = ((T::one() - fx) * fy, fx * fy);
            let (i00, i01, i10, i11) = (y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1);
            let row = &mut out[i * c..(i + 1) * c];
            for (ch, o) in row.iter_mut().enumerate() {
                let f = &fd[ch * hw..(ch + 1) * hw];
                *o = w00 * f[i00] + w01 * f[i01] + w10 * f[i10] + w11 * f[i11];
            }
        }
        let (tf, tc) = (feature.requires_grad(), coords.requires_grad());
        let fdata = feature.arc();
        let n = feature.numel();
        let t = self.record(vec![m, c], out, &[feature, coords], move |g| {
            let mut gf = tf.then(|| vec![T::zero(); n]);
            let mut gc = tc.then(|| vec![T::zero(); m * 2]);
            for (i, t) in taps_all.iter().enumerate() {
                let Some(((x0, x1, fx), (y0, y1, fy))) = *t else { continue };
                let (i00, i01, i10, i11) = (y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1);
                let gr = &g[i * c..(i + 1) * c];
                if let Some(gf) = gf.as_mut() {
                    let (w00, w01) = ((T::one() - fx) * (T::one() - fy), fx * (T::one() - fy));
                    let (w10, w11) = ((T::one() - fx) * fy, fx * fy);
                    for (ch, &gv) in gr.iter().enumerate() {
                        let f = &mut gf[ch * hw..(ch + 1) * hw];
                        f[i00] += gv * w00;
                        f[i01] += gv * w01;
                        f[i10] += gv * w10;
                        f[i11] += gv * w11;
                    }
                }
                if let Some(gc) = gc.as_mut() {
                    let (mut gx, mut gy) = (T::zero(), T::zero());
                    for (ch, &gv) in gr.iter().enumerate() {
                        let f = &fdata[ch * hw..(ch + 1) * hw];
                        let (f00, f01, f10, f11) = (f[i00], f[i01], f[i10], f[i11]);
                        gx += gv * ((T::one() - fy) * (f01 - f00) + fy * (f11 - f10));
                        gy += gv * ((T::one() - fx) * (f10 - f00) + fx * (f11 - f01));
                    }
                    // Degenerate single-pixel axes have no slope.
                    if x0 != x1 {
                        gc[2 * i] = gx;
                    }
                    if y0 != y1 {
                        gc[2 * i + 1] = gy;
                    }
                }
            }
            vec![gf, gc]
        });
        Ok((t, valid))
    }

    /// Samples `volume [c, d, h, w]` at `coords [m, 3]` (`x` = width,
    /// `y` = height, `z` = depth index). Returns `[m, c]` and validity flags.
    pub fn grid_sample_3d(&self, volume: &Tensor<T>, coords: &Tensor<T>) -> Result<(Tensor<T>, Vec<bool>)> {
        volume.expect_rank("grid_sample_3d", 4)?;
        coords.expect_rank("grid_sample_3d", 2)?;
        if coords.shape()[1] != 3 {
            return Err(Error::shape("grid_sample_3d", "coordinate width", 3, coords.shape()[1]));
        }
        let s = volume.shape();
        let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
        let m = coords.shape()[0];
        let dhw = d * h * w;
        let vd = volume.data();
        let cd = coords.data();
        let mut taps_all = Vec::with_capacity(m);
        let mut valid = Vec::with_capacity(m);
        let mut out = vec![T::zero(); m * c];
        for i in 0..m {
            let t = match (taps(cd[3 * i], w), taps(cd[3 * i + 1], h), taps(cd[3 * i + 2], d)) {
                (Some(a), Some(b), Some(z)) => Some((a, b, z)),
                _ => None,
            };
            valid.push(t.is_some());
            taps_all.push(t);
            let Some((tx, ty, tz)) = t else { continue };
            let corners = corners3(tx, ty, tz, h, w);
            let row = &mut out[i * c..(i + 1) * c];
            for (ch, o) in row.iter_mut().enumerate() {
                let f = &vd[ch * dhw..(ch + 1) * dhw];
                *o = corners.iter().map(|&(idx, wt)| wt * f[idx]).sum();
            }
        }
        let (tv, tc) = (volume.requires_grad(), coords.requires_grad());
        let vdata = volume.arc();
        let n = volume.numel();
        let t = self.record(vec![m, c], out, &[volume, coords], move |g| {
            let mut gv = tv.then(|| vec![T::zero(); n]);
            let mut gc = tc.then(|| vec![T::zero(); m * 3]);
            for (i, t) in taps_all.iter().enumerate() {
                let Some((tx, ty, tz)) = *t else { continue };
                let gr = &g[i * c..(i + 1) * c];
                if let Some(gv) = gv.as_mut() {
                    let corners = corners3(tx, ty, tz, h, w);
                    for (ch, &gval) in gr.iter().enumerate() {
                        let f = &mut gv[ch * dhw..(ch + 1) * dhw];
                        for &(idx, wt) in &corners {
                            f[idx] += gval * wt;
                        }
                    }
                }
                if let Some(gc) = gc.as_mut() {
                    let ((x0, x1, fx), (y0, y1, fy), (z0, z1, fz)) = (tx, ty, tz);
                    let one = T::one();
                    let mut acc = [T::zero(); 3];
                    for (ch, &gval) in gr.iter().enumerate() {
                        let f = &vdata[ch * dhw..(ch + 1) * dhw];
                        let at = |z: usize, y: usize, x: usize| f[(z * h + y) * w + x];
                        // d/dx
                        let dx = (one - fz) * ((one - fy) * (at(z0, y0, x1) - at(z0, y0, x0)) + fy * (at(z0, y1, x1) - at(z0, y1, x0)))
                            + fz * ((one - fy) * (at(z1, y0, x1) - at(z1, y0, x0)) + fy * (at(z1, y1, x1) - at(z1, y1, x0)));
                        let dy = (one - fz) * ((one - fx) * (at(z0, y1, x0) - at(z0, y0, x0)) + fx * (at(z0, y1, x1) - at(z0, y0, x1)))
                            + fz * ((one - fx) * (at(z1, y1, x0) - at(z1, y0, x0)) + fx * (at(z1, y1, x1) - at(z1, y0, x1)));
                        let dz = (one - fy) * ((one - fx) * (at(z1, y0, x0) - at(z0, y0, x0)) + fx * (at(z1, y0, x1) - at(z0, y0, x1)))
                            + fy * ((one - fx) * (at(z1, y1, x0) - at(z0, y1, x0)) + fx * (at(z1, y1, x1) - at(z0, y1, x1)));
                        acc[0] += gval * dx;
                        acc[1] += gval * dy;
                        acc[2] += gval * dz;
                    }
                    let live = [x0 != x1, y0 != y1, z0 != z1];
                    for a in 0..3 {
                        if live[a] {
                            gc[3 * i + a] = acc[a];
                        }
                    }
                }
            }
            vec![gv, gc]
        });
        Ok((t, valid))
    }
}

type Tap<T> = (usize, usize, T);

fn corners3<T: Scalar>(tx: Tap<T>, ty: Tap<T>, tz: Tap<T>, h: usize, w: usize) -> [(usize, T); 8] {
    let ((x0, x1, fx), (y0, y1, fy), (z0, z1, fz)) = (tx, ty, tz);
    let one = T::one();
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    [
        (idx(z0, y0, x0), (one - fz) * (one - fy) * (one - fx)),
        (idx(z0, y0, x1), (one - fz) * (one - fy) * fx),
        (idx(z0, y1, x0), (one - fz) * fy * (one - fx)),
        (idx(z0, y1, x1), (one - fz) * fy * fx),
        (idx(z1, y0, x0), fz * (one - fy) * (one - fx)),
        (idx(z1, y0, x1), fz * (one - fy) * fx),
        (idx(z1, y1, x0), fz * fy * (one - fx)),
        (idx(z1, y1, x1), fz * fy * fx),
    ]
}
