//! Convolutions lowered to im2col + GEMM.

use super::{Graph, Scalar, Tensor};
use crate::error::{Error, Result};

/// Geometry of a 3D cross-correlation (`depth`, `height`, `width`). 2D
/// convolutions use depth 1 with a depth-1 kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    pub fn output(&self) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let span = self.input[a] + 2 * self.padding[a];
            if span < self.kernel[a] || self.stride[a] == 0 {
                return None;
            }
            out[a] = (span - self.kernel[a]) / self.stride[a] + 1;
        }
        Some(out)
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel.iter().product::<usize>()
    }

    fn in_len(&self) -> usize {
        self.channels * self.input.iter().product::<usize>()
    }
}

/// For one kernel tap along one axis: the range of output positions whose
/// input index lies inside the image, as `(first, last_exclusive)`.
fn valid_range(n_in: usize, n_out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // input index = o * stride + k - pad must be in [0, n_in)
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if n_in + pad > k {
        ((n_in + pad - k - 1) / stride + 1).min(n_out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(g: &ConvGeometry, input: &[T]) -> Vec<T> {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let [od, oh, ow] = g.output().expect("validated geometry");
    let p = od * oh * ow;
    let mut col = vec![T::zero(); g.rows() * p];
    for c in 0..g.channels {
        let src = &input[c * id * ih * iw..(c + 1) * id * ih * iw];
        for a in 0..kd {
            let (d0, d1) = valid_range(id, od, a, sd, pd);
            for b in 0..kh {
                let (h0, h1) = valid_range(ih, oh, b, sh, ph);
                for e in 0..kw {
                    let (w0, w1) = valid_range(iw, ow, e, sw, pw);
                    let row = ((c * kd + a) * kh + b) * kw + e;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for zo in d0..d1 {
                        let zi = zo * sd + a - pd;
                        for yo in h0..h1 {
                            let yi = yo * sh + b - ph;
                            let drow = &mut dst[(zo * oh + yo) * ow..(zo * oh + yo + 1) * ow];
                            let srow = &src[(zi * ih + yi) * iw..(zi * ih + yi + 1) * iw];
                            if sw == 1 {
                                let xi0 = w0 + e - pw;
                                drow[w0..w1].copy_from_slice(&srow[xi0..xi0 + (w1 - w0)]);
                            } else {
                                for xo in w0..w1 {
                                    drow[xo] = srow[xo * sw + e - pw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im<T: Scalar>(g: &ConvGeometry, col: &[T]) -> Vec<T> {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let [od, oh, ow] = g.output().expect("validated geometry");
    let p = od * oh * ow;
    let mut out = vec![T::zero(); g.in_len()];
    for c in 0..g.channels {
        let dstc = &mut out[c * id * ih * iw..(c + 1) * id * ih * iw];
        for a in 0..kd {
            let (d0, d1) = valid_range(id, od, a, sd, pd);
            for b in 0..kh {
                let (h0, h1) = valid_range(ih, oh, b, sh, ph);
                for e in 0..kw {
                    let (w0, w1) = valid_range(iw, ow, e, sw, pw);
                    let row = ((c * kd + a) * kh + b) * kw + e;
                    let src = &col[row * p..(row + 1) * p];
                    for zo in d0..d1 {
                        let zi = zo * sd + a - pd;
                        for yo in h0..h1 {
                            let yi = yo * sh + b - ph;
                            let srow = &src[(zo * oh + yo) * ow..(zo * oh + yo + 1) * ow];
                            let drow = &mut dstc[(zi * ih + yi) * iw..(zi * ih + yi + 1) * iw];
                            if sw == 1 {
                                let xi0 = w0 + e - pw;
                                drow[xi0..xi0 + (w1 - w0)]
                                    .iter_mut()
                                    .zip(&srow[w0..w1])
                                    .for_each(|(d, &s)| *d += s);
                            } else {
                                for xo in w0..w1 {
                                    drow[xo * sw + e - pw] += srow[xo];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn bias_rows<T: Scalar>(out: &mut [T], bias: &[T], p: usize) {
    for (row, &b) in out.chunks_exact_mut(p).zip(bias) {
        row.iter_mut().for_each(|v| *v = b);
    }
}

fn row_sums<T: Scalar>(g: &[T], p: usize) -> Vec<T> {
    g.chunks_exact(p).map(|r| r.iter().copied().sum()).collect()
}

impl<T: Scalar> Graph<T> {
    /// Cross-correlation over a `[c, d, h, w]` buffer with weight
    /// `[c_out, c, kd, kh, kw]` (passed flattened).
    fn conv_core(
        &self,
        geom: ConvGeometry,
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
        c_out: usize,
        out_spatial: Vec<usize>,
    ) -> Tensor<T> {
        let o = geom.output().expect("validated geometry");
        let p: usize = o.iter().product();
        let k = geom.rows();
        let col = std::sync::Arc::new(im2col(&geom, input.data()));
        let mut out = vec![T::zero(); c_out * p];
        bias_rows(&mut out, bias.data(), p);
        T::gemm(c_out, k, p, weight.data(), false, &col, false, T::one(), &mut out);
        let mut shape = vec![c_out];
        shape.extend(out_spatial);
        let (ti, tw, tb) = (input.requires_grad(), weight.requires_grad(), bias.requires_grad());
        let wd = weight.arc();
        self.record(shape, out, &[input, weight, bias], move |g| {
            let gi = ti.then(|| {
                let mut gcol = vec![T::zero(); k * p];
                T::gemm(k, c_out, p, &wd, true, g, false, T::zero(), &mut gcol);
                col2im(&geom, &gcol)
            });
            let gw = tw.then(|| {
                let mut gw = vec![T::zero(); c_out * k];
                T::gemm(c_out, p, k, g, false, &col, true, T::zero(), &mut gw);
                gw
            });
            let gb = tb.then(|| row_sums(g, p));
            vec![gi, gw, gb]
        })
    }

    /// 2D cross-correlation: `input [c_in, h, w]`, `weight [c_out, c_in, kh, kw]`,
    /// `bias [c_out]`.
    pub fn conv2d(
        &self,
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<T>> {
        const OP: &str = "conv2d";
        input.expect_rank(OP, 3)?;
        weight.expect_rank(OP, 4)?;
        let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let ws = weight.shape();
        check_weight(OP, ws, c, bias)?;
        check_kernel(OP, &ws[2..], stride)?;
        let geom = ConvGeometry {
            channels: c,
            input: [1, h, w],
            kernel: [1, ws[2], ws[3]],
            stride: [1, stride, stride],
            padding: [0, padding, padding],
        };
        let o = geom
            .output()
            .ok_or_else(|| Error::shape(OP, "H/W", format!(">= kernel - 2*padding ({:?})", &ws[2..]), format!("{h}x{w}")))?;
        Ok(self.conv_core(geom, input, weight, bias, ws[0], vec![o[1], o[2]]))
    }

    /// 3D cross-correlation: `input [c_in, d, h, w]`, `weight [c_out, c_in, kd, kh, kw]`.
    pub fn conv3d(
        &self,
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<T>> {
        const OP: &str = "conv3d";
        input.expect_rank(OP, 4)?;
        weight.expect_rank(OP, 5)?;
        let s = input.shape();
        let ws = weight.shape();
        check_weight(OP, ws, s[0], bias)?;
        check_kernel(OP, &ws[2..], stride)?;
        let geom = ConvGeometry {
            channels: s[0],
            input: [s[1], s[2], s[3]],
            kernel: [ws[2], ws[3], ws[4]],
            stride: [stride; 3],
            padding: [padding; 3],
        };
        let o = geom
            .output()
            .ok_or_else(|| Error::shape(OP, "D/H/W", "at least the kernel extent", format!("{:?}", &s[1..])))?;
        Ok(self.conv_core(geom, input, weight, bias, ws[0], o.to_vec()))
    }

    /// Transposed 2D convolution, the adjoint of [`Graph::conv2d`] with the
    /// same weight, stride and padding. `input [c_in, h, w]`,
    /// `weight [c_in, c_out, kh, kw]`; output is `[c_out, stride*h, stride*w]`.
    pub fn conv2d_transposed(
        &self,
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<T>> {
        const OP: &str = "conv2d_transposed";
        input.expect_rank(OP, 3)?;
        weight.expect_rank(OP, 4)?;
        let (h, w) = (input.shape()[1], input.shape()[2]);
        let ws = weight.shape();
        let geom = ConvGeometry {
            channels: ws[1],
            input: [1, stride * h, stride * w],
            kernel: [1, ws[2], ws[3]],
            stride: [1, stride, stride],
            padding: [0, padding, padding],
        };
        let out = self.transposed_core(OP, geom, input, weight, bias, [1, h, w])?;
        self.reshape(&out, &[ws[1], stride * h, stride * w])
    }

    /// Transposed 3D convolution, the adjoint of [`Graph::conv3d`].
    /// `input [c_in, d, h, w]`, `weight [c_in, c_out, k, k, k]`. `out_size`
    /// picks among the spatial sizes that a strided conv3d maps onto the
    /// input size (for stride 2, padding 1, kernel 3: `2n - 1` or `2n`).
    pub fn conv3d_transposed(
        &self,
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
        stride: usize,
        padding: usize,
        out_size: [usize; 3],
    ) -> Result<Tensor<T>> {
        const OP: &str = "conv3d_transposed";
        input.expect_rank(OP, 4)?;
        weight.expect_rank(OP, 5)?;
        let s = input.shape();
        let ws = weight.shape();
        let geom = ConvGeometry {
            channels: ws[1],
            input: out_size,
            kernel: [ws[2], ws[3], ws[4]],
            stride: [stride; 3],
            padding: [padding; 3],
        };
        self.transposed_core(OP, geom, input, weight, bias, [s[1], s[2], s[3]])
    }

    /// `geom` describes the forward convolution whose adjoint is taken: its
    /// input is this op's output and its output must equal `in_spatial`.
    fn transposed_core(
        &self,
        op_name: &'static str,
        geom: ConvGeometry,
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
        in_spatial: [usize; 3],
    ) -> Result<Tensor<T>> {
        let c_in = input.shape()[0];
        let ws = weight.shape();
        if ws[0] != c_in {
            return Err(Error::shape(op_name, "C_in", c_in, ws[0]));
        }
        let c_out = geom.channels;
        if bias.shape() != [c_out] {
            return Err(Error::shape(op_name, "bias", c_out, format!("{:?}", bias.shape())));
        }
        if geom.stride[2] == 0 {
            return Err(Error::invalid(format!("{op_name}: stride must be >= 1")));
        }
        if geom.output() != Some(in_spatial) {
            return Err(Error::shape(
                op_name,
                "output size",
                format!("a size the strided forward conv maps back to {in_spatial:?}"),
                format!("{:?} with padding {:?}", geom.input, geom.padding),
            ));
        }
        let p: usize = in_spatial.iter().product();
        let k = geom.rows();
        let mut col = vec![T::zero(); k * p];
        T::gemm(k, c_in, p, weight.data(), true, input.data(), false, T::zero(), &mut col);
        let mut out = col2im(&geom, &col);
        let op: usize = geom.input.iter().product();
        for (row, &b) in out.chunks_exact_mut(op).zip(bias.data()) {
            row.iter_mut().for_each(|v| *v += b);
        }
        let (ti, tw, tb) = (input.requires_grad(), weight.requires_grad(), bias.requires_grad());
        let (xd, wd) = (input.arc(), weight.arc());
        let mut shape = vec![c_out];
        shape.extend(geom.input);
        Ok(self.record(shape, out, &[input, weight, bias], move |g| {
            let gcol = im2col(&geom, g);
            let gi = ti.then(|| {
                let mut gi = vec![T::zero(); c_in * p];
                T::gemm(c_in, k, p, &wd, false, &gcol, false, T::zero(), &mut gi);
                gi
            });
            let gw = tw.then(|| {
                let mut gw = vec![T::zero(); c_in * k];
                T::gemm(c_in, p, k, &xd, false, &gcol, true, T::zero(), &mut gw);
                gw
            });
            let gb = tb.then(|| row_sums(g, op));
            vec![gi, gw, gb]
        }))
    }
}

fn check_weight<T: Scalar>(op: &'static str, ws: &[usize], c_in: usize, bias: &Tensor<T>) -> Result<()> {
    if ws[1] != c_in {
        return Err(Error::shape(op, "C_in", c_in, ws[1]));
    }
    if bias.shape() != [ws[0]] {
        return Err(Error::shape(op, "C_out (bias)", ws[0], format!("{:?}", bias.shape())));
    }
    Ok(())
}

fn check_kernel(op: &'static str, kernel: &[usize], stride: usize) -> Result<()> {
    if kernel.iter().any(|k| k % 2 == 0) {
        return Err(Error::invalid(format!("{op}: kernel sizes must be odd, got {kernel:?}")));
    }
    if stride == 0 {
        return Err(Error::invalid(format!("{op}: stride must be >= 1")));
    }
    Ok(())
}
