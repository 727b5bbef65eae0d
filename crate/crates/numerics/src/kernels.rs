//! Forward and adjoint kernels on raw tensors. The tape in [`crate::tape`]
//! records calls into these; they are also usable directly for inference.

use crate::error::{invalid, mismatch, Result};
use crate::tensor::Tensor;

/// `c = a · b + beta · c` with optional transposition of the stored operands.
///
/// `a` is `m×k` (stored `k×m` when `ta`), `b` is `k×n` (stored `n×k` when `tb`),
/// `c` is row-major `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above and the strides describe
    // exactly those dense row-major buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a strided 2-D correlation from a `big` plane onto a `small` one.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn new(
        op: &'static str,
        channels: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(invalid(op, "stride must be >= 1"));
        }
        if h + 2 * pad < kh {
            return Err(mismatch(op, "height", format!("padded height {} < kernel {}", h + 2 * pad, kh)));
        }
        if w + 2 * pad < kw {
            return Err(mismatch(op, "width", format!("padded width {} < kernel {}", w + 2 * pad, kw)));
        }
        Ok(Self {
            channels,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let ncol = g.col_cols();
    for c in 0..g.channels {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let seg = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.h as isize {
                        seg.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in seg.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]; accumulates into `x`.
fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let ncol = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_bias(op: &'static str, bias: &Tensor, channels: usize) -> Result<()> {
    if bias.len() != channels {
        return Err(mismatch(
            op,
            "bias length",
            format!("expected {} output channels, got {}", channels, bias.len()),
        ));
    }
    Ok(())
}

/// Shapes shared by conv2d forward/backward.
fn conv2d_geom(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<(usize, usize, ConvGeom)> {
    let op = "conv2d";
    let (n, c, h, w) = input.dims4(op)?;
    let (oc, kc, kh, kw) = kernel.dims4(op)?;
    if kc != c {
        return Err(mismatch(
            op,
            "input channels",
            format!("kernel expects {} input channels, input has {}", kc, c),
        ));
    }
    Ok((n, oc, ConvGeom::new(op, c, h, w, kh, kw, stride, pad)?))
}

/// 2-D cross-correlation with zero padding. Kernel layout `OutC×InC×kH×kW`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (n, oc, g) = conv2d_geom(input, kernel, stride, padding)?;
    check_bias("conv2d", bias, oc)?;
    let (rows, ncol) = (g.col_rows(), g.col_cols());
    let in_sz = g.channels * g.h * g.w;
    let mut out = vec![0.0; n * oc * ncol];
    let mut cols = vec![0.0; rows * ncol];
    for b in 0..n {
        im2col(&input.data()[b * in_sz..(b + 1) * in_sz], &g, &mut cols);
        let dst = &mut out[b * oc * ncol..(b + 1) * oc * ncol];
        for (o, chunk) in dst.chunks_mut(ncol).enumerate() {
            chunk.fill(bias.data()[o]);
        }
        gemm(oc, rows, ncol, kernel.data(), false, &cols, false, 1.0, dst);
    }
    Tensor::new(vec![n, oc, g.out_h, g.out_w], out)
}

/// Gradients of [`conv2d`] w.r.t. input, kernel and bias.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, oc, g) = conv2d_geom(input, kernel, stride, padding)?;
    let (rows, ncol) = (g.col_rows(), g.col_cols());
    let in_sz = g.channels * g.h * g.w;
    let mut d_in = vec![0.0; input.len()];
    let mut d_k = vec![0.0; kernel.len()];
    let mut d_b = vec![0.0; oc];
    let mut cols = vec![0.0; rows * ncol];
    let mut d_cols = vec![0.0; rows * ncol];
    for b in 0..n {
        let go = &grad_out.data()[b * oc * ncol..(b + 1) * oc * ncol];
        for (o, chunk) in go.chunks(ncol).enumerate() {
            d_b[o] += chunk.iter().sum::<f64>();
        }
        im2col(&input.data()[b * in_sz..(b + 1) * in_sz], &g, &mut cols);
        // dK += dOut · colsᵀ
        gemm(oc, ncol, rows, go, false, &cols, true, 1.0, &mut d_k);
        // dcols = Kᵀ · dOut
        gemm(rows, oc, ncol, kernel.data(), true, go, false, 0.0, &mut d_cols);
        col2im(&d_cols, &g, &mut d_in[b * in_sz..(b + 1) * in_sz]);
    }
    Ok((
        Tensor::new(input.shape().to_vec(), d_in)?,
        Tensor::new(kernel.shape().to_vec(), d_k)?,
        Tensor::new(vec![oc], d_b)?,
    ))
}

/// Output geometry of a transposed convolution: the returned `ConvGeom` maps
/// the (large) output plane back onto the input plane.
fn conv_t_geom(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<(usize, usize, usize, ConvGeom)> {
    let op = "conv_transpose2d";
    let (n, c, h, w) = input.dims4(op)?;
    let (kc, oc, kh, kw) = kernel.dims4(op)?;
    if kc != c {
        return Err(mismatch(
            op,
            "input channels",
            format!("kernel expects {} input channels, input has {}", kc, c),
        ));
    }
    if stride == 0 {
        return Err(invalid(op, "stride must be >= 1"));
    }
    let big_h = ((h - 1) * stride + kh)
        .checked_sub(2 * pad)
        .filter(|v| *v > 0)
        .ok_or_else(|| mismatch(op, "height", "padding exceeds output extent"))?;
    let big_w = ((w - 1) * stride + kw)
        .checked_sub(2 * pad)
        .filter(|v| *v > 0)
        .ok_or_else(|| mismatch(op, "width", "padding exceeds output extent"))?;
    let g = ConvGeom::new(op, oc, big_h, big_w, kh, kw, stride, pad)?;
    debug_assert_eq!((g.out_h, g.out_w), (h, w));
    Ok((n, c, oc, g))
}

/// Transposed convolution (the adjoint of [`conv2d`] plus bias).
/// Kernel layout `InC×OutC×kH×kW`; output side is `(H−1)·s − 2p + k`.
pub fn conv_transpose2d(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (n, ic, oc, g) = conv_t_geom(input, kernel, stride, padding)?;
    check_bias("conv_transpose2d", bias, oc)?;
    let (rows, ncol) = (g.col_rows(), g.col_cols());
    let in_sz = ic * ncol;
    let out_sz = oc * g.h * g.w;
    let mut out = vec![0.0; n * out_sz];
    let mut cols = vec![0.0; rows * ncol];
    for b in 0..n {
        let dst = &mut out[b * out_sz..(b + 1) * out_sz];
        // cols = Kmᵀ · x, Km is IC × (OC·k·k)
        gemm(rows, ic, ncol, kernel.data(), true, &input.data()[b * in_sz..(b + 1) * in_sz], false, 0.0, &mut cols);
        col2im(&cols, &g, dst);
        for (o, plane) in dst.chunks_mut(g.h * g.w).enumerate() {
            let bv = bias.data()[o];
            plane.iter_mut().for_each(|v| *v += bv);
        }
    }
    Tensor::new(vec![n, oc, g.h, g.w], out)
}

/// Gradients of [`conv_transpose2d`] w.r.t. input, kernel and bias.
pub fn conv_transpose2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, ic, oc, g) = conv_t_geom(input, kernel, stride, padding)?;
    let (rows, ncol) = (g.col_rows(), g.col_cols());
    let in_sz = ic * ncol;
    let out_sz = oc * g.h * g.w;
    let mut d_in = vec![0.0; input.len()];
    let mut d_k = vec![0.0; kernel.len()];
    let mut d_b = vec![0.0; oc];
    let mut d_cols = vec![0.0; rows * ncol];
    for b in 0..n {
        let go = &grad_out.data()[b * out_sz..(b + 1) * out_sz];
        for (o, plane) in go.chunks(g.h * g.w).enumerate() {
            d_b[o] += plane.iter().sum::<f64>();
        }
        im2col(go, &g, &mut d_cols);
        let x = &input.data()[b * in_sz..(b + 1) * in_sz];
        // dx = Km · dcols
        gemm(ic, rows, ncol, kernel.data(), false, &d_cols, false, 0.0, &mut d_in[b * in_sz..(b + 1) * in_sz]);
        // dKm += x · dcolsᵀ
        gemm(ic, ncol, rows, x, false, &d_cols, true, 1.0, &mut d_k);
    }
    Ok((
        Tensor::new(input.shape().to_vec(), d_in)?,
        Tensor::new(kernel.shape().to_vec(), d_k)?,
        Tensor::new(vec![oc], d_b)?,
    ))
}

pub fn leaky_relu(x: f64, alpha: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        alpha * x
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Batched affine map: `x` is `N×In`, `w` is `Out×In`, `b` has `Out` entries.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let op = "affine";
    let (n, din) = x.dims2(op)?;
    let (dout, win) = w.dims2(op)?;
    if win != din {
        return Err(mismatch(op, "input length", format!("matrix has {} columns, input has {}", win, din)));
    }
    if b.len() != dout {
        return Err(mismatch(op, "bias length", format!("matrix has {} rows, bias has {}", dout, b.len())));
    }
    let mut out = Vec::with_capacity(n * dout);
    for _ in 0..n {
        out.extend_from_slice(b.data());
    }
    gemm(n, din, dout, x.data(), false, w.data(), true, 1.0, &mut out);
    Tensor::new(vec![n, dout], out)
}

/// Mean over each `H×W` plane: `N×C×H×W → N×C`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("global_avg_pool")?;
    if h == 0 || w == 0 {
        return Err(invalid("global_avg_pool", "empty spatial extent"));
    }
    let hw = h * w;
    let data = x.data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
    Tensor::new(vec![n, c], data)
}

/// Normalised 1-D Gaussian taps of odd length `size`.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let mut taps: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Separable depthwise filter with "valid" extent: output is
/// `(H − k + 1) × (W − k + 1)` per plane.
pub fn separable_filter_valid(x: &Tensor, taps: &[f64]) -> Result<Tensor> {
    let op = "separable_filter";
    let (n, c, h, w) = x.dims4(op)?;
    let k = taps.len();
    if h < k || w < k {
        return Err(mismatch(op, "spatial size", format!("{}x{} smaller than window {}", h, w, k)));
    }
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut tmp = vec![0.0; h * ow];
    let mut out = vec![0.0; n * c * oh * ow];
    for (p, dst) in x.data().chunks(h * w).zip(out.chunks_mut(oh * ow)) {
        for y in 0..h {
            let row = &p[y * w..(y + 1) * w];
            for ox in 0..ow {
                tmp[y * ow + ox] = taps.iter().zip(&row[ox..ox + k]).map(|(t, v)| t * v).sum();
            }
        }
        for oy in 0..oh {
            let d = &mut dst[oy * ow..(oy + 1) * ow];
            for (t_i, t) in taps.iter().enumerate() {
                let src = &tmp[(oy + t_i) * ow..(oy + t_i + 1) * ow];
                for (dv, sv) in d.iter_mut().zip(src) {
                    *dv += t * sv;
                }
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

/// Adjoint of [`separable_filter_valid`] for an input of shape `in_shape`.
pub fn separable_filter_valid_backward(grad_out: &Tensor, taps: &[f64], in_shape: &[usize]) -> Result<Tensor> {
    let (n, c, oh, ow) = grad_out.dims4("separable_filter")?;
    let (h, w) = (in_shape[2], in_shape[3]);
    let k = taps.len();
    let mut tmp = vec![0.0; h * ow];
    let mut out = vec![0.0; n * c * h * w];
    for (g, dst) in grad_out.data().chunks(oh * ow).zip(out.chunks_mut(h * w)) {
        tmp.fill(0.0);
        for oy in 0..oh {
            let src = &g[oy * ow..(oy + 1) * ow];
            for (t_i, t) in taps.iter().enumerate() {
                let d = &mut tmp[(oy + t_i) * ow..(oy + t_i + 1) * ow];
                for (dv, sv) in d.iter_mut().zip(src) {
                    *dv += t * sv;
                }
            }
        }
        for y in 0..h {
            let row = &mut dst[y * w..(y + 1) * w];
            for ox in 0..ow {
                let gv = tmp[y * ow + ox];
                for (t, r) in taps.iter().zip(&mut row[ox..ox + k]) {
                    *r += t * gv;
                }
            }
        }
    }
    Tensor::new(in_shape.to_vec(), out)
}

/// 2×2 average pooling with stride 2; odd sides are zero-padded at the end
/// and the divisor stays 4.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("avg_pool2")?;
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![0.0; n * c * oh * ow];
    for (p, dst) in x.data().chunks(h * w).zip(out.chunks_mut(oh * ow)) {
        for y in 0..h {
            for xx in 0..w {
                dst[(y / 2) * ow + xx / 2] += 0.25 * p[y * w + xx];
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn avg_pool2_backward(grad_out: &Tensor, in_shape: &[usize]) -> Result<Tensor> {
    let (_, _, oh, ow) = grad_out.dims4("avg_pool2")?;
    let (h, w) = (in_shape[2], in_shape[3]);
    let mut out = vec![0.0; in_shape.iter().product()];
    for (g, dst) in grad_out.data().chunks(oh * ow).zip(out.chunks_mut(h * w)) {
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = 0.25 * g[(y / 2) * ow + xx / 2];
            }
        }
    }
    Tensor::new(in_shape.to_vec(), out)
}

/// Edge-replicating pad by `p` pixels on every side.
pub fn replicate_pad(x: &Tensor, p: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("replicate_pad")?;
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let mut out = vec![0.0; n * c * ph * pw];
    for (src, dst) in x.data().chunks(h * w).zip(out.chunks_mut(ph * pw)) {
        for y in 0..ph {
            let sy = y.saturating_sub(p).min(h - 1);
            for xx in 0..pw {
                let sx = xx.saturating_sub(p).min(w - 1);
                dst[y * pw + xx] = src[sy * w + sx];
            }
        }
    }
    Tensor::new(vec![n, c, ph, pw], out)
}

pub fn replicate_pad_backward(grad_out: &Tensor, p: usize, in_shape: &[usize]) -> Result<Tensor> {
    let (_, _, ph, pw) = grad_out.dims4("replicate_pad")?;
    let (h, w) = (in_shape[2], in_shape[3]);
    let mut out = vec![0.0; in_shape.iter().product()];
    for (g, dst) in grad_out.data().chunks(ph * pw).zip(out.chunks_mut(h * w)) {
        for y in 0..ph {
            let sy = y.saturating_sub(p).min(h - 1);
            for xx in 0..pw {
                let sx = xx.saturating_sub(p).min(w - 1);
                dst[sy * w + sx] += g[y * pw + xx];
            }
        }
    }
    Tensor::new(in_shape.to_vec(), out)
}
