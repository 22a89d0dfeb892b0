//! Raw CPU kernels: convolution via im2col + GEMM, its transpose, pooling.
//!
//! Every function here is a pure map between tensors; the tape in
//! [`crate::tape`] wires forward and backward kernels together.

use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Geometry of a strided, zero-padded square-kernel convolution over one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

/// Output extent of a convolution, `floor((n + 2p - k) / s) + 1`, or `None` when empty.
pub fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || k == 0 {
        return None;
    }
    let padded = n + 2 * pad;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Output extent of a transposed convolution, `(n - 1) s - 2p + k`, or `None` when empty.
pub fn deconv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let full = (n.checked_sub(1)?) * stride + k;
    full.checked_sub(2 * pad).filter(|&v| v > 0)
}

impl ConvGeom {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let out_height = conv_out_len(height, kernel, stride, pad);
        let out_width = conv_out_len(width, kernel, stride, pad);
        match (out_height, out_width) {
            (Some(out_height), Some(out_width)) => Ok(Self {
                channels,
                height,
                width,
                kernel,
                stride,
                pad,
                out_height,
                out_width,
            }),
            _ => Err(shape_err(
                "conv2d",
                format!(
                    "kernel {kernel} stride {stride} pad {pad} yields empty output on {height}x{width}"
                ),
            )),
        }
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height * self.out_width
    }
}

/// Unfold one `(C, H, W)` sample into `C·k·k` rows of `Ho·Wo` patch values.
/// Row `r` starts at `cols[r * ld]`, so several samples can share one matrix
/// by offsetting `cols` to each sample's column block.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T], ld: usize) {
    let (k, s, p) = (g.kernel, g.stride as isize, g.pad as isize);
    let plane = g.col_cols();
    for c in 0..g.channels {
        let xc = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ld..row * ld + plane];
                for oh in 0..g.out_height {
                    let ih = oh as isize * s - p + ki as isize;
                    let drow = &mut dst[oh * g.out_width..(oh + 1) * g.out_width];
                    if ih < 0 || ih >= g.height as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let xrow = &xc[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for (ow, d) in drow.iter_mut().enumerate() {
                        let iw = ow as isize * s - p + kj as isize;
                        *d = if iw < 0 || iw >= g.width as isize {
                            T::zero()
                        } else {
                            xrow[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add patch rows back into a `(C, H, W)` sample.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, x: &mut [T], ld: usize) {
    let (k, s, p) = (g.kernel, g.stride as isize, g.pad as isize);
    let plane = g.col_cols();
    for c in 0..g.channels {
        let xc = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ld..row * ld + plane];
                for oh in 0..g.out_height {
                    let ih = oh as isize * s - p + ki as isize;
                    if ih < 0 || ih >= g.height as isize {
                        continue;
                    }
                    let xrow = &mut xc[ih as usize * g.width..(ih as usize + 1) * g.width];
                    let srow = &src[oh * g.out_width..(oh + 1) * g.out_width];
                    for (ow, &v) in srow.iter().enumerate() {
                        let iw = ow as isize * s - p + kj as isize;
                        if iw >= 0 && iw < g.width as isize {
                            xrow[iw as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `(B, C, P)` → `(C, B·P)`.
fn to_channel_major<T: Scalar>(x: &[T], batch: usize, channels: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for n in 0..batch {
        for c in 0..channels {
            let src = &x[(n * channels + c) * plane..(n * channels + c + 1) * plane];
            out[(c * batch + n) * plane..(c * batch + n + 1) * plane].copy_from_slice(src);
        }
    }
    out
}

/// `(C, B·P)` → `(B, C, P)`.
fn from_channel_major<T: Scalar>(x: &[T], batch: usize, channels: usize, plane: usize, out: &mut [T]) {
    for n in 0..batch {
        for c in 0..channels {
            let src = &x[(c * batch + n) * plane..(c * batch + n + 1) * plane];
            out[(n * channels + c) * plane..(n * channels + c + 1) * plane].copy_from_slice(src);
        }
    }
}

/// Patch matrix `(C·k·k, B·Ho·Wo)` for a whole batch.
fn batch_im2col<T: Scalar>(x: &[T], batch: usize, g: &ConvGeom) -> Vec<T> {
    let plane = g.col_cols();
    let ld = batch * plane;
    let in_len = g.channels * g.height * g.width;
    let mut cols = vec![T::zero(); g.col_rows() * ld];
    for n in 0..batch {
        im2col(&x[n * in_len..(n + 1) * in_len], g, &mut cols[n * plane..], ld);
    }
    cols
}

fn check_bias<T: Scalar>(op: &'static str, bias: Option<&Tensor<T>>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.numel() != channels {
            return Err(shape_err(
                op,
                format!("bias has {} values, expected {channels}", b.numel()),
            ));
        }
    }
    Ok(())
}

fn square_kernel<T: Scalar>(op: &'static str, weight: &Tensor<T>) -> Result<usize> {
    let [_, _, kh, kw] = weight.dims();
    if kh != kw {
        return Err(shape_err(op, format!("non-square kernel {kh}x{kw}")));
    }
    Ok(kh)
}

/// Geometry for `conv2d`; validates channel agreement and non-empty output.
pub fn conv2d_geom<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    let k = square_kernel("conv2d", weight)?;
    let [_, c_in, h, w] = input.dims();
    let [_, wc_in, _, _] = weight.dims();
    if c_in != wc_in {
        return Err(shape_err(
            "conv2d",
            format!(
                "input has {c_in} channels but weight {:?} expects {wc_in}",
                weight.dims()
            ),
        ));
    }
    ConvGeom::new(c_in, h, w, k, stride, pad)
}

pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = conv2d_geom(input, weight, stride, pad)?;
    let c_out = weight.dims()[0];
    check_bias("conv2d", bias, c_out)?;
    let batch = input.batch();
    let plane = g.col_cols();
    let ld = batch * plane;
    let kk = g.col_rows();
    let cols = batch_im2col(input.data(), batch, &g);
    let mut y = vec![T::zero(); c_out * ld];
    if let Some(b) = bias {
        for (row, &bv) in y.chunks_mut(ld).zip(b.data()) {
            row.fill(bv);
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    T::gemm(c_out, kk, ld, T::one(), weight.data(), kk as isize, 1, &cols, ld as isize, 1, beta, &mut y, ld as isize, 1);
    let mut out = Tensor::zeros([batch, c_out, g.out_height, g.out_width]);
    from_channel_major(&y, batch, c_out, plane, out.data_mut());
    Ok(out)
}

/// Gradients of `conv2d` w.r.t. input, weight and bias given the output gradient.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Vec<T>)> {
    let g = conv2d_geom(input, weight, stride, pad)?;
    let c_out = weight.dims()[0];
    let plane = g.col_cols();
    let kk = g.col_rows();
    let batch = input.batch();
    let ld = batch * plane;
    let dy = to_channel_major(grad_out.data(), batch, c_out, plane);
    let grad_b: Vec<T> = dy.chunks(ld).map(|row| row.iter().copied().sum::<T>()).collect();
    let mut cols = batch_im2col(input.data(), batch, &g);
    // dW = dY · colsᵀ
    let mut grad_w = Tensor::zeros(weight.dims());
    T::gemm(c_out, ld, kk, T::one(), &dy, ld as isize, 1, &cols, 1, ld as isize, T::zero(), grad_w.data_mut(), kk as isize, 1);
    if !need_input {
        return Ok((None, grad_w, grad_b));
    }
    // dX = col2im(Wᵀ · dY)
    T::gemm(kk, c_out, ld, T::one(), weight.data(), 1, kk as isize, &dy, ld as isize, 1, T::zero(), &mut cols, ld as isize, 1);
    let mut grad_in = Tensor::zeros(input.dims());
    let in_len = input.sample_len();
    for n in 0..batch {
        col2im(&cols[n * plane..], &g, &mut grad_in.data_mut()[n * in_len..(n + 1) * in_len], ld);
    }
    Ok((Some(grad_in), grad_w, grad_b))
}

/// Geometry of the convolution whose adjoint is the transposed convolution:
/// it maps the deconv *output* back onto the deconv *input* grid.
pub fn deconv2d_geom<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    let k = square_kernel("deconv2d", weight)?;
    let [_, c_in, h, w] = input.dims();
    let [wc_in, c_out, _, _] = weight.dims();
    if c_in != wc_in {
        return Err(shape_err(
            "deconv2d",
            format!(
                "input has {c_in} channels but weight {:?} expects {wc_in}",
                weight.dims()
            ),
        ));
    }
    let (oh, ow) = match (
        deconv_out_len(h, k, stride, pad),
        deconv_out_len(w, k, stride, pad),
    ) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(shape_err(
                "deconv2d",
                format!("kernel {k} stride {stride} pad {pad} yields empty output on {h}x{w}"),
            ))
        }
    };
    let g = ConvGeom::new(c_out, oh, ow, k, stride, pad)?;
    if g.out_height != h || g.out_width != w {
        return Err(shape_err(
            "deconv2d",
            format!("stride {stride} pad {pad} kernel {k} is not invertible on {h}x{w}"),
        ));
    }
    Ok(g)
}

pub fn deconv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = deconv2d_geom(input, weight, stride, pad)?;
    let c_in = input.channels();
    let c_out = g.channels;
    check_bias("deconv2d", bias, c_out)?;
    let batch = input.batch();
    let in_plane = g.col_cols();
    let ld = batch * in_plane;
    let kk = g.col_rows();
    let x = to_channel_major(input.data(), batch, c_in, in_plane);
    // cols = Wᵀ(kk × Cin) · X(Cin × B·HW); weight is laid out (Cin, Cout·k·k).
    let mut cols = vec![T::zero(); kk * ld];
    T::gemm(kk, c_in, ld, T::one(), weight.data(), 1, kk as isize, &x, ld as isize, 1, T::zero(), &mut cols, ld as isize, 1);
    let out_plane = g.height * g.width;
    let out_len = c_out * out_plane;
    let mut out = Tensor::zeros([batch, c_out, g.height, g.width]);
    for n in 0..batch {
        let ys = &mut out.data_mut()[n * out_len..(n + 1) * out_len];
        col2im(&cols[n * in_plane..], &g, ys, ld);
        if let Some(b) = bias {
            for (row, &bv) in ys.chunks_mut(out_plane).zip(b.data()) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

pub fn deconv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
    let g = deconv2d_geom(input, weight, stride, pad)?;
    let c_in = input.channels();
    let c_out = g.channels;
    let in_plane = g.col_cols();
    let out_plane = g.height * g.width;
    let kk = g.col_rows();
    let batch = input.batch();
    let ld = batch * in_plane;
    let mut grad_b = vec![T::zero(); c_out];
    for (i, row) in grad_out.data().chunks(out_plane).enumerate() {
        grad_b[i % c_out] += row.iter().copied().sum::<T>();
    }
    let cols = batch_im2col(grad_out.data(), batch, &g);
    // dX = W(Cin × kk) · cols(kk × B·HW)
    let mut dx = vec![T::zero(); c_in * ld];
    T::gemm(c_in, kk, ld, T::one(), weight.data(), kk as isize, 1, &cols, ld as isize, 1, T::zero(), &mut dx, ld as isize, 1);
    let mut grad_in = Tensor::zeros(input.dims());
    from_channel_major(&dx, batch, c_in, in_plane, grad_in.data_mut());
    // dW = X(Cin × B·HW) · colsᵀ
    let x = to_channel_major(input.data(), batch, c_in, in_plane);
    let mut grad_w = Tensor::zeros(weight.dims());
    T::gemm(c_in, ld, kk, T::one(), &x, ld as isize, 1, &cols, 1, ld as isize, T::zero(), grad_w.data_mut(), kk as isize, 1);
    Ok((grad_in, grad_w, grad_b))
}

fn check_even<T: Scalar>(op: &'static str, x: &Tensor<T>) -> Result<()> {
    let [_, _, h, w] = x.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err(op, format!("spatial dims {h}x{w} must be even")));
    }
    Ok(())
}

pub fn avg_pool2_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    check_even("avg_pool_2x2", x)?;
    let [b, c, h, w] = x.dims();
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let src = x.data();
    Ok(Tensor::from_fn([b, c, oh, ow], |i| {
        let plane = i / (oh * ow);
        let (r, col) = ((i % (oh * ow)) / ow, i % ow);
        let base = plane * h * w + 2 * r * w + 2 * col;
        (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]) * quarter
    }))
}

pub fn avg_pool2_backward<T: Scalar>(input_dims: [usize; 4], grad_out: &Tensor<T>) -> Tensor<T> {
    let [_, _, h, w] = input_dims;
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let go = grad_out.data();
    Tensor::from_fn(input_dims, |i| {
        let plane = i / (h * w);
        let (r, col) = ((i % (h * w)) / w, i % w);
        go[plane * oh * ow + (r / 2) * ow + col / 2] * quarter
    })
}

/// Max pooling over 2×2 windows; also returns the flat argmax of every window
/// (first element in row-major order wins ties).
pub fn max_pool2_forward<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    check_even("max_pool_2x2", x)?;
    let [b, c, h, w] = x.dims();
    let (oh, ow) = (h / 2, w / 2);
    let src = x.data();
    let mut arg = Vec::with_capacity(b * c * oh * ow);
    let out = Tensor::from_fn([b, c, oh, ow], |i| {
        let plane = i / (oh * ow);
        let (r, col) = ((i % (oh * ow)) / ow, i % ow);
        let base = plane * h * w + 2 * r * w + 2 * col;
        let mut best = base;
        for cand in [base + 1, base + w, base + w + 1] {
            if src[cand] > src[best] {
                best = cand;
            }
        }
        arg.push(best);
        src[best]
    });
    Ok((out, arg))
}

pub fn upsample_nearest2_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [b, c, h, w] = x.dims();
    let (oh, ow) = (2 * h, 2 * w);
    let src = x.data();
    Tensor::from_fn([b, c, oh, ow], |i| {
        let plane = i / (oh * ow);
        let (r, col) = ((i % (oh * ow)) / ow, i % ow);
        src[plane * h * w + (r / 2) * w + col / 2]
    })
}

pub fn upsample_nearest2_backward<T: Scalar>(input_dims: [usize; 4], grad_out: &Tensor<T>) -> Tensor<T> {
    let [_, _, h, w] = input_dims;
    let ow = 2 * w;
    let go = grad_out.data();
    Tensor::from_fn(input_dims, |i| {
        let plane = i / (h * w);
        let (r, col) = ((i % (h * w)) / w, i % w);
        let base = plane * 4 * h * w + 2 * r * ow + 2 * col;
        go[base] + go[base + 1] + go[base + ow] + go[base + ow + 1]
    })
}
