//! Forward and backward kernels for the image operators used by the networks.

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// `c (+)= op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
///
/// A transposed operand is stored row-major with the transposed extents.
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_trans: bool,
    b: &[T],
    b_trans: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: extents checked above, strides derived from them.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (&[batch, in_ch, height, width], &[out_ch, w_in, kh, kw]) = (x, w) else {
            return Err(Error::dim(format!("conv2d expects rank-4 input and weight, got {x:?} / {w:?}")));
        };
        if w_in != in_ch || kh != kw || stride == 0 {
            return Err(Error::dim(format!("conv2d weight {w:?} incompatible with input {x:?}")));
        }
        if height + 2 * pad < kh || width + 2 * pad < kw {
            return Err(Error::dim(format!("conv2d kernel {kh} larger than padded input {x:?}")));
        }
        Ok(ConvGeom {
            batch,
            in_ch,
            height,
            width,
            out_ch,
            kernel: kh,
            stride,
            pad,
            out_h: (height + 2 * pad - kh) / stride + 1,
            out_w: (width + 2 * pad - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let k = g.kernel;
    let p = g.out_pixels();
    for c in 0..g.in_ch {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * p..][..p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(g: &ConvGeom, cols: &[T], x: &mut [T]) {
    let k = g.kernel;
    let p = g.out_pixels();
    for c in 0..g.in_ch {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * p..][..p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] = dst[ix as usize] + row[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad)?;
    if let Some(b) = b {
        if b.shape() != [g.out_ch] {
            return Err(Error::dim(format!("conv2d bias {:?} for {} channels", b.shape(), g.out_ch)));
        }
    }
    let in_len = g.in_ch * g.height * g.width;
    let p = g.out_pixels();
    let kl = g.patch_len();
    let mut out = Tensor::zeros([g.batch, g.out_ch, g.out_h, g.out_w]);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kl * p] };
    for n in 0..g.batch {
        let xn = &x.data()[n * in_len..(n + 1) * in_len];
        let on = &mut out.data_mut()[n * g.out_ch * p..(n + 1) * g.out_ch * p];
        let patches: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(&g, xn, &mut cols);
            &cols
        };
        matmul(g.out_ch, kl, p, w.data(), false, patches, false, on, false);
        if let Some(b) = b {
            for (o, row) in on.chunks_mut(p).enumerate() {
                let bias = b.data()[o];
                row.iter_mut().for_each(|v| *v = *v + bias);
            }
        }
    }
    Ok(out)
}

/// Gradients of a conv2d with respect to `(input, weight, bias)`; each one
/// is computed only when requested.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    need: [bool; 3],
) -> Result<[Option<Tensor<T>>; 3]> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad)?;
    let in_len = g.in_ch * g.height * g.width;
    let p = g.out_pixels();
    let kl = g.patch_len();
    let mut gx = need[0].then(|| Tensor::zeros(x.shape().to_vec()));
    let mut gw = need[1].then(|| Tensor::zeros(w.shape().to_vec()));
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kl * p] };
    let mut gcols = vec![T::zero(); kl * p];
    for n in 0..g.batch {
        let gon = &grad_out.data()[n * g.out_ch * p..(n + 1) * g.out_ch * p];
        if let Some(gw) = gw.as_mut() {
            let xn = &x.data()[n * in_len..(n + 1) * in_len];
            let patches: &[T] = if g.is_pointwise() {
                xn
            } else {
                im2col(&g, xn, &mut cols);
                &cols
            };
            matmul(g.out_ch, p, kl, gon, false, patches, true, gw.data_mut(), true);
        }
        if let Some(gx) = gx.as_mut() {
            let gxn = &mut gx.data_mut()[n * in_len..(n + 1) * in_len];
            if g.is_pointwise() {
                matmul(kl, g.out_ch, p, w.data(), true, gon, false, gxn, true);
            } else {
                matmul(kl, g.out_ch, p, w.data(), true, gon, false, &mut gcols, false);
                col2im(&g, &gcols, gxn);
            }
        }
    }
    let gb = need[2].then(|| channel_sums(grad_out, g.batch, g.out_ch, p));
    Ok([gx, gw, gb])
}

fn channel_sums<T: Real>(t: &Tensor<T>, batch: usize, ch: usize, p: usize) -> Tensor<T> {
    let mut gb = Tensor::zeros([ch]);
    for n in 0..batch {
        for c in 0..ch {
            let s: T = t.data()[(n * ch + c) * p..(n * ch + c + 1) * p].iter().copied().sum();
            gb.data_mut()[c] = gb.data()[c] + s;
        }
    }
    gb
}

/// Transposed convolution with a 2x2 kernel and stride 2 (exact doubling).
///
/// Weight layout is `[in_ch, out_ch, 2, 2]`.
pub fn conv_transpose2x2_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (n, ci, h, wd) = x.dims4()?;
    let (wi, co, k) = match w.shape() {
        &[wi, co, 2, 2] => (wi, co, 4),
        s => return Err(Error::dim(format!("transposed conv weight must be [ci, co, 2, 2], got {s:?}"))),
    };
    if wi != ci {
        return Err(Error::dim(format!("transposed conv weight {:?} for {ci} input channels", w.shape())));
    }
    let p = h * wd;
    let mut y = Tensor::zeros([n, co, 2 * h, 2 * wd]);
    let mut buf = vec![T::zero(); co * k * p];
    for b_i in 0..n {
        let xn = &x.data()[b_i * ci * p..(b_i + 1) * ci * p];
        matmul(co * k, ci, p, w.data(), true, xn, false, &mut buf, false);
        let yn = &mut y.data_mut()[b_i * co * 4 * p..(b_i + 1) * co * 4 * p];
        for o in 0..co {
            let bias = b.map_or(T::zero(), |b| b.data()[o]);
            for a in 0..2 {
                for c in 0..2 {
                    let row = &buf[(o * 4 + a * 2 + c) * p..][..p];
                    for i in 0..h {
                        for j in 0..wd {
                            yn[(o * 2 * h + 2 * i + a) * 2 * wd + 2 * j + c] = row[i * wd + j] + bias;
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

pub fn conv_transpose2x2_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    need: [bool; 3],
) -> Result<[Option<Tensor<T>>; 3]> {
    let (n, ci, h, wd) = x.dims4()?;
    let co = w.shape()[1];
    let p = h * wd;
    let mut gx = need[0].then(|| Tensor::zeros(x.shape().to_vec()));
    let mut gw = need[1].then(|| Tensor::zeros(w.shape().to_vec()));
    let mut gather = vec![T::zero(); co * 4 * p];
    for b_i in 0..n {
        let gy = &grad_out.data()[b_i * co * 4 * p..(b_i + 1) * co * 4 * p];
        for o in 0..co {
            for a in 0..2 {
                for c in 0..2 {
                    let row = &mut gather[(o * 4 + a * 2 + c) * p..][..p];
                    for i in 0..h {
                        for j in 0..wd {
                            row[i * wd + j] = gy[(o * 2 * h + 2 * i + a) * 2 * wd + 2 * j + c];
                        }
                    }
                }
            }
        }
        if let Some(gx) = gx.as_mut() {
            let gxn = &mut gx.data_mut()[b_i * ci * p..(b_i + 1) * ci * p];
            matmul(ci, co * 4, p, w.data(), false, &gather, false, gxn, false);
        }
        if let Some(gw) = gw.as_mut() {
            let xn = &x.data()[b_i * ci * p..(b_i + 1) * ci * p];
            matmul(ci, p, co * 4, xn, false, &gather, true, gw.data_mut(), true);
        }
    }
    let gb = need[2].then(|| channel_sums(grad_out, n, co, 4 * p));
    Ok([gx, gw, gb])
}

pub fn upsample_nearest_forward<T: Real>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = (h * factor, w * factor);
    let mut y = Tensor::zeros([n, c, oh, ow]);
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut y.data_mut()[plane * oh * ow..(plane + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                dst[i * ow + j] = src[(i / factor) * w + j / factor];
            }
        }
    }
    Ok(y)
}

pub fn upsample_nearest_backward<T: Real>(grad_out: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (n, c, oh, ow) = grad_out.dims4()?;
    let (h, w) = (oh / factor, ow / factor);
    let mut gx = Tensor::zeros([n, c, h, w]);
    for plane in 0..n * c {
        let src = &grad_out.data()[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut gx.data_mut()[plane * h * w..(plane + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let d = &mut dst[(i / factor) * w + j / factor];
                *d = *d + src[i * ow + j];
            }
        }
    }
    Ok(gx)
}

/// Channel-wise log-softmax of `[n, k, h, w]` logits, written into `out`.
pub fn log_softmax_channels<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, k, h, w) = logits.dims4()?;
    let p = h * w;
    let mut out = Tensor::zeros(logits.shape().to_vec());
    let src = logits.data();
    let dst = out.data_mut();
    for b in 0..n {
        let base = b * k * p;
        for px in 0..p {
            let mut max = T::neg_infinity();
            for c in 0..k {
                max = max.max(src[base + c * p + px]);
            }
            let mut sum = T::zero();
            for c in 0..k {
                sum = sum + (src[base + c * p + px] - max).exp();
            }
            let lse = max + sum.ln();
            for c in 0..k {
                dst[base + c * p + px] = src[base + c * p + px] - lse;
            }
        }
    }
    Ok(out)
}
