//! 2-D cross-correlation over `[C, H, W]` inputs, lowered to im2col + sgemm.

use crate::error::{GleanError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding so that `H' = ceil(H / stride)`.
    Same,
    /// No padding.
    Valid,
}

/// Resolved geometry of one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: Padding,
    ) -> Result<ConvGeometry> {
        let (c_in, h, w) = match input {
            &[c, h, w] => (c, h, w),
            other => return Err(GleanError::shape(format!("conv input must be [C,H,W], got {other:?}"))),
        };
        let (c_out, kc, kh, kw) = match kernel {
            &[o, i, kh, kw] => (o, i, kh, kw),
            other => {
                return Err(GleanError::shape(format!(
                    "conv kernel must be [C_out,C_in,kh,kw], got {other:?}"
                )))
            }
        };
        if kc != c_in {
            return Err(GleanError::shape(format!(
                "conv channel mismatch: input has {c_in}, kernel expects {kc}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(GleanError::shape(format!("kernel {kh}x{kw} must be odd")));
        }
        if stride == 0 {
            return Err(GleanError::contract("stride must be >= 1"));
        }
        let (out_h, out_w, pad_top, pad_left) = match padding {
            Padding::Same => {
                let oh = h.div_ceil(stride);
                let ow = w.div_ceil(stride);
                let ph = ((oh - 1) * stride + kh).saturating_sub(h);
                let pw = ((ow - 1) * stride + kw).saturating_sub(w);
                (oh, ow, ph / 2, pw / 2)
            }
            Padding::Valid => {
                if h < kh || w < kw {
                    return Err(GleanError::shape(format!(
                        "valid conv: {h}x{w} input smaller than {kh}x{kw} kernel"
                    )));
                }
                ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
            }
        };
        Ok(ConvGeometry {
            c_in,
            c_out,
            h,
            w,
            kh,
            kw,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input coordinate for output index `o` and kernel tap `k`, if in bounds.
    #[inline]
    fn source(o: usize, k: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
        (o * stride + k).checked_sub(pad).filter(|&i| i < len)
    }
}

fn im2col(x: &[f32], g: &ConvGeometry) -> Vec<f32> {
    let p = g.out_pixels();
    let mut cols = vec![0.0f32; g.patch_len() * p];
    let mut row = 0;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let Some(iy) = ConvGeometry::source(oy, i, g.stride, g.pad_top, g.h) else {
                        continue;
                    };
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, d) in out_row.iter_mut().enumerate() {
                        if let Some(ix) = ConvGeometry::source(ox, j, g.stride, g.pad_left, g.w) {
                            *d = src[ix];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

fn col2im_accumulate(cols: &[f32], g: &ConvGeometry, gx: &mut [f32]) {
    let p = g.out_pixels();
    let mut row = 0;
    for c in 0..g.c_in {
        let plane = &mut gx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let Some(iy) = ConvGeometry::source(oy, i, g.stride, g.pad_top, g.h) else {
                        continue;
                    };
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let in_row = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, &v) in in_row.iter().enumerate() {
                        if let Some(ix) = ConvGeometry::source(ox, j, g.stride, g.pad_left, g.w) {
                            dst[ix] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `C[m x n] = beta * C + A[m x k] * B[k x n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the callers size every buffer for the given dims and strides.
    unsafe {
        matrixmultiply::sgemm(
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

/// Cross-correlation of `x: [C_in, H, W]` with `k: [C_out, C_in, kh, kw]`.
pub fn conv2d(
    x: &Tensor,
    k: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    let g = ConvGeometry::new(x.shape(), k.shape(), stride, padding)?;
    if bias.shape() != [g.c_out] {
        return Err(GleanError::shape(format!(
            "conv bias must be [{}], got {:?}",
            g.c_out,
            bias.shape()
        )));
    }
    let p = g.out_pixels();
    let kl = g.patch_len();
    let mut out = vec![0.0f32; g.c_out * p];
    for (o, &b) in bias.data().iter().enumerate() {
        out[o * p..(o + 1) * p].fill(b);
    }
    let cols = im2col(x.data(), &g);
    gemm(
        g.c_out,
        kl,
        p,
        k.data(),
        (kl as isize, 1),
        &cols,
        (p as isize, 1),
        1.0,
        &mut out,
    );
    Tensor::new(vec![g.c_out, g.out_h, g.out_w], out)
}

/// Gradients of a convolution given the upstream gradient `grad_out`.
pub struct ConvGrads {
    pub input: Tensor,
    pub kernel: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    x: &Tensor,
    k: &Tensor,
    stride: usize,
    padding: Padding,
    grad_out: &Tensor,
) -> Result<ConvGrads> {
    let g = ConvGeometry::new(x.shape(), k.shape(), stride, padding)?;
    if grad_out.shape() != [g.c_out, g.out_h, g.out_w] {
        return Err(GleanError::shape(format!(
            "conv grad_out {:?} does not match output [{}, {}, {}]",
            grad_out.shape(),
            g.c_out,
            g.out_h,
            g.out_w
        )));
    }
    let p = g.out_pixels();
    let kl = g.patch_len();
    let go = grad_out.data();

    let grad_bias: Vec<f32> = go.chunks(p).map(|ch| ch.iter().sum()).collect();

    let cols = im2col(x.data(), &g);
    let mut grad_kernel = vec![0.0f32; g.c_out * kl];
    // [C_out x P] * cols^T [P x K]
    gemm(
        g.c_out,
        p,
        kl,
        go,
        (p as isize, 1),
        &cols,
        (1, p as isize),
        0.0,
        &mut grad_kernel,
    );

    // k^T [K x C_out] * grad_out [C_out x P]
    let mut grad_cols = vec![0.0f32; kl * p];
    gemm(
        kl,
        g.c_out,
        p,
        k.data(),
        (1, kl as isize),
        go,
        (p as isize, 1),
        0.0,
        &mut grad_cols,
    );
    let mut grad_input = vec![0.0f32; x.numel()];
    col2im_accumulate(&grad_cols, &g, &mut grad_input);

    Ok(ConvGrads {
        input: Tensor::new(x.shape().to_vec(), grad_input)?,
        kernel: Tensor::new(k.shape().to_vec(), grad_kernel)?,
        bias: Tensor::new(vec![g.c_out], grad_bias)?,
    })
}
