//! Two-dimensional real FFT over `[H, W]` planes.
//!
//! The forward transform keeps the non-negative half of the width axis
//! (`W/2 + 1` bins per row) and is unnormalized. The inverse applies the
//! `1/(H*W)` factor. One-dimensional passes run on `rustfft` in `f64`; the
//! results are stored as `f32` pairs.

use std::cell::RefCell;
use std::sync::Arc;

use rustfft::num_complex::{Complex, Complex32};
use rustfft::{Fft, FftPlanner};

use crate::error::{GleanError, Result};
use crate::tensor::Tensor;

type C64 = Complex<f64>;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    })
}

/// Half-plane spectrum of a real `[H, W]` signal.
#[derive(Clone, Debug, PartialEq)]
pub struct HalfSpectrum {
    height: usize,
    width_full: usize,
    bins: Vec<Complex32>,
}

impl HalfSpectrum {
    pub fn new(height: usize, width_full: usize, bins: Vec<Complex32>) -> Result<Self> {
        check_dims(height, width_full)?;
        let expected = height * half_width(width_full);
        if bins.len() != expected {
            return Err(GleanError::shape(format!(
                "half spectrum {height}x{width_full} needs {expected} bins, got {}",
                bins.len()
            )));
        }
        Ok(HalfSpectrum {
            height,
            width_full,
            bins,
        })
    }

    pub fn zeros(height: usize, width_full: usize) -> Result<Self> {
        check_dims(height, width_full)?;
        Ok(HalfSpectrum {
            height,
            width_full,
            bins: vec![Complex32::new(0.0, 0.0); height * half_width(width_full)],
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width_full(&self) -> usize {
        self.width_full
    }

    /// Number of stored columns, `W/2 + 1`.
    pub fn half_width(&self) -> usize {
        half_width(self.width_full)
    }

    pub fn bins(&self) -> &[Complex32] {
        &self.bins
    }

    pub fn bins_mut(&mut self) -> &mut [Complex32] {
        &mut self.bins
    }

    pub fn bin(&self, row: usize, col: usize) -> Complex32 {
        self.bins[row * self.half_width() + col]
    }

    fn scale_columns(&mut self, f: impl Fn(usize) -> f32) {
        let hw = self.half_width();
        for (i, b) in self.bins.iter_mut().enumerate() {
            *b *= f(i % hw);
        }
    }
}

pub fn half_width(width_full: usize) -> usize {
    width_full / 2 + 1
}

fn check_dims(h: usize, w: usize) -> Result<()> {
    if h < 2 || w < 2 {
        return Err(GleanError::shape(format!("fft plane {h}x{w} is degenerate")));
    }
    if !w.is_multiple_of(2) {
        return Err(GleanError::shape(format!("fft width {w} must be even")));
    }
    Ok(())
}

/// Forward transform of a `[H, W]` tensor.
pub fn rfft2(x: &Tensor) -> Result<HalfSpectrum> {
    let (h, w) = x.dims2()?;
    rfft2_plane(x.data(), h, w)
}

/// Forward transform of one row-major plane.
pub fn rfft2_plane(plane: &[f32], h: usize, w: usize) -> Result<HalfSpectrum> {
    check_dims(h, w)?;
    if plane.len() != h * w {
        return Err(GleanError::shape(format!(
            "plane of {} values is not {h}x{w}",
            plane.len()
        )));
    }
    let hw = half_width(w);
    let row_fft = plan(w, false);
    let col_fft = plan(h, false);

    let mut half = vec![C64::new(0.0, 0.0); h * hw];
    let mut row = vec![C64::new(0.0, 0.0); w];
    for r in 0..h {
        for (dst, &v) in row.iter_mut().zip(&plane[r * w..(r + 1) * w]) {
            *dst = C64::new(v as f64, 0.0);
        }
        row_fft.process(&mut row);
        half[r * hw..(r + 1) * hw].copy_from_slice(&row[..hw]);
    }

    let mut col = vec![C64::new(0.0, 0.0); h];
    for c in 0..hw {
        for r in 0..h {
            col[r] = half[r * hw + c];
        }
        col_fft.process(&mut col);
        for r in 0..h {
            half[r * hw + c] = col[r];
        }
    }

    Ok(HalfSpectrum {
        height: h,
        width_full: w,
        bins: half
            .into_iter()
            .map(|z| Complex32::new(z.re as f32, z.im as f32))
            .collect(),
    })
}

/// Inverse transform with `1/(H*W)` normalization.
///
/// Columns 0 and `W/2` of each row are treated as real after the height
/// pass; their imaginary parts do not contribute.
pub fn irfft2(s: &HalfSpectrum) -> Result<Tensor> {
    let (h, w) = (s.height, s.width_full);
    check_dims(h, w)?;
    let hw = s.half_width();
    if s.bins.len() != h * hw {
        return Err(GleanError::shape("malformed half spectrum"));
    }
    let col_ifft = plan(h, true);
    let row_ifft = plan(w, true);

    let mut half: Vec<C64> = s
        .bins
        .iter()
        .map(|z| C64::new(z.re as f64, z.im as f64))
        .collect();
    let mut col = vec![C64::new(0.0, 0.0); h];
    for c in 0..hw {
        for r in 0..h {
            col[r] = half[r * hw + c];
        }
        col_ifft.process(&mut col);
        for r in 0..h {
            half[r * hw + c] = col[r];
        }
    }

    let norm = 1.0 / (h * w) as f64;
    let mut out = vec![0.0f32; h * w];
    let mut row = vec![C64::new(0.0, 0.0); w];
    for r in 0..h {
        let src = &half[r * hw..(r + 1) * hw];
        row[0] = C64::new(src[0].re, 0.0);
        row[w / 2] = C64::new(src[w / 2].re, 0.0);
        for k in 1..w / 2 {
            row[k] = src[k];
            row[w - k] = src[k].conj();
        }
        row_ifft.process(&mut row);
        for (dst, z) in out[r * w..(r + 1) * w].iter_mut().zip(&row) {
            *dst = (z.re * norm) as f32;
        }
    }
    Tensor::new(vec![h, w], out)
}

/// Adjoint of [`rfft2`] as a real-linear map, for backpropagation.
///
/// `grad` holds `dL/dRe + i dL/dIm` for every stored bin; the result is
/// `dL/dx`.
pub(crate) fn rfft2_adjoint(grad: &HalfSpectrum) -> Result<Tensor> {
    let (h, w) = (grad.height, grad.width_full);
    let mut g = grad.clone();
    let last = w / 2;
    g.scale_columns(|c| if c == 0 || c == last { 1.0 } else { 0.5 });
    Ok(irfft2(&g)?.scale((h * w) as f32))
}

/// Adjoint of [`irfft2`]: maps `dL/dx` to `dL/dRe + i dL/dIm` per bin.
pub(crate) fn irfft2_adjoint(grad: &Tensor) -> Result<HalfSpectrum> {
    let (h, w) = grad.dims2()?;
    let mut s = rfft2(grad)?;
    let norm = 1.0 / (h * w) as f32;
    let last = w / 2;
    s.scale_columns(|c| if c == 0 || c == last { norm } else { 2.0 * norm });
    Ok(s)
}
