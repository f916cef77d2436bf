//! Same-size 2-D convolution, its adjoint, and its kernel gradient.
//!
//! The forward map is a cross-correlation centred on the kernel:
//!
//! ```text
//! out[y, x, o] = Σ_{dy, dx, i} K[dy, dx, i, o] · in[y + dy - p, x + dx - p, i],   p = k / 2
//! ```
//!
//! With circular padding the map is multiplication by a block matrix of
//! doubly-block-circulant matrices; with zero padding the out-of-range taps
//! are dropped (block Toeplitz). The raw routines are generic over `f32` and
//! `f64` so the spectral oracles can run in double precision.

use std::ops::AddAssign;

use crate::error::{Error, Result};
use crate::tensor::{Kernel, Padding, Tensor};

pub trait Scalar: num_traits::Float + AddAssign + Default + Send + Sync + 'static {}
impl Scalar for f32 {}
impl Scalar for f64 {}

/// Geometry of a same-size convolution on an `h × w` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub m_in: usize,
    pub m_out: usize,
    pub pad: Padding,
}

impl ConvGeom {
    pub fn new(h: usize, w: usize, kernel: &Kernel, pad: Padding) -> Result<Self> {
        let geom = ConvGeom {
            h,
            w,
            k: kernel.k(),
            m_in: kernel.m_in(),
            m_out: kernel.m_out(),
            pad,
        };
        geom.validate()?;
        Ok(geom)
    }

    pub fn validate(&self) -> Result<()> {
        if self.h < self.k || self.w < self.k {
            return Err(Error::shape(format!(
                "spatial size {}x{} smaller than kernel size {}",
                self.h, self.w, self.k
            )));
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        self.h * self.w * self.m_in
    }

    pub fn output_len(&self) -> usize {
        self.h * self.w * self.m_out
    }

    /// Source coordinate of tap `d` for output coordinate `pos` on an axis of
    /// length `len`, or `None` when zero padding drops it.
    #[inline]
    fn source(&self, pos: usize, d: usize, len: usize) -> Option<usize> {
        let p = self.k / 2;
        let s = pos as isize + d as isize - p as isize;
        match self.pad {
            Padding::Circular => Some(s.rem_euclid(len as isize) as usize),
            Padding::Zero => (s >= 0 && s < len as isize).then_some(s as usize),
        }
    }
}

/// `out += K * input`.
pub fn conv2d_raw<T: Scalar>(geom: &ConvGeom, input: &[T], kernel: &[T], out: &mut [T]) {
    let ConvGeom {
        h,
        w,
        k,
        m_in,
        m_out,
        ..
    } = *geom;
    debug_assert_eq!(input.len(), geom.input_len());
    debug_assert_eq!(out.len(), geom.output_len());
    for y in 0..h {
        for x in 0..w {
            let out_px = &mut out[(y * w + x) * m_out..(y * w + x + 1) * m_out];
            for dy in 0..k {
                let Some(sy) = geom.source(y, dy, h) else {
                    continue;
                };
                for dx in 0..k {
                    let Some(sx) = geom.source(x, dx, w) else {
                        continue;
                    };
                    let in_px = &input[(sy * w + sx) * m_in..(sy * w + sx + 1) * m_in];
                    let kbase = (dy * k + dx) * m_in * m_out;
                    for (i, &a) in in_px.iter().enumerate() {
                        let krow = &kernel[kbase + i * m_out..kbase + (i + 1) * m_out];
                        for (acc, &kv) in out_px.iter_mut().zip(krow) {
                            *acc += a * kv;
                        }
                    }
                }
            }
        }
    }
}

/// `out += Kᵀ * grad`, the exact adjoint of [`conv2d_raw`].
pub fn conv2d_adjoint_raw<T: Scalar>(geom: &ConvGeom, grad: &[T], kernel: &[T], out: &mut [T]) {
    let ConvGeom {
        h,
        w,
        k,
        m_in,
        m_out,
        ..
    } = *geom;
    debug_assert_eq!(grad.len(), geom.output_len());
    debug_assert_eq!(out.len(), geom.input_len());
    for y in 0..h {
        for x in 0..w {
            let g_px = &grad[(y * w + x) * m_out..(y * w + x + 1) * m_out];
            for dy in 0..k {
                let Some(sy) = geom.source(y, dy, h) else {
                    continue;
                };
                for dx in 0..k {
                    let Some(sx) = geom.source(x, dx, w) else {
                        continue;
                    };
                    let out_px = &mut out[(sy * w + sx) * m_in..(sy * w + sx + 1) * m_in];
                    let kbase = (dy * k + dx) * m_in * m_out;
                    for (i, acc) in out_px.iter_mut().enumerate() {
                        let krow = &kernel[kbase + i * m_out..kbase + (i + 1) * m_out];
                        let mut s = T::zero();
                        for (&kv, &g) in krow.iter().zip(g_px) {
                            s += kv * g;
                        }
                        *acc += s;
                    }
                }
            }
        }
    }
}

/// `gk += ∂⟨grad, K * input⟩/∂K`.
pub fn conv2d_kernel_grad_raw<T: Scalar>(geom: &ConvGeom, input: &[T], grad: &[T], gk: &mut [T]) {
    let ConvGeom {
        h,
        w,
        k,
        m_in,
        m_out,
        ..
    } = *geom;
    for y in 0..h {
        for x in 0..w {
            let g_px = &grad[(y * w + x) * m_out..(y * w + x + 1) * m_out];
            for dy in 0..k {
                let Some(sy) = geom.source(y, dy, h) else {
                    continue;
                };
                for dx in 0..k {
                    let Some(sx) = geom.source(x, dx, w) else {
                        continue;
                    };
                    let in_px = &input[(sy * w + sx) * m_in..(sy * w + sx + 1) * m_in];
                    let kbase = (dy * k + dx) * m_in * m_out;
                    for (i, &a) in in_px.iter().enumerate() {
                        let row = &mut gk[kbase + i * m_out..kbase + (i + 1) * m_out];
                        for (acc, &g) in row.iter_mut().zip(g_px) {
                            *acc += a * g;
                        }
                    }
                }
            }
        }
    }
}

fn check_input(input: &Tensor, channels: usize, what: &str) -> Result<(usize, usize)> {
    let (h, w, c) = input.hwc()?;
    if c != channels {
        return Err(Error::shape(format!(
            "{what}: input has {c} channels, kernel expects {channels}"
        )));
    }
    Ok((h, w))
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "{what} input ({} non-finite values)",
            t.count_non_finite()
        )))
    }
}

/// Same-size convolution. Rejects non-finite input; see [`conv2d_unchecked`].
pub fn conv2d(input: &Tensor, kernel: &Kernel, pad: Padding) -> Result<Tensor> {
    check_finite(input, "conv2d")?;
    conv2d_unchecked(input, kernel, pad)
}

/// [`conv2d`] without the finiteness check, for divergence probes.
pub fn conv2d_unchecked(input: &Tensor, kernel: &Kernel, pad: Padding) -> Result<Tensor> {
    let (h, w) = check_input(input, kernel.m_in(), "conv2d")?;
    let geom = ConvGeom::new(h, w, kernel, pad)?;
    let mut out = vec![0.0f32; geom.output_len()];
    conv2d_raw(&geom, input.data(), kernel.weights(), &mut out);
    Tensor::new(vec![h, w, kernel.m_out()], out)
}

/// Transposed convolution: the adjoint of [`conv2d`] for the same kernel.
pub fn conv2d_adjoint(input: &Tensor, kernel: &Kernel, pad: Padding) -> Result<Tensor> {
    check_finite(input, "conv2d_adjoint")?;
    conv2d_adjoint_unchecked(input, kernel, pad)
}

pub fn conv2d_adjoint_unchecked(input: &Tensor, kernel: &Kernel, pad: Padding) -> Result<Tensor> {
    let (h, w) = check_input(input, kernel.m_out(), "conv2d_adjoint")?;
    let geom = ConvGeom::new(h, w, kernel, pad)?;
    let mut out = vec![0.0f32; geom.input_len()];
    conv2d_adjoint_raw(&geom, input.data(), kernel.weights(), &mut out);
    Tensor::new(vec![h, w, kernel.m_in()], out)
}

/// Gradient of `⟨grad, K * input⟩` with respect to a `k × k` kernel.
pub fn conv2d_kernel_grad(input: &Tensor, grad: &Tensor, k: usize, pad: Padding) -> Result<Kernel> {
    let (h, w, m_in) = input.hwc()?;
    let (gh, gw, m_out) = grad.hwc()?;
    if (h, w) != (gh, gw) {
        return Err(Error::shape(format!(
            "kernel grad: input {:?} vs grad {:?}",
            input.shape(),
            grad.shape()
        )));
    }
    let mut gk = Kernel::zeros(k, m_in, m_out);
    let geom = ConvGeom::new(h, w, &gk, pad)?;
    conv2d_kernel_grad_raw(&geom, input.data(), grad.data(), gk.weights_mut());
    Ok(gk)
}
