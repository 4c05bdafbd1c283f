//! Proximal operators, the RED fixed-point step, denoisers and the
//! finite-difference kernels used by the TV terms.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{Kernel3, Tensor3};

/// Projection onto the non-negative orthant.
pub fn prox_nonneg<T: Real>(x: &Tensor3<T>) -> Tensor3<T> {
    x.map(|v| v.max(T::zero()))
}

/// Elementwise soft-thresholding, the prox of `lambda * ||.||_1`.
pub fn prox_soft_threshold<T: Real>(x: &Tensor3<T>, lambda: T) -> Result<Tensor3<T>> {
    if !(lambda >= T::zero()) {
        return Err(Error::arg(format!("soft threshold must be >= 0, got {lambda}")));
    }
    Ok(x.map(|v| soft(v, lambda)))
}

#[inline]
pub(crate) fn soft<T: Real>(v: T, lambda: T) -> T {
    if v > lambda {
        v - lambda
    } else if v < -lambda {
        v + lambda
    } else {
        T::zero()
    }
}

/// A frame-wise image transform used as the RED prior.
///
/// Implementations see one `width x height` frame at a time (row-major in
/// `x`) and must write a same-sized, finite result.
pub trait Denoiser<T: Real>: Send + Sync {
    fn denoise_frame(&self, frame: &[T], width: usize, height: usize, out: &mut [T]);

    fn name(&self) -> String;

    /// Applies the denoiser to every frame of `x`.
    fn apply(&self, x: &Tensor3<T>) -> Tensor3<T> {
        let d = x.dims();
        let mut out = Tensor3::zeros(d);
        out.as_mut_slice()
            .par_chunks_mut(d.frame_len())
            .zip(x.as_slice().par_chunks(d.frame_len()))
            .for_each(|(dst, src)| self.denoise_frame(src, d.width, d.height, dst));
        out
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityDenoiser;

impl<T: Real> Denoiser<T> for IdentityDenoiser {
    fn denoise_frame(&self, frame: &[T], _width: usize, _height: usize, out: &mut [T]) {
        out.copy_from_slice(frame);
    }

    fn name(&self) -> String {
        "identity".into()
    }
}

/// Square median filter with replicate-edge padding.
#[derive(Clone, Copy, Debug)]
pub struct MedianDenoiser {
    window: usize,
}

impl MedianDenoiser {
    pub fn window(&self) -> usize {
        self.window
    }
}

pub fn median_denoiser(window: usize) -> Result<MedianDenoiser> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::arg(format!("median window must be odd and >= 1, got {window}")));
    }
    Ok(MedianDenoiser { window })
}

impl<T: Real> Denoiser<T> for MedianDenoiser {
    fn denoise_frame(&self, frame: &[T], width: usize, height: usize, out: &mut [T]) {
        let n = self.window;
        let r = n / 2;
        // Replicate-padded copy so the window gather needs no clamping.
        let pw = width + 2 * r;
        let mut padded = Vec::with_capacity(pw * (height + 2 * r));
        for pz in 0..height + 2 * r {
            let row = &frame[pz.saturating_sub(r).min(height - 1) * width..][..width];
            padded.extend(std::iter::repeat_n(row[0], r));
            padded.extend_from_slice(row);
            padded.extend(std::iter::repeat_n(row[width - 1], r));
        }
        let mut buf = vec![T::zero(); n * n];
        let mid = buf.len() / 2;
        for z in 0..height {
            for x in 0..width {
                for (dz, chunk) in buf.chunks_exact_mut(n).enumerate() {
                    let start = (z + dz) * pw + x;
                    chunk.copy_from_slice(&padded[start..start + n]);
                }
                let (_, m, _) = buf.select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
                out[x + width * z] = *m;
            }
        }
    }

    fn name(&self) -> String {
        format!("median{}", self.window)
    }
}

/// The running RED prox iterate carried across ADMM iterations.
#[derive(Clone, Debug)]
pub struct RedProxState<T> {
    pub v: Tensor3<T>,
}

impl<T: Real> RedProxState<T> {
    pub fn zeros(dims: crate::tensor::Dims3) -> Self {
        RedProxState {
            v: Tensor3::zeros(dims),
        }
    }
}

/// One fixed-point step of the RED proximal map:
/// `v = (rho2 * x + lambda2 * f(v_prev)) / (rho2 + lambda2)`.
pub fn prox_red_step<T: Real>(
    x: &Tensor3<T>,
    state: &RedProxState<T>,
    lambda2: T,
    rho2: T,
    denoiser: &dyn Denoiser<T>,
) -> Result<(Tensor3<T>, RedProxState<T>)> {
    x.require_same_dims(&state.v)?;
    let mut next = state.clone();
    red_step_in_place(x.as_slice(), &mut next.v, lambda2, rho2, denoiser)?;
    Ok((next.v.clone(), next))
}

pub(crate) fn red_step_in_place<T: Real>(
    x: &[T],
    v: &mut Tensor3<T>,
    lambda2: T,
    rho2: T,
    denoiser: &dyn Denoiser<T>,
) -> Result<()> {
    if !(lambda2 >= T::zero()) {
        return Err(Error::arg(format!("lambda2 must be >= 0, got {lambda2}")));
    }
    if !(rho2 > T::zero()) {
        return Err(Error::arg(format!("rho2 must be > 0, got {rho2}")));
    }
    if x.len() != v.len() {
        return Err(Error::shape("RED state does not match the input stack"));
    }
    let denoised = if lambda2 == T::zero() {
        None
    } else {
        Some(denoiser.apply(v))
    };
    let v = v.as_mut_slice();
    match denoised {
        None => v.copy_from_slice(x),
        Some(f) => {
            for ((vi, &xi), &fi) in v.iter_mut().zip(x).zip(f.as_slice()) {
                *vi = red_combine(xi, fi, lambda2, rho2);
            }
        }
    }
    Ok(())
}

/// `(rho2 * x + lambda2 * f) / (rho2 + lambda2)` for one sample.
#[inline]
pub(crate) fn red_combine<T: Real>(x: T, f: T, lambda2: T, rho2: T) -> T {
    if lambda2 == T::zero() {
        x
    } else {
        (rho2 * x + lambda2 * f) / (rho2 + lambda2)
    }
}

/// Backward-difference kernels `[0, 1, -1]` along `x`, `z` and `t`.
pub fn derivative_kernels<T: Real>() -> [Kernel3<T>; 3] {
    let taps = [T::zero(), T::one(), -T::one()];
    [
        Kernel3::along_axis(0, taps),
        Kernel3::along_axis(1, taps),
        Kernel3::along_axis(2, taps),
    ]
}
