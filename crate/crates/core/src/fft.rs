//! Discrete Fourier transforms over [`Tensor3`] buffers and the transfer
//! functions of convolution kernels.
//!
//! The forward transform is unnormalised and the inverse carries the `1/N`
//! factor, so `F(k (*) x) = F(k) . F(x)` holds for the circular convolutions
//! in [`crate::tensor`].

use std::sync::Arc;

use num_complex::Complex;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{wrap, Dims3, Kernel2, Kernel3, Tensor3};

/// Which axes a plan transforms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transform {
    /// Full 3D transform over `x`, `z` and `t`.
    Volume,
    /// Independent 2D transforms of each frame; the frame axis is untouched.
    PerFrame,
}

/// A complex `W x H x K` array in the same axis order as [`Tensor3`].
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum3<T> {
    dims: Dims3,
    transform: Transform,
    data: Vec<Complex<T>>,
}

impl<T: Real> Spectrum3<T> {
    /// 3D spectrum of a real tensor.
    pub fn forward(x: &Tensor3<T>) -> Self {
        Fft3::new(x.dims()).spectrum_of(x)
    }

    /// Inverse transform, keeping the real part.
    ///
    /// Returns the tensor and the largest imaginary residue relative to the
    /// largest real magnitude.
    pub fn inverse_real(&self) -> (Tensor3<T>, f64) {
        let mut plan = Fft3::with_transform(self.dims, self.transform);
        plan.real_inverse(self)
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn transform(&self) -> Transform {
        self.transform
    }

    pub fn as_slice(&self) -> &[Complex<T>] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Complex<T>] {
        &mut self.data
    }

    pub fn conj(&self) -> Self {
        Spectrum3 {
            dims: self.dims,
            transform: self.transform,
            data: self.data.iter().map(|c| c.conj()).collect(),
        }
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        if self.dims != other.dims || self.transform != other.transform {
            return Err(Error::shape("spectra differ in extent or transform"));
        }
        Ok(Spectrum3 {
            dims: self.dims,
            transform: self.transform,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect(),
        })
    }

    /// Squared magnitude of every bin.
    pub fn power(&self) -> Vec<T> {
        self.data.iter().map(|c| c.norm_sqr()).collect()
    }

    pub fn max_power(&self) -> T {
        self.data.iter().map(|c| c.norm_sqr()).fold(T::zero(), T::max)
    }
}

/// Something with a finite set of taps that can be placed on a periodic grid.
pub trait ConvKernel<T> {
    /// `(dx, dz, dt, value)` for every nonzero tap.
    fn taps(&self) -> Vec<(isize, isize, isize, T)>;
    fn check_fits(&self, dims: Dims3) -> Result<()>;
}

impl<T: Real> ConvKernel<T> for Kernel2<T> {
    fn taps(&self) -> Vec<(isize, isize, isize, T)> {
        let mut out = Vec::new();
        for j in 0..self.height() {
            for i in 0..self.width() {
                let v = self.get(i, j);
                if v != T::zero() {
                    let (ox, oz) = self.offset(i, j);
                    out.push((ox, oz, 0, v));
                }
            }
        }
        out
    }

    fn check_fits(&self, dims: Dims3) -> Result<()> {
        self.fits(dims)
    }
}

impl<T: Real> ConvKernel<T> for Kernel3<T> {
    fn taps(&self) -> Vec<(isize, isize, isize, T)> {
        let [ex, ez, et] = self.extents();
        let mut out = Vec::new();
        for k in 0..et {
            for j in 0..ez {
                for i in 0..ex {
                    let v = self.get(i, j, k);
                    if v != T::zero() {
                        let (ox, oz, ot) = self.offset(i, j, k);
                        out.push((ox, oz, ot, v));
                    }
                }
            }
        }
        out
    }

    fn check_fits(&self, dims: Dims3) -> Result<()> {
        self.fits(dims)
    }
}

/// Transfer function of `k` on a periodic grid of extent `dims`.
///
/// The kernel origin is placed at index `(0, 0, 0)` with negative offsets
/// wrapped, so `F^-1(transfer_function(k) . F(x))` equals the circular
/// convolution of `x` with `k`, and the conjugate spectrum corresponds to
/// convolution with the flipped kernel.
pub fn transfer_function<T: Real, K: ConvKernel<T>>(k: &K, dims: Dims3) -> Result<Spectrum3<T>> {
    Fft3::new(dims).kernel_spectrum(k)
}

/// A reusable FFT plan for one tensor shape.
pub struct Fft3<T: Real> {
    dims: Dims3,
    transform: Transform,
    x: (Arc<dyn Fft<T>>, Arc<dyn Fft<T>>),
    z: (Arc<dyn Fft<T>>, Arc<dyn Fft<T>>),
    t: (Arc<dyn Fft<T>>, Arc<dyn Fft<T>>),
    scratch: Vec<Complex<T>>,
}

impl<T: Real> Fft3<T> {
    pub fn new(dims: Dims3) -> Self {
        Self::with_transform(dims, Transform::Volume)
    }

    pub fn per_frame(dims: Dims3) -> Self {
        Self::with_transform(dims, Transform::PerFrame)
    }

    pub fn with_transform(dims: Dims3, transform: Transform) -> Self {
        let mut planner = FftPlanner::new();
        let mut pair = |n: usize| (planner.plan_fft_forward(n), planner.plan_fft_inverse(n));
        let x = pair(dims.width);
        let z = pair(dims.height);
        let t = pair(dims.frames);
        Fft3 {
            dims,
            transform,
            x,
            z,
            t,
            scratch: Vec::new(),
        }
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn transform(&self) -> Transform {
        self.transform
    }

    /// Number of samples a transform sums over.
    pub fn transform_len(&self) -> usize {
        match self.transform {
            Transform::Volume => self.dims.len(),
            Transform::PerFrame => self.dims.frame_len(),
        }
    }

    /// Linear index of the bin at the negated frequency of bin `i`.
    #[inline]
    pub fn neg_index(&self, i: usize) -> usize {
        let d = self.dims;
        let x = i % d.width;
        let z = (i / d.width) % d.height;
        let t = i / d.frame_len();
        let nx = (d.width - x) % d.width;
        let nz = (d.height - z) % d.height;
        let nt = match self.transform {
            Transform::Volume => (d.frames - t) % d.frames,
            Transform::PerFrame => t,
        };
        d.index(nx, nz, nt)
    }

    pub fn forward(&mut self, buf: &mut [Complex<T>]) {
        self.run(buf, true);
    }

    /// Normalised inverse transform.
    pub fn inverse(&mut self, buf: &mut [Complex<T>]) {
        self.run(buf, false);
        let scale = T::one() / T::lit(self.transform_len() as f64);
        buf.par_iter_mut().for_each(|c| *c = *c * scale);
    }

    fn run(&mut self, buf: &mut [Complex<T>], forward: bool) {
        let d = self.dims;
        assert_eq!(buf.len(), d.len(), "buffer does not match plan extents");
        let pick = |p: &(Arc<dyn Fft<T>>, Arc<dyn Fft<T>>)| {
            if forward {
                p.0.clone()
            } else {
                p.1.clone()
            }
        };
        let (fx, fz, ft) = (pick(&self.x), pick(&self.z), pick(&self.t));
        let (w, h, k) = (d.width, d.height, d.frames);

        buf.par_chunks_mut(w * h).for_each(|frame| {
            if w > 1 {
                fx.process(frame);
            }
            if h > 1 {
                let mut cols = vec![Complex::new(T::zero(), T::zero()); w * h];
                for z in 0..h {
                    for x in 0..w {
                        cols[z + h * x] = frame[x + w * z];
                    }
                }
                fz.process(&mut cols);
                for x in 0..w {
                    for z in 0..h {
                        frame[x + w * z] = cols[z + h * x];
                    }
                }
            }
        });

        if self.transform == Transform::Volume && k > 1 {
            let plane = w * h;
            self.scratch.resize(d.len(), Complex::new(T::zero(), T::zero()));
            let tmp = &mut self.scratch;
            {
                let src: &[Complex<T>] = buf;
                tmp.par_chunks_mut(k * w).enumerate().for_each(|(z, chunk)| {
                    for x in 0..w {
                        let p = x + w * z;
                        for t in 0..k {
                            chunk[t + k * x] = src[p + plane * t];
                        }
                    }
                });
            }
            tmp.par_chunks_mut(k).for_each(|line| ft.process(line));
            let tmp: &[Complex<T>] = tmp;
            buf.par_chunks_mut(plane).enumerate().for_each(|(t, frame)| {
                for (p, v) in frame.iter_mut().enumerate() {
                    *v = tmp[t + k * p];
                }
            });
        }
    }

    /// Forward transform of a real tensor.
    pub fn spectrum_of(&mut self, x: &Tensor3<T>) -> Spectrum3<T> {
        assert_eq!(x.dims(), self.dims, "tensor does not match plan extents");
        let mut data: Vec<Complex<T>> = x.as_slice().iter().map(|&v| Complex::new(v, T::zero())).collect();
        self.forward(&mut data);
        Spectrum3 {
            dims: self.dims,
            transform: self.transform,
            data,
        }
    }

    /// Transfer function of `k` in this plan's transform domain.
    ///
    /// Under [`Transform::PerFrame`] the kernel must be purely spatial; it is
    /// replicated into every frame so each frame carries the 2D spectrum.
    pub fn kernel_spectrum<K: ConvKernel<T>>(&mut self, k: &K) -> Result<Spectrum3<T>> {
        let d = self.dims;
        k.check_fits(d)?;
        let taps = k.taps();
        let zero = Complex::new(T::zero(), T::zero());
        let mut data = vec![zero; d.len()];
        match self.transform {
            Transform::Volume => {
                for &(ox, oz, ot, v) in &taps {
                    let i = d.index(wrap(ox, d.width), wrap(oz, d.height), wrap(ot, d.frames));
                    data[i].re = data[i].re + v;
                }
            }
            Transform::PerFrame => {
                if taps.iter().any(|&(_, _, ot, _)| ot != 0) {
                    return Err(Error::shape("temporal kernel used with a per-frame transform"));
                }
                for t in 0..d.frames {
                    for &(ox, oz, _, v) in &taps {
                        let i = d.index(wrap(ox, d.width), wrap(oz, d.height), t);
                        data[i].re = data[i].re + v;
                    }
                }
            }
        }
        self.forward(&mut data);
        Ok(Spectrum3 {
            dims: d,
            transform: self.transform,
            data,
        })
    }

    /// Inverse transform keeping the real part; also reports the largest
    /// imaginary residue relative to the largest real magnitude.
    pub fn real_inverse(&mut self, s: &Spectrum3<T>) -> (Tensor3<T>, f64) {
        assert_eq!(s.dims, self.dims, "spectrum does not match plan extents");
        assert_eq!(s.transform, self.transform, "spectrum from a different transform");
        let mut data = s.data.clone();
        self.inverse(&mut data);
        let max_re = data.iter().map(|c| c.re.abs().as_f64()).fold(0.0, f64::max);
        let max_im = data.iter().map(|c| c.im.abs().as_f64()).fold(0.0, f64::max);
        let residue = if max_re > 0.0 { max_im / max_re } else { max_im };
        let real = data.into_iter().map(|c| c.re).collect();
        (Tensor3::from_raw(self.dims, real), residue)
    }
}
