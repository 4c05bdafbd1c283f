//! Dense spatiotemporal tensors, small convolution kernels and circular
//! (periodic) convolution in the spatial domain.
//!
//! Axis order is fixed for every buffer in the crate: `x` (lateral, width)
//! varies fastest, then `z` (axial, height), then `t` (frame). The linear
//! index of `(x, z, t)` is `x + W * (z + H * t)`.
//!
//! Kernels have odd extents on every axis and their centre sample is the
//! origin, so a kernel entry at `(i, j)` acts at offset
//! `(i - (w - 1) / 2, j - (h - 1) / 2)`.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Extents of a [`Tensor3`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims3 {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
}

impl Dims3 {
    pub fn new(width: usize, height: usize, frames: usize) -> Self {
        Dims3 { width, height, frames }
    }

    pub fn len(&self) -> usize {
        self.width * self.height * self.frames
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame_len(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn index(&self, x: usize, z: usize, t: usize) -> usize {
        x + self.width * (z + self.height * t)
    }
}

impl std::fmt::Display for Dims3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.width, self.height, self.frames)
    }
}

/// A `W x H x K` real tensor: a stack of `K` frames of `W x H` pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3<T> {
    dims: Dims3,
    data: Vec<T>,
}

impl<T: Real> Tensor3<T> {
    /// Wraps `data` laid out in `x, z, t` order.
    ///
    /// Fails if any extent is zero, the length does not match, or a value
    /// is not finite.
    pub fn new(width: usize, height: usize, frames: usize, data: Vec<T>) -> Result<Self> {
        let dims = Dims3::new(width, height, frames);
        if dims.is_empty() {
            return Err(Error::shape(format!("tensor extents must be >= 1, got {dims}")));
        }
        if data.len() != dims.len() {
            return Err(Error::shape(format!(
                "tensor {dims} needs {} values, got {}",
                dims.len(),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::arg(format!("non-finite tensor value at linear index {i}")));
        }
        Ok(Tensor3 { dims, data })
    }

    pub fn zeros(dims: Dims3) -> Self {
        Self::filled(dims, T::zero())
    }

    pub fn filled(dims: Dims3, value: T) -> Self {
        assert!(!dims.is_empty(), "tensor extents must be >= 1");
        Tensor3 {
            dims,
            data: vec![value; dims.len()],
        }
    }

    pub fn from_fn(dims: Dims3, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        assert!(!dims.is_empty(), "tensor extents must be >= 1");
        let mut data = Vec::with_capacity(dims.len());
        for t in 0..dims.frames {
            for z in 0..dims.height {
                for x in 0..dims.width {
                    data.push(f(x, z, t));
                }
            }
        }
        Tensor3 { dims, data }
    }

    /// Builds a tensor from buffers that are known to be well formed.
    pub(crate) fn from_raw(dims: Dims3, data: Vec<T>) -> Self {
        debug_assert_eq!(dims.len(), data.len());
        Tensor3 { dims, data }
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn width(&self) -> usize {
        self.dims.width
    }

    pub fn height(&self) -> usize {
        self.dims.height
    }

    pub fn frames(&self) -> usize {
        self.dims.frames
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, z: usize, t: usize) -> T {
        self.data[self.dims.index(x, z, t)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, z: usize, t: usize, v: T) {
        let i = self.dims.index(x, z, t);
        self.data[i] = v;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn frame(&self, t: usize) -> &[T] {
        let n = self.dims.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [T] {
        let n = self.dims.frame_len();
        &mut self.data[t * n..(t + 1) * n]
    }

    /// Copies frames `[start, start + count)` into a new tensor.
    pub fn frames_range(&self, start: usize, count: usize) -> Result<Self> {
        if count == 0 || start + count > self.dims.frames {
            return Err(Error::shape(format!(
                "frame range {start}..{} outside 0..{}",
                start + count,
                self.dims.frames
            )));
        }
        let n = self.dims.frame_len();
        let dims = Dims3::new(self.dims.width, self.dims.height, count);
        Ok(Tensor3::from_raw(
            dims,
            self.data[start * n..(start + count) * n].to_vec(),
        ))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor3 {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.require_same_dims(other)?;
        Ok(Tensor3 {
            dims: self.dims,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn require_same_dims(&self, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "tensor dimensions differ: {} vs {}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    /// Squared Frobenius norm, accumulated in `f64` in index order.
    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64().powi(2)).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// Entrywise l1 norm.
    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64().abs()).sum()
    }

    pub fn max_value(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn min_value(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    /// Maximum absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.dims, other.dims);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// `||self - other|| / max(||other||, tiny)`.
    pub fn relative_error(&self, reference: &Self) -> f64 {
        assert_eq!(self.dims, reference.dims);
        let num: f64 = self
            .data
            .iter()
            .zip(&reference.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
            .sum();
        num.sqrt() / reference.norm().max(f64::MIN_POSITIVE)
    }

    pub fn cast<U: Real>(&self) -> Tensor3<U> {
        Tensor3 {
            dims: self.dims,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Whole-pixel circular shift of every frame.
    pub fn shifted(&self, dx: isize, dz: isize) -> Self {
        let d = self.dims;
        Tensor3::from_fn(d, |x, z, t| {
            let sx = wrap(x as isize - dx, d.width);
            let sz = wrap(z as isize - dz, d.height);
            self.get(sx, sz, t)
        })
    }
}

#[inline]
pub(crate) fn wrap(i: isize, n: usize) -> usize {
    i.rem_euclid(n as isize) as usize
}

fn require_odd(name: &str, extent: usize) -> Result<()> {
    if extent == 0 || extent.is_multiple_of(2) {
        return Err(Error::arg(format!(
            "kernel {name} extent must be odd and >= 1, got {extent}"
        )));
    }
    Ok(())
}

/// A `w x h` spatial kernel (the imaging PSF).
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel2<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Real> Kernel2<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        require_odd("width", width)?;
        require_odd("height", height)?;
        if data.len() != width * height {
            return Err(Error::shape(format!(
                "kernel {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("non-finite kernel value"));
        }
        Ok(Kernel2 { width, height, data })
    }

    /// The 1x1 identity kernel.
    pub fn delta() -> Self {
        Kernel2 {
            width: 1,
            height: 1,
            data: vec![T::one()],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i + self.width * j]
    }

    /// Signed offset of column `i` and row `j` relative to the kernel centre.
    #[inline]
    pub fn offset(&self, i: usize, j: usize) -> (isize, isize) {
        (
            i as isize - (self.width as isize - 1) / 2,
            j as isize - (self.height as isize - 1) / 2,
        )
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub fn max_value(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    /// Reverses the kernel along both axes: `(i, j) -> (w-1-i, h-1-j)`.
    pub fn flipped(&self) -> Self {
        let mut data = self.data.clone();
        data.reverse();
        Kernel2 {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn fits(&self, dims: Dims3) -> Result<()> {
        if self.width > dims.width || self.height > dims.height {
            return Err(Error::shape(format!(
                "kernel {}x{} does not fit in {dims} frames",
                self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Kernel2<U> {
        Kernel2 {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// A small 3D kernel: the finite-difference operators and the 3D delta.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel3<T> {
    extents: [usize; 3],
    data: Vec<T>,
}

impl<T: Real> Kernel3<T> {
    pub fn new(extents: [usize; 3], data: Vec<T>) -> Result<Self> {
        for (name, e) in ["x", "z", "t"].iter().zip(extents) {
            require_odd(name, e)?;
        }
        if data.len() != extents.iter().product::<usize>() {
            return Err(Error::shape(format!(
                "kernel {:?} needs {} values, got {}",
                extents,
                extents.iter().product::<usize>(),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("non-finite kernel value"));
        }
        Ok(Kernel3 { extents, data })
    }

    /// The 3D Kronecker delta.
    pub fn delta() -> Self {
        Kernel3 {
            extents: [1, 1, 1],
            data: vec![T::one()],
        }
    }

    /// A three-tap kernel `taps` laid along `axis` (0 = x, 1 = z, 2 = t).
    pub fn along_axis(axis: usize, taps: [T; 3]) -> Self {
        assert!(axis < 3, "axis must be 0, 1 or 2");
        let mut extents = [1, 1, 1];
        extents[axis] = 3;
        Kernel3 {
            extents,
            data: taps.to_vec(),
        }
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> T {
        self.data[i + self.extents[0] * (j + self.extents[1] * k)]
    }

    #[inline]
    pub fn offset(&self, i: usize, j: usize, k: usize) -> (isize, isize, isize) {
        let c = |e: usize| (e as isize - 1) / 2;
        (
            i as isize - c(self.extents[0]),
            j as isize - c(self.extents[1]),
            k as isize - c(self.extents[2]),
        )
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    /// Reverses the kernel along all three axes.
    pub fn flipped(&self) -> Self {
        let mut data = self.data.clone();
        data.reverse();
        Kernel3 {
            extents: self.extents,
            data,
        }
    }

    pub fn fits(&self, dims: Dims3) -> Result<()> {
        let [a, b, c] = self.extents;
        if a > dims.width || b > dims.height || c > dims.frames {
            return Err(Error::shape(format!(
                "kernel {a}x{b}x{c} does not fit in tensor {dims}"
            )));
        }
        Ok(())
    }

    /// True when the kernel has no extent along the frame axis.
    pub fn is_spatial(&self) -> bool {
        self.extents[2] == 1
    }
}

/// Circular 2D convolution of every frame of `x` with `a`.
pub fn conv_slicewise<T: Real>(x: &Tensor3<T>, a: &Kernel2<T>) -> Result<Tensor3<T>> {
    let d = x.dims();
    a.fits(d)?;
    let taps: Vec<(isize, isize, T)> = (0..a.height())
        .flat_map(|j| (0..a.width()).map(move |i| (i, j)))
        .filter_map(|(i, j)| {
            let v = a.get(i, j);
            (v != T::zero()).then(|| {
                let (ox, oz) = a.offset(i, j);
                (ox, oz, v)
            })
        })
        .collect();
    let mut out = Tensor3::zeros(d);
    for t in 0..d.frames {
        let src = x.frame(t);
        let dst = out.frame_mut(t);
        for z in 0..d.height {
            for xx in 0..d.width {
                let mut acc = T::zero();
                for &(ox, oz, v) in &taps {
                    let sx = wrap(xx as isize - ox, d.width);
                    let sz = wrap(z as isize - oz, d.height);
                    acc = acc + v * src[sx + d.width * sz];
                }
                dst[xx + d.width * z] = acc;
            }
        }
    }
    Ok(out)
}

/// Circular 3D convolution of `x` with `k`.
pub fn conv3<T: Real>(x: &Tensor3<T>, k: &Kernel3<T>) -> Result<Tensor3<T>> {
    let d = x.dims();
    k.fits(d)?;
    let [ex, ez, et] = k.extents();
    let mut taps = Vec::new();
    for kk in 0..et {
        for j in 0..ez {
            for i in 0..ex {
                let v = k.get(i, j, kk);
                if v != T::zero() {
                    let (ox, oz, ot) = k.offset(i, j, kk);
                    taps.push((ox, oz, ot, v));
                }
            }
        }
    }
    Ok(Tensor3::from_fn(d, |x0, z0, t0| {
        taps.iter().fold(T::zero(), |acc, &(ox, oz, ot, v)| {
            let sx = wrap(x0 as isize - ox, d.width);
            let sz = wrap(z0 as isize - oz, d.height);
            let st = wrap(t0 as isize - ot, d.frames);
            acc + v * x.get(sx, sz, st)
        })
    }))
}
