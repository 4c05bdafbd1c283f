//! Frequency-domain machinery behind the X-update.
//!
//! Spatial axes are transformed frame by frame and each frame spectrum is
//! kept transposed (`z` fastest), which saves one transpose per direction.
//! The temporal difference term couples frames through a circulant along
//! `t`; per spatial frequency that circulant is `c + beta * L` with `L` the
//! circular second difference, which is solved directly as a cyclic
//! tridiagonal system instead of running a third FFT along `t`.

use std::sync::Arc;

use num_complex::Complex;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::scalar::Real;
use crate::tensor::{Dims3, Kernel2};

type Plan<T> = Arc<dyn Fft<T>>;

fn czero<T: Real>() -> Complex<T> {
    Complex::new(T::zero(), T::zero())
}

/// Unnormalised per-frame 2D FFT with a transposed spectral layout.
pub(crate) struct FrameFft<T: Real> {
    w: usize,
    h: usize,
    row: (Plan<T>, Plan<T>),
    col: (Plan<T>, Plan<T>),
    scratch_len: usize,
}

impl<T: Real> FrameFft<T> {
    pub(crate) fn new(w: usize, h: usize) -> Self {
        let mut planner = FftPlanner::new();
        let row = (planner.plan_fft_forward(w), planner.plan_fft_inverse(w));
        let col = (planner.plan_fft_forward(h), planner.plan_fft_inverse(h));
        let scratch_len = [&row.0, &row.1, &col.0, &col.1]
            .iter()
            .map(|p| p.get_inplace_scratch_len().max(p.get_outofplace_scratch_len()))
            .max()
            .unwrap_or(0);
        FrameFft {
            w,
            h,
            row,
            col,
            scratch_len,
        }
    }

    fn frame_len(&self) -> usize {
        self.w * self.h
    }

    /// Spectral index of frequency `(fx, fz)`.
    #[inline]
    pub(crate) fn bin(&self, fx: usize, fz: usize) -> usize {
        fz + self.h * fx
    }

    pub(crate) fn forward(&self, buf: &mut [Complex<T>]) {
        self.run(buf, true);
    }

    pub(crate) fn inverse(&self, buf: &mut [Complex<T>]) {
        self.run(buf, false);
    }

    fn run(&self, buf: &mut [Complex<T>], forward: bool) {
        let p = self.frame_len();
        debug_assert_eq!(buf.len() % p, 0);
        buf.par_chunks_mut(p).for_each_init(
            || (vec![czero(); p], vec![czero(); self.scratch_len]),
            |(tmp, scratch), frame| {
                if forward {
                    self.forward_frame(frame, tmp, scratch)
                } else {
                    self.inverse_frame(frame, tmp, scratch)
                }
            },
        );
    }

    fn forward_frame(&self, frame: &mut [Complex<T>], tmp: &mut [Complex<T>], scratch: &mut [Complex<T>]) {
        let (w, h) = (self.w, self.h);
        if w > 1 {
            self.row.0.process_with_scratch(frame, scratch);
        }
        transpose::transpose(frame, tmp, w, h);
        if h > 1 {
            self.col.0.process_outofplace_with_scratch(tmp, frame, scratch);
        } else {
            frame.copy_from_slice(tmp);
        }
    }

    fn inverse_frame(&self, frame: &mut [Complex<T>], tmp: &mut [Complex<T>], scratch: &mut [Complex<T>]) {
        let (w, h) = (self.w, self.h);
        if h > 1 {
            self.col.1.process_with_scratch(frame, scratch);
        }
        transpose::transpose(frame, tmp, h, w);
        if w > 1 {
            self.row.1.process_outofplace_with_scratch(tmp, frame, scratch);
        } else {
            frame.copy_from_slice(tmp);
        }
    }
}

/// Solver for `(diag + beta * L) x = d` along `t`, one system per bin.
///
/// Planes are visited once forwards and, when frames are coupled, once
/// backwards; see [`XOperator::forward_frame`].
enum Temporal<T> {
    /// No coupling: plain division.
    Diagonal,
    /// Two frames: `L = [[2, -2], [-2, 2]]`, solved in closed form.
    Pair { b: Vec<T>, off: Vec<T>, det_inv: Vec<T> },
    /// Three or more frames: Thomas sweeps plus a Sherman-Morrison correction
    /// for the wrap-around corners.
    Cyclic {
        k: usize,
        off: Vec<T>,
        gamma_inv: Vec<T>,
        inv: Vec<T>,
        corr: Vec<T>,
        fact_inv: Vec<T>,
    },
}

/// Per-solve accumulators of the cyclic sweeps.
pub(crate) struct Sweep<T> {
    omega: Vec<T>,
    y0: Vec<Complex<T>>,
    carry: Vec<Complex<T>>,
    fact: Vec<Complex<T>>,
}

impl<T: Real> Temporal<T> {
    fn build(diag: &[T], beta: &[T], k: usize) -> Self {
        let p = diag.len();
        if k == 1 || beta.iter().all(|&b| b == T::zero()) {
            return Temporal::Diagonal;
        }
        let two = T::lit(2.0);
        if k == 2 {
            let b: Vec<T> = (0..p).map(|s| diag[s] + two * beta[s]).collect();
            let off: Vec<T> = beta.iter().map(|&v| two * v).collect();
            let det_inv = (0..p).map(|s| T::one() / (b[s] * b[s] - off[s] * off[s])).collect();
            return Temporal::Pair { b, off, det_inv };
        }

        let mut off = vec![T::zero(); p];
        let mut gamma_inv = vec![T::zero(); p];
        let mut inv = vec![T::zero(); k * p];
        let mut corr = vec![T::zero(); k * p];
        let mut fact_inv = vec![T::zero(); p];
        let mut cp = vec![T::zero(); k];
        let mut u = vec![T::zero(); k];
        for s in 0..p {
            let b = diag[s] + two * beta[s];
            let o = -beta[s];
            let gamma = -b;
            off[s] = o;
            gamma_inv[s] = T::one() / gamma;
            for t in 0..k {
                let bb = if t == 0 {
                    b - gamma
                } else if t == k - 1 {
                    b - o * o / gamma
                } else {
                    b
                };
                let denom = if t == 0 { bb } else { bb - o * cp[t - 1] };
                let iv = T::one() / denom;
                inv[t * p + s] = iv;
                cp[t] = o * iv;
            }
            // corr = T^{-1} (gamma, 0, .., 0, off)
            u.iter_mut().for_each(|v| *v = T::zero());
            u[0] = gamma;
            u[k - 1] = o;
            let mut prev = T::zero();
            for t in 0..k {
                prev = (u[t] - o * prev) * inv[t * p + s];
                u[t] = prev;
            }
            for t in (0..k - 1).rev() {
                u[t] = u[t] - cp[t] * u[t + 1];
            }
            for t in 0..k {
                corr[t * p + s] = u[t];
            }
            fact_inv[s] = T::one() / (T::one() + u[0] + o * u[k - 1] / gamma);
        }
        Temporal::Cyclic {
            k,
            off,
            gamma_inv,
            inv,
            corr,
            fact_inv,
        }
    }

    fn is_diagonal(&self) -> bool {
        matches!(self, Temporal::Diagonal)
    }

    fn sweep(&self, p: usize) -> Sweep<T> {
        let n = if matches!(self, Temporal::Cyclic { .. }) { p } else { 0 };
        Sweep {
            omega: vec![T::zero(); n],
            y0: vec![czero(); n],
            carry: vec![czero(); n],
            fact: vec![czero(); n],
        }
    }

    /// Forward stage for plane `t`; `prev` is plane `t - 1` after its own
    /// forward stage.
    fn forward(
        &self,
        sw: &mut Sweep<T>,
        t: usize,
        plane: &mut [Complex<T>],
        prev: Option<&[Complex<T>]>,
        diag_inv: &[T],
    ) {
        match self {
            Temporal::Diagonal => {
                for (v, &d) in plane.iter_mut().zip(diag_inv) {
                    *v = *v * d;
                }
            }
            Temporal::Pair { .. } => {}
            Temporal::Cyclic { off, inv, .. } => {
                let p = plane.len();
                let iv = &inv[t * p..(t + 1) * p];
                match prev {
                    None => {
                        for s in 0..p {
                            plane[s] = plane[s] * iv[s];
                            sw.omega[s] = T::one();
                            sw.y0[s] = plane[s];
                        }
                    }
                    Some(prev) => {
                        // The first unknown of the uncorrected solution is a
                        // fixed combination of the forward results; summing it
                        // here saves a pass before the backward sweep.
                        let ivp = &inv[(t - 1) * p..t * p];
                        for s in 0..p {
                            plane[s] = (plane[s] - prev[s] * off[s]) * iv[s];
                            sw.omega[s] = -sw.omega[s] * off[s] * ivp[s];
                            sw.y0[s] = sw.y0[s] + plane[s] * sw.omega[s];
                        }
                    }
                }
            }
        }
    }

    /// Work between the sweeps; `buf` holds all planes.
    fn middle(&self, sw: &mut Sweep<T>, buf: &mut [Complex<T>]) {
        match self {
            Temporal::Diagonal => {}
            Temporal::Pair { b, off, det_inv } => {
                let p = b.len();
                let (p0, p1) = buf.split_at_mut(p);
                for s in 0..p {
                    let (d0, d1) = (p0[s], p1[s]);
                    p0[s] = (d0 * b[s] + d1 * off[s]) * det_inv[s];
                    p1[s] = (d0 * off[s] + d1 * b[s]) * det_inv[s];
                }
            }
            Temporal::Cyclic {
                k,
                off,
                gamma_inv,
                fact_inv,
                ..
            } => {
                let p = off.len();
                let last = &buf[(k - 1) * p..];
                for s in 0..p {
                    sw.fact[s] = (sw.y0[s] + last[s] * (off[s] * gamma_inv[s])) * fact_inv[s];
                }
            }
        }
    }

    /// Backward stage for plane `t`, visited from the last plane down.
    fn backward(&self, sw: &mut Sweep<T>, t: usize, plane: &mut [Complex<T>]) {
        if let Temporal::Cyclic { k, off, inv, corr, .. } = self {
            let p = plane.len();
            let c = &corr[t * p..(t + 1) * p];
            if t + 1 == *k {
                sw.carry.copy_from_slice(plane);
            } else {
                let iv = &inv[t * p..(t + 1) * p];
                for s in 0..p {
                    let y = plane[s] - sw.carry[s] * (off[s] * iv[s]);
                    sw.carry[s] = y;
                    plane[s] = y;
                }
            }
            for s in 0..p {
                plane[s] = plane[s] - sw.fact[s] * c[s];
            }
        }
    }
}

/// Coefficients of the X-update normal equations in the Fourier domain.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Weights {
    pub rho1: f64,
    /// Penalties of the spatial TV terms along `x` and `z` (0 when inactive).
    pub rho_x: f64,
    pub rho_z: f64,
    /// Penalty of a plain `A * X` split (the RED term; 0 when inactive).
    pub rho_ax: f64,
    /// Penalty of the temporal TV term (0 when inactive).
    pub rho_t: f64,
    pub alpha: f64,
}

/// Scratch buffers for the per-frame transforms.
pub(crate) struct Workspace<T: Real> {
    tmp: Vec<Complex<T>>,
    scratch: Vec<Complex<T>>,
    sweep: Sweep<T>,
}

/// Precomputed operator for `X = (h + rho1 + A' B A)^{-1} W`.
///
/// Input and output go through one packed complex buffer: the real part
/// carries a signal added to `W` directly and the imaginary part a signal
/// that is multiplied by `A'` first. The output holds `X` in the real part
/// and `A * X` in the imaginary part.
///
/// The solve is driven frame by frame: [`XOperator::forward_frame`] for
/// `t = 0..K` in order, then [`XOperator::finish`]. Frames are finished
/// eagerly when nothing couples them in time.
pub(crate) struct XOperator<T: Real> {
    dims: Dims3,
    fft: FrameFft<T>,
    fa: Vec<Complex<T>>,
    neg: Vec<usize>,
    diag_inv: Vec<T>,
    temporal: Temporal<T>,
    h: T,
    scale: T,
}

impl<T: Real> XOperator<T> {
    pub(crate) fn new(dims: Dims3, a: &Kernel2<T>, wts: Weights) -> Self {
        let (w, h, k) = (dims.width, dims.height, dims.frames);
        let p = w * h;
        let fft = FrameFft::new(w, h);

        let mut fa: Vec<Complex<T>> = vec![czero(); p];
        for j in 0..a.height() {
            for i in 0..a.width() {
                let (dx, dz) = a.offset(i, j);
                let x = crate::tensor::wrap(dx, w);
                let z = crate::tensor::wrap(dz, h);
                fa[x + w * z].re = fa[x + w * z].re + a.get(i, j);
            }
        }
        let mut tmp = vec![czero(); p];
        let mut scratch = vec![czero(); fft.scratch_len];
        fft.forward_frame(&mut fa, &mut tmp, &mut scratch);

        let mut neg = vec![0; p];
        for fx in 0..w {
            for fz in 0..h {
                neg[fft.bin(fx, fz)] = fft.bin((w - fx) % w, (h - fz) % h);
            }
        }

        let power: Vec<f64> = fa.iter().map(|c| c.norm_sqr().as_f64()).collect();
        let norm_sq = power.iter().cloned().fold(0.0, f64::max);
        let hh = wts.alpha * norm_sq;
        let lap = |f: usize, n: usize| 2.0 - 2.0 * (2.0 * std::f64::consts::PI * f as f64 / n as f64).cos();
        let mut diag = vec![T::zero(); p];
        let mut beta = vec![T::zero(); p];
        for fx in 0..w {
            for fz in 0..h {
                let s = fft.bin(fx, fz);
                let spatial = wts.rho_x * lap(fx, w) + wts.rho_z * lap(fz, h) + wts.rho_ax;
                diag[s] = T::lit(wts.rho1 + hh + power[s] * spatial);
                beta[s] = T::lit(wts.rho_t * power[s]);
            }
        }
        let temporal = Temporal::build(&diag, &beta, k);
        let diag_inv = diag.iter().map(|&d| T::one() / d).collect();

        XOperator {
            dims,
            fft,
            fa,
            neg,
            diag_inv,
            temporal,
            h: T::lit(hh),
            scale: T::one() / T::lit(p as f64),
        }
    }

    /// The majorisation constant `alpha * max |F(A)|^2`.
    pub(crate) fn h(&self) -> T {
        self.h
    }

    pub(crate) fn workspace(&self) -> Workspace<T> {
        let p = self.dims.frame_len();
        Workspace {
            tmp: vec![czero(); p],
            scratch: vec![czero(); self.fft.scratch_len],
            sweep: self.temporal.sweep(p),
        }
    }

    /// Solves the X-update in place; see the type-level docs for the packing.
    pub(crate) fn apply(&self, buf: &mut [Complex<T>]) {
        let mut ws = self.workspace();
        for t in 0..self.dims.frames {
            self.forward_frame(t, buf, &mut ws);
        }
        self.finish(buf, &mut ws);
    }

    /// Transforms packed frame `t` and runs its forward stage. Frames
    /// `0..t` must already have been through this call.
    pub(crate) fn forward_frame(&self, t: usize, buf: &mut [Complex<T>], ws: &mut Workspace<T>) {
        let p = self.dims.frame_len();
        let (done, rest) = buf.split_at_mut(t * p);
        let plane = &mut rest[..p];
        self.fft.forward_frame(plane, &mut ws.tmp, &mut ws.scratch);
        self.combine(plane);
        let prev = if t == 0 { None } else { Some(&done[(t - 1) * p..]) };
        self.temporal.forward(&mut ws.sweep, t, plane, prev, &self.diag_inv);
        if self.temporal.is_diagonal() {
            self.output(plane, ws);
        }
    }

    /// Completes the solve after every frame went through `forward_frame`.
    pub(crate) fn finish(&self, buf: &mut [Complex<T>], ws: &mut Workspace<T>) {
        if self.temporal.is_diagonal() {
            return;
        }
        let p = self.dims.frame_len();
        self.temporal.middle(&mut ws.sweep, buf);
        for (t, plane) in buf.chunks_mut(p).enumerate().rev() {
            self.temporal.backward(&mut ws.sweep, t, plane);
            self.output(plane, ws);
        }
    }

    /// Splits the two packed real signals and combines them into `F(W)`.
    fn combine(&self, plane: &mut [Complex<T>]) {
        let half = T::lit(0.5);
        let w_at = |u: Complex<T>, v: Complex<T>, fa: Complex<T>| {
            let f1 = (u + v.conj()) * half;
            // (u - conj(v)) / 2i
            let d = u - v.conj();
            let f2 = Complex::new(d.im * half, -d.re * half);
            f1 + fa.conj() * f2
        };
        for s in 0..plane.len() {
            let ns = self.neg[s];
            if ns < s {
                continue;
            }
            let (a, b) = (plane[s], plane[ns]);
            plane[s] = w_at(a, b, self.fa[s]);
            if ns != s {
                plane[ns] = w_at(b, a, self.fa[ns]);
            }
        }
    }

    /// Packs `X + i A X` for a solved plane and returns it to the spatial domain.
    fn output(&self, plane: &mut [Complex<T>], ws: &mut Workspace<T>) {
        for (v, &fa) in plane.iter_mut().zip(&self.fa) {
            let x = *v * self.scale;
            *v = x + Complex::new(T::zero(), T::one()) * fa * x;
        }
        self.fft.inverse_frame(plane, &mut ws.tmp, &mut ws.scratch);
    }

    /// `A * x` by the same transforms, for consistency with the X-update.
    pub(crate) fn blur(&self, x: &[T]) -> Vec<T> {
        let p = self.dims.frame_len();
        let mut buf: Vec<Complex<T>> = x.iter().map(|&v| Complex::new(v, T::zero())).collect();
        self.fft.forward(&mut buf);
        buf.par_chunks_mut(p).for_each(|plane| {
            for (v, &fa) in plane.iter_mut().zip(&self.fa) {
                *v = *v * fa * self.scale;
            }
        });
        self.fft.inverse(&mut buf);
        buf.into_iter().map(|c| c.re).collect()
    }
}
