//! ADMM state and the fused per-iteration sweep.

use std::time::Instant;

use num_complex::Complex;

use super::engine::{Weights, Workspace, XOperator};
use super::{Method, SolveResult, SolverConfig};
use crate::error::{Error, Result};
use crate::prox::{prox_nonneg, red_combine, Denoiser};
use crate::scalar::Real;
use crate::tensor::{Dims3, Kernel2, Tensor3};

/// A split variable `Z_i` constraining some linear map of `X`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Term {
    /// `Z1 = X`, carrying the `l1` penalty and non-negativity.
    Sparsity,
    /// `Z = d1 * (A * X)`, total variation along `x`.
    TvX,
    /// `Z = d2 * (A * X)`, total variation along `z`.
    TvZ,
    /// `Z = d3 * (A * X)`, total variation along `t`.
    TvT,
    /// `Z = A * X`, handled by the RED proximal step.
    Red,
}

impl Term {
    pub(crate) fn axis(self) -> Option<usize> {
        match self {
            Term::TvX => Some(0),
            Term::TvZ => Some(1),
            Term::TvT => Some(2),
            Term::Sparsity | Term::Red => None,
        }
    }
}

/// Primal auxiliary and scaled dual of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct Split<T> {
    pub z: Tensor3<T>,
    pub dual: Tensor3<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationStats {
    pub iteration: usize,
    pub objective: f64,
    pub primal_residual: f64,
}

#[derive(Default)]
struct Sums {
    data: f64,
    penalty: f64,
    residual_sq: f64,
}

/// Internal form of a split: `q = Z - dual`, the quantity the X-update
/// consumes, next to the dual itself.
struct Stored<T> {
    term: Term,
    q: Vec<T>,
    dual: Vec<T>,
}

/// Everything one solve carries between iterations.
///
/// Between calls to [`AdmmState::step`] the state holds `X^(m)`, `Z^(m)` and
/// the duals `Z~^(m-1)`: exactly what the X-update of iteration `m` consumed.
/// The dual ascent of iteration `m` is applied at the start of the next step,
/// in the same sweep as the Z-updates, so a step touches each frame of every
/// variable once while it is in cache. At `m = 0` everything is zero and the
/// pending ascent is a no-op.
pub struct AdmmState<T: Real> {
    cfg: SolverConfig,
    y: Tensor3<T>,
    /// `X` in the real part, `A * X` in the imaginary part.
    xa: Vec<Complex<T>>,
    splits: Vec<Stored<T>>,
    lambdas: Vec<T>,
    rhos: Vec<T>,
    op: XOperator<T>,
    ws: Workspace<T>,
    denoiser: Option<Box<dyn Denoiser<T>>>,
    iteration: usize,
}

impl<T: Real> AdmmState<T> {
    pub fn new(y: &Tensor3<T>, a: &Kernel2<T>, cfg: &SolverConfig) -> Result<Self> {
        Self::with_denoiser(y, a, cfg, None)
    }

    /// Like [`AdmmState::new`]; `denoiser` overrides the configured one.
    pub fn with_denoiser(
        y: &Tensor3<T>,
        a: &Kernel2<T>,
        cfg: &SolverConfig,
        denoiser: Option<Box<dyn Denoiser<T>>>,
    ) -> Result<Self> {
        cfg.validate()?;
        let dims = y.dims();
        a.fits(dims)?;
        let terms = cfg.method.terms();
        let has = |t: Term| terms.contains(&t);
        let denoiser = match (has(Term::Red), denoiser) {
            (false, _) => None,
            (true, Some(d)) => Some(d),
            (true, None) => Some(
                cfg.denoiser
                    .ok_or_else(|| Error::config("mf-red-tv needs a denoiser"))?
                    .build()?,
            ),
        };
        let weights = Weights {
            rho1: cfg.rho1,
            rho_x: if has(Term::TvX) { cfg.rho2 } else { 0.0 },
            rho_z: if has(Term::TvZ) { cfg.rho2 } else { 0.0 },
            rho_ax: if has(Term::Red) { cfg.rho2 } else { 0.0 },
            rho_t: if has(Term::TvT) { cfg.rho3 } else { 0.0 },
            alpha: cfg.alpha,
        };
        let splits = terms
            .iter()
            .map(|&term| Stored {
                term,
                q: vec![T::zero(); dims.len()],
                dual: vec![T::zero(); dims.len()],
            })
            .collect();
        let op = XOperator::new(dims, a, weights);
        Ok(AdmmState {
            cfg: cfg.clone(),
            y: y.clone(),
            xa: vec![Complex::new(T::zero(), T::zero()); dims.len()],
            splits,
            lambdas: terms.iter().map(|&t| T::lit(cfg.weights(t).0)).collect(),
            rhos: terms.iter().map(|&t| T::lit(cfg.weights(t).1)).collect(),
            ws: op.workspace(),
            op,
            denoiser,
            iteration: 0,
        })
    }

    pub fn config(&self) -> &SolverConfig {
        &self.cfg
    }

    pub fn dims(&self) -> Dims3 {
        self.y.dims()
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// The majorisation constant `h = alpha * ||A||^2`.
    pub fn h(&self) -> T {
        self.op.h()
    }

    pub fn x(&self) -> Tensor3<T> {
        Tensor3::from_raw(self.dims(), self.xa.iter().map(|c| c.re).collect())
    }

    /// `A * X` for the current `X`.
    pub fn ax(&self) -> Tensor3<T> {
        Tensor3::from_raw(self.dims(), self.xa.iter().map(|c| c.im).collect())
    }

    /// Replaces `X` (and the cached `A * X`).
    pub fn set_x(&mut self, x: Tensor3<T>) -> Result<()> {
        self.y.require_same_dims(&x)?;
        let ax = self.op.blur(x.as_slice());
        for ((c, &xv), &av) in self.xa.iter_mut().zip(x.as_slice()).zip(&ax) {
            *c = Complex::new(xv, av);
        }
        Ok(())
    }

    pub fn terms(&self) -> Vec<Term> {
        self.splits.iter().map(|s| s.term).collect()
    }

    /// Current `Z` and dual of a split.
    pub fn split(&self, term: Term) -> Option<Split<T>> {
        let s = self.splits.iter().find(|s| s.term == term)?;
        let z = s.q.iter().zip(&s.dual).map(|(&q, &u)| q + u).collect();
        Some(Split {
            z: Tensor3::from_raw(self.dims(), z),
            dual: Tensor3::from_raw(self.dims(), s.dual.clone()),
        })
    }

    /// Overwrites `Z` and the dual of a split.
    pub fn set_split(&mut self, term: Term, split: Split<T>) -> Result<()> {
        self.y.require_same_dims(&split.z)?;
        self.y.require_same_dims(&split.dual)?;
        let s = self
            .splits
            .iter_mut()
            .find(|s| s.term == term)
            .ok_or_else(|| Error::arg(format!("{} has no {term:?} split", self.cfg.method)))?;
        s.q = split
            .z
            .as_slice()
            .iter()
            .zip(split.dual.as_slice())
            .map(|(&z, &u)| z - u)
            .collect();
        s.dual = split.dual.into_vec();
        Ok(())
    }

    /// Objective at the current `X` and residual against the current `Z`.
    pub fn stats(&self) -> IterationStats {
        let d = self.dims();
        let p = d.frame_len();
        let mut sums = Sums::default();
        let mut g = vec![T::zero(); p];
        let mut ax = vec![T::zero(); p];
        let mut ax_prev = vec![T::zero(); p];
        for t in 0..d.frames {
            let off = t * p;
            extract_im(&self.xa, d, t, &mut ax);
            extract_im(&self.xa, d, (t + d.frames - 1) % d.frames, &mut ax_prev);
            sums.data += sq_diff_sum(&self.y.as_slice()[off..off + p], &ax);
            for (s, &lambda) in self.splits.iter().zip(&self.lambdas) {
                term_source(d, s.term, &self.xa[off..off + p], &ax, &ax_prev, &mut g);
                let mut acc = Lanes::default();
                for ((&gv, &q), &u) in g.iter().zip(&s.q[off..off + p]).zip(&s.dual[off..off + p]) {
                    let r = gv - q - u;
                    acc.push(gv.abs(), r * r);
                }
                let (l1, r2) = acc.total();
                if s.term != Term::Red {
                    sums.penalty += lambda.as_f64() * l1;
                }
                sums.residual_sq += r2;
            }
        }
        self.summarise(&sums)
    }

    fn summarise(&self, s: &Sums) -> IterationStats {
        IterationStats {
            iteration: self.iteration,
            objective: 0.5 * s.data + s.penalty,
            primal_residual: s.residual_sq.sqrt(),
        }
    }

    /// One ADMM iteration: pending dual ascent, Z-updates, X-update.
    pub fn step(&mut self) -> Result<()> {
        self.advance();
        Ok(())
    }

    /// Runs the configured number of iterations and projects the result.
    pub fn run(mut self) -> Result<SolveResult<T>> {
        let start = Instant::now();
        let n = self.cfg.iterations;
        let mut objective = Vec::with_capacity(n);
        let mut primal_residual = Vec::with_capacity(n);
        for i in 0..n {
            let s = self.advance();
            if i > 0 {
                objective.push(s.objective);
                primal_residual.push(s.primal_residual);
            }
        }
        let last = self.stats();
        objective.push(last.objective);
        primal_residual.push(last.primal_residual);
        let wall_time = start.elapsed();
        log::debug!(
            "{} finished {n} iterations in {wall_time:.2?}, final objective {:.6e}",
            self.cfg.method,
            last.objective
        );
        Ok(SolveResult {
            x: prox_nonneg(&self.x()),
            objective,
            primal_residual,
            wall_time,
        })
    }

    /// X-update from the current splits and `X`, without changing the state.
    pub fn x_update(&self) -> Tensor3<T> {
        let d = self.dims();
        let mut buf = self.xa.clone();
        let mut tmp = Scratch::new(d.frame_len());
        for t in 0..d.frames {
            assemble_frame(
                d,
                t,
                &mut buf,
                self.y.as_slice(),
                &self.splits,
                &self.rhos,
                self.op.h(),
                &mut tmp,
            );
        }
        self.op.apply(&mut buf);
        Tensor3::from_raw(d, buf.into_iter().map(|c| c.re).collect())
    }

    /// The fused sweep. Returns the statistics of the iterate it started from.
    fn advance(&mut self) -> IterationStats {
        let d = self.dims();
        let k = d.frames;
        let h = self.op.h();
        let mut sums = Sums::default();
        let mut sc = Scratch::new(d.frame_len());
        let mut buf = std::mem::take(&mut self.xa);
        let denoiser = self.denoiser.as_deref();

        // Frame t's assembly reads the new q of frame t + 1 (adjoint of the
        // temporal difference), so the Z-updates run one frame ahead. They
        // also read A X of the previous frame, which assembly overwrites, so
        // it is kept in `ax_prev`.
        extract_im(&buf, d, k - 1, &mut sc.ax_prev);
        z_update_frame(
            d,
            0,
            &buf,
            &mut self.splits,
            &self.lambdas,
            &self.rhos,
            denoiser,
            &mut sc,
            &mut sums,
        );
        for t in 0..k {
            if t + 1 < k {
                std::mem::swap(&mut sc.ax, &mut sc.ax_prev);
                z_update_frame(
                    d,
                    t + 1,
                    &buf,
                    &mut self.splits,
                    &self.lambdas,
                    &self.rhos,
                    denoiser,
                    &mut sc,
                    &mut sums,
                );
            }
            sums.data += assemble_frame(d, t, &mut buf, self.y.as_slice(), &self.splits, &self.rhos, h, &mut sc);
            self.op.forward_frame(t, &mut buf, &mut self.ws);
        }
        self.op.finish(&mut buf, &mut self.ws);
        self.xa = buf;
        let stats = self.summarise(&sums);
        self.iteration += 1;
        stats
    }
}

/// Per-frame scratch buffers.
struct Scratch<T> {
    g: Vec<T>,
    f: Vec<T>,
    ax: Vec<T>,
    ax_prev: Vec<T>,
    re: Vec<T>,
    im: Vec<T>,
}

impl<T: Real> Scratch<T> {
    fn new(p: usize) -> Self {
        let v = || vec![T::zero(); p];
        Scratch {
            g: v(),
            f: v(),
            ax: v(),
            ax_prev: v(),
            re: v(),
            im: v(),
        }
    }
}

/// Four-lane accumulator pair so the sums vectorise.
#[derive(Default)]
struct Lanes<T> {
    a: [T; 4],
    b: [T; 4],
    n: usize,
}

impl<T: Real> Lanes<T> {
    #[inline]
    fn push(&mut self, a: T, b: T) {
        let i = self.n & 3;
        self.a[i] = self.a[i] + a;
        self.b[i] = self.b[i] + b;
        self.n += 1;
    }

    fn total(&self) -> (f64, f64) {
        let s = |v: &[T; 4]| ((v[0] + v[1]) + (v[2] + v[3])).as_f64();
        (s(&self.a), s(&self.b))
    }
}

fn sq_diff_sum<T: Real>(a: &[T], b: &[T]) -> f64 {
    let mut acc = Lanes::default();
    for (&u, &v) in a.iter().zip(b) {
        let r = u - v;
        acc.push(r * r, T::zero());
    }
    acc.total().0
}

fn extract_im<T: Real>(xa: &[Complex<T>], d: Dims3, t: usize, out: &mut [T]) {
    let p = d.frame_len();
    for (o, c) in out.iter_mut().zip(&xa[t * p..(t + 1) * p]) {
        *o = c.im;
    }
}

/// The linear map of `X` a split constrains, on one frame.
fn term_source<T: Real>(d: Dims3, term: Term, xa: &[Complex<T>], ax: &[T], ax_prev: &[T], g: &mut [T]) {
    match term {
        Term::Sparsity => g.iter_mut().zip(xa).for_each(|(o, c)| *o = c.re),
        Term::Red => g.copy_from_slice(ax),
        Term::TvX => diff_x(d.width, ax, g, false),
        Term::TvZ => diff_z(d.width, ax, g, false),
        Term::TvT => g.iter_mut().zip(ax).zip(ax_prev).for_each(|((o, &a), &b)| *o = a - b),
    }
}

#[inline]
fn soft_fast<T: Real>(v: T, lambda: T) -> T {
    v - v.max(-lambda).min(lambda)
}

/// Pending dual ascent followed by the Z-updates of every split on frame `t`.
///
/// Expects `sc.ax_prev` to hold `A X` of frame `t - 1`; leaves `A X` of
/// frame `t` in `sc.ax`.
#[allow(clippy::too_many_arguments)]
fn z_update_frame<T: Real>(
    d: Dims3,
    t: usize,
    xa: &[Complex<T>],
    splits: &mut [Stored<T>],
    lambdas: &[T],
    rhos: &[T],
    denoiser: Option<&dyn Denoiser<T>>,
    sc: &mut Scratch<T>,
    sums: &mut Sums,
) {
    let p = d.frame_len();
    let range = t * p..(t + 1) * p;
    let frame = &xa[range.clone()];
    extract_im(xa, d, t, &mut sc.ax);
    for ((s, &lambda), &rho) in splits.iter_mut().zip(lambdas).zip(rhos) {
        term_source(d, s.term, frame, &sc.ax, &sc.ax_prev, &mut sc.g);
        let q = &mut s.q[range.clone()];
        let u = &mut s.dual[range.clone()];
        if s.term == Term::Red && lambda > T::zero() {
            // The RED iterate is the previous Z = q + U.
            for ((o, &qv), &uv) in sc.re.iter_mut().zip(q.iter()).zip(u.iter()) {
                *o = qv + uv;
            }
            denoiser
                .expect("RED split has a denoiser")
                .denoise_frame(&sc.re, d.width, d.height, &mut sc.f);
        }
        let mut acc = Lanes::default();
        let g = &sc.g;
        // r = G - Z; U' = U + r = G - q; Z' = prox(G + U'); q' = Z' - U'
        let mut update = |zf: &dyn Fn(usize, T) -> T| {
            for i in 0..p {
                let gv = g[i];
                let r = gv - q[i] - u[i];
                acc.push(gv.abs(), r * r);
                let un = gv - q[i];
                u[i] = un;
                q[i] = zf(i, gv + un) - un;
            }
        };
        match s.term {
            Term::Sparsity => update(&|_, v| soft_fast(v.max(T::zero()), lambda)),
            Term::Red => {
                let f = &sc.f;
                update(&|i, v| red_combine(v, f[i], lambda, rho))
            }
            _ => update(&|_, v| soft_fast(v, lambda)),
        }
        let (l1, r2) = acc.total();
        if s.term != Term::Red {
            sums.penalty += lambda.as_f64() * l1;
        }
        sums.residual_sq += r2;
    }
}

/// Packs the right-hand side of frame `t` in place for [`XOperator`]:
/// real part `h X + rho1 q1`, imaginary part `Y - A X + sum_i rho_i d_i' q_i`
/// (plain `rho q` for RED), where `q = Z - dual`.
/// Returns `||Y - A X||^2` over the frame.
#[allow(clippy::too_many_arguments)]
fn assemble_frame<T: Real>(
    d: Dims3,
    t: usize,
    buf: &mut [Complex<T>],
    y: &[T],
    splits: &[Stored<T>],
    rhos: &[T],
    h: T,
    sc: &mut Scratch<T>,
) -> f64 {
    let p = d.frame_len();
    let k = d.frames;
    let off = t * p;
    let frame = &mut buf[off..off + p];
    let mut acc = Lanes::default();
    for (((c, &yv), re), im) in frame
        .iter()
        .zip(&y[off..off + p])
        .zip(sc.re.iter_mut())
        .zip(sc.im.iter_mut())
    {
        let r = yv - c.im;
        acc.push(r * r, T::zero());
        *re = h * c.re;
        *im = r;
    }
    for (s, &rho) in splits.iter().zip(rhos) {
        let q = &s.q[off..off + p];
        match s.term {
            Term::Sparsity => sc.re.iter_mut().zip(q).for_each(|(o, &v)| *o = *o + rho * v),
            Term::Red => sc.im.iter_mut().zip(q).for_each(|(o, &v)| *o = *o + rho * v),
            Term::TvX | Term::TvZ => {
                if s.term == Term::TvX {
                    diff_x(d.width, q, &mut sc.g, true);
                } else {
                    diff_z(d.width, q, &mut sc.g, true);
                }
                sc.im.iter_mut().zip(&sc.g).for_each(|(o, &v)| *o = *o + rho * v);
            }
            Term::TvT => {
                let next = (t + 1) % k * p;
                let qn = &s.q[next..next + p];
                sc.im
                    .iter_mut()
                    .zip(q.iter().zip(qn))
                    .for_each(|(o, (&a, &b))| *o = *o + rho * (a - b));
            }
        }
    }
    for ((c, &re), &im) in frame.iter_mut().zip(&sc.re).zip(&sc.im) {
        *c = Complex::new(re, im);
    }
    acc.total().0
}

/// Circular difference along `x` within one frame: `a(x) - a(x - 1)`
/// (backward) or `a(x) - a(x + 1)` (forward, the adjoint).
fn diff_x<T: Real>(w: usize, a: &[T], out: &mut [T], forward: bool) {
    for (row, o) in a.chunks_exact(w).zip(out.chunks_exact_mut(w)) {
        if forward {
            for x in 0..w - 1 {
                o[x] = row[x] - row[x + 1];
            }
            o[w - 1] = row[w - 1] - row[0];
        } else {
            o[0] = row[0] - row[w - 1];
            for x in 1..w {
                o[x] = row[x] - row[x - 1];
            }
        }
    }
}

/// Circular difference along `z` within one frame.
fn diff_z<T: Real>(w: usize, a: &[T], out: &mut [T], forward: bool) {
    let h = a.len() / w;
    for z in 0..h {
        let other = if forward { (z + 1) % h } else { (z + h - 1) % h };
        let (cur, oth) = (&a[z * w..(z + 1) * w], &a[other * w..(other + 1) * w]);
        for ((o, &u), &v) in out[z * w..(z + 1) * w].iter_mut().zip(cur).zip(oth) {
            *o = u - v;
        }
    }
}

fn require_family(state: &AdmmState<impl Real>, allowed: &[Method]) -> Result<()> {
    if allowed.contains(&state.cfg.method) {
        Ok(())
    } else {
        Err(Error::config(format!(
            "state was built for {}, which uses a different X-update",
            state.cfg.method
        )))
    }
}

/// X-update of the TV family (also used by decon and mf-decon).
pub fn x_update_3dtv<T: Real>(state: &AdmmState<T>) -> Result<Tensor3<T>> {
    require_family(state, &[Method::Decon, Method::MfDecon, Method::Mf3dTv])?;
    Ok(state.x_update())
}

/// X-update with the RED split on `A * X`.
pub fn x_update_red_tv<T: Real>(state: &AdmmState<T>) -> Result<Tensor3<T>> {
    require_family(state, &[Method::MfRedTv])?;
    Ok(state.x_update())
}
