//! Sparse deconvolution solvers built on inner-loop-free ADMM.
//!
//! All four methods share one iteration: an `l1` + non-negativity split on
//! `X`, optional splits on derivatives of `A * X` (total variation) or on
//! `A * X` itself (RED), and a closed-form Fourier-domain X-update.

mod admm;
mod engine;

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::prox::{median_denoiser, Denoiser, IdentityDenoiser};
use crate::scalar::Real;
use crate::tensor::{conv_slicewise, Kernel2, Tensor3};

pub use admm::{x_update_3dtv, x_update_red_tv, AdmmState, IterationStats, Split, Term};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Decon,
    MfDecon,
    Mf3dTv,
    MfRedTv,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Decon, Method::MfDecon, Method::Mf3dTv, Method::MfRedTv];

    pub fn name(self) -> &'static str {
        match self {
            Method::Decon => "decon",
            Method::MfDecon => "mf-decon",
            Method::Mf3dTv => "mf-3dtv",
            Method::MfRedTv => "mf-red-tv",
        }
    }

    /// Split terms used by the method, in a fixed order.
    pub fn terms(self) -> &'static [Term] {
        match self {
            Method::Decon | Method::MfDecon => &[Term::Sparsity],
            Method::Mf3dTv => &[Term::Sparsity, Term::TvX, Term::TvZ, Term::TvT],
            Method::MfRedTv => &[Term::Sparsity, Term::Red, Term::TvT],
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            Error::config(format!(
                "unknown method '{s}' (expected decon, mf-decon, mf-3dtv or mf-red-tv)"
            ))
        })
    }
}

/// Denoiser used by the RED prior.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DenoiserSpec {
    Median { window: usize },
    Identity,
}

impl DenoiserSpec {
    pub fn build<T: Real>(self) -> Result<Box<dyn Denoiser<T>>> {
        Ok(match self {
            DenoiserSpec::Median { window } => Box::new(median_denoiser(window)?),
            DenoiserSpec::Identity => Box::new(IdentityDenoiser),
        })
    }
}

impl fmt::Display for DenoiserSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DenoiserSpec::Median { window } => write!(f, "median:{window}"),
            DenoiserSpec::Identity => f.write_str("identity"),
        }
    }
}

impl FromStr for DenoiserSpec {
    type Err = Error;

    /// Accepts `identity`, `median` (5x5) or `median:<window>`.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "identity" => Ok(DenoiserSpec::Identity),
            None if s == "median" => Ok(DenoiserSpec::Median { window: 5 }),
            Some(("median", w)) => {
                let window = w
                    .parse()
                    .map_err(|_| Error::config(format!("bad median window '{w}'")))?;
                Ok(DenoiserSpec::Median { window })
            }
            _ => Err(Error::config(format!("unknown denoiser '{s}'"))),
        }
    }
}

/// Hyperparameters of one solve.
///
/// `lambda2`/`rho2` belong to the spatial prior (TV along `x` and `z`, or
/// RED), `lambda3`/`rho3` to the temporal TV term. Weights of terms the
/// method does not use are ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub method: Method,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub rho1: f64,
    pub rho2: f64,
    pub rho3: f64,
    pub alpha: f64,
    pub iterations: usize,
    pub denoiser: Option<DenoiserSpec>,
}

impl SolverConfig {
    /// Published defaults for each method.
    pub fn for_method(method: Method) -> Self {
        let base = SolverConfig {
            method,
            lambda1: 0.1,
            lambda2: 0.0,
            lambda3: 0.0,
            rho1: 10.0,
            rho2: 0.0,
            rho3: 0.0,
            alpha: 20.0,
            iterations: 500,
            denoiser: None,
        };
        match method {
            Method::Decon | Method::MfDecon => base,
            Method::Mf3dTv => SolverConfig {
                lambda2: 0.1,
                lambda3: 0.5,
                rho2: 0.1,
                rho3: 0.1,
                ..base
            },
            Method::MfRedTv => SolverConfig {
                lambda2: 2.0,
                lambda3: 2.0,
                rho2: 1.0,
                rho3: 0.1,
                denoiser: Some(DenoiserSpec::Median { window: 5 }),
                ..base
            },
        }
    }

    pub fn with_iterations(mut self, iterations: usize) -> Self {
        self.iterations = iterations;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("rho1", self.rho1),
            ("rho2", self.rho2),
            ("rho3", self.rho3),
            ("alpha", self.alpha),
        ];
        for (name, v) in weights {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.iterations == 0 {
            return Err(Error::config("iterations must be >= 1"));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::config("alpha must be > 0"));
        }
        let terms = self.method.terms();
        let need = |t: Term| terms.contains(&t);
        if !(self.rho1 > 0.0) {
            return Err(Error::config(format!("rho1 must be > 0 for {}", self.method)));
        }
        if (need(Term::TvX) || need(Term::Red)) && !(self.rho2 > 0.0) {
            return Err(Error::config(format!("rho2 must be > 0 for {}", self.method)));
        }
        if need(Term::TvT) && !(self.rho3 > 0.0) {
            return Err(Error::config(format!("rho3 must be > 0 for {}", self.method)));
        }
        Ok(())
    }

    /// Threshold and penalty of a split term.
    pub(crate) fn weights(&self, term: Term) -> (f64, f64) {
        match term {
            Term::Sparsity => (self.lambda1, self.rho1),
            Term::TvX | Term::TvZ | Term::Red => (self.lambda2, self.rho2),
            Term::TvT => (self.lambda3, self.rho3),
        }
    }
}

/// Output of a solve.
#[derive(Clone, Debug)]
pub struct SolveResult<T> {
    /// Deconvolved stack, projected onto `x >= 0`.
    pub x: Tensor3<T>,
    /// Objective at each iterate before the final projection.
    pub objective: Vec<f64>,
    /// Combined primal residual `sqrt(sum_i ||G_i(X) - Z_i||^2)` per iteration.
    pub primal_residual: Vec<f64>,
    pub wall_time: Duration,
}

impl<T: Real> SolveResult<T> {
    pub fn iterations(&self) -> usize {
        self.objective.len()
    }
}

fn require_method(cfg: &SolverConfig, method: Method) -> Result<()> {
    if cfg.method != method {
        return Err(Error::config(format!(
            "configuration is for {}, expected {method}",
            cfg.method
        )));
    }
    Ok(())
}

/// Single-frame sparse deconvolution; `y` must have one frame.
pub fn decon_single_frame<T: Real>(y: &Tensor3<T>, a: &Kernel2<T>, cfg: &SolverConfig) -> Result<SolveResult<T>> {
    require_method(cfg, Method::Decon)?;
    if y.frames() != 1 {
        return Err(Error::shape(format!(
            "single-frame deconvolution needs K = 1, got {} frames",
            y.frames()
        )));
    }
    AdmmState::new(y, a, cfg)?.run()
}

/// Joint sparse deconvolution of all frames.
pub fn mf_decon<T: Real>(y: &Tensor3<T>, a: &Kernel2<T>, cfg: &SolverConfig) -> Result<SolveResult<T>> {
    require_method(cfg, Method::MfDecon)?;
    AdmmState::new(y, a, cfg)?.run()
}

/// Multi-frame deconvolution with spatial and temporal total variation.
pub fn mf_decon_3dtv<T: Real>(y: &Tensor3<T>, a: &Kernel2<T>, cfg: &SolverConfig) -> Result<SolveResult<T>> {
    require_method(cfg, Method::Mf3dTv)?;
    AdmmState::new(y, a, cfg)?.run()
}

/// Multi-frame deconvolution with a spatial RED prior and temporal TV.
pub fn mf_decon_red_tv<T: Real>(y: &Tensor3<T>, a: &Kernel2<T>, cfg: &SolverConfig) -> Result<SolveResult<T>> {
    require_method(cfg, Method::MfRedTv)?;
    AdmmState::new(y, a, cfg)?.run()
}

/// [`mf_decon_red_tv`] with a caller-supplied denoiser.
pub fn mf_decon_red_tv_with<T: Real>(
    y: &Tensor3<T>,
    a: &Kernel2<T>,
    cfg: &SolverConfig,
    denoiser: Box<dyn Denoiser<T>>,
) -> Result<SolveResult<T>> {
    require_method(cfg, Method::MfRedTv)?;
    AdmmState::with_denoiser(y, a, cfg, Some(denoiser))?.run()
}

/// Runs whichever method `cfg` selects.
pub fn solve<T: Real>(y: &Tensor3<T>, a: &Kernel2<T>, cfg: &SolverConfig) -> Result<SolveResult<T>> {
    match cfg.method {
        Method::Decon => decon_single_frame(y, a, cfg),
        Method::MfDecon => mf_decon(y, a, cfg),
        Method::Mf3dTv => mf_decon_3dtv(y, a, cfg),
        Method::MfRedTv => mf_decon_red_tv(y, a, cfg),
    }
}

/// Like [`solve`], but `decon` accepts a stack of any length and
/// deconvolves its frames independently, in parallel. The traces are
/// summed over frames (residuals in quadrature).
pub fn solve_stack<T: Real>(y: &Tensor3<T>, a: &Kernel2<T>, cfg: &SolverConfig) -> Result<SolveResult<T>> {
    if cfg.method != Method::Decon || y.frames() == 1 {
        return solve(y, a, cfg);
    }
    let start = Instant::now();
    let parts = (0..y.frames())
        .into_par_iter()
        .map(|t| decon_single_frame(&y.frames_range(t, 1)?, a, cfg))
        .collect::<Result<Vec<_>>>()?;
    let n = cfg.iterations;
    let mut objective = vec![0.0; n];
    let mut residual_sq = vec![0.0; n];
    let mut data = Vec::with_capacity(y.len());
    for p in parts {
        for (o, v) in objective.iter_mut().zip(&p.objective) {
            *o += v;
        }
        for (r, v) in residual_sq.iter_mut().zip(&p.primal_residual) {
            *r += v * v;
        }
        data.extend(p.x.into_vec());
    }
    Ok(SolveResult {
        x: Tensor3::new(y.width(), y.height(), y.frames(), data)?,
        objective,
        primal_residual: residual_sq.into_iter().map(f64::sqrt).collect(),
        wall_time: start.elapsed(),
    })
}

/// Objective value of a candidate solution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub value: f64,
    /// `max(-x)`, zero when `x` is non-negative.
    pub nonneg_violation: f64,
}

/// `0.5 ||y - A*x||^2 + lambda1 ||x||_1` plus the method's TV terms.
///
/// Computed in the spatial domain. The RED prior has no closed-form value
/// and is not included.
pub fn objective_value<T: Real>(
    y: &Tensor3<T>,
    a: &Kernel2<T>,
    x: &Tensor3<T>,
    cfg: &SolverConfig,
) -> Result<Objective> {
    y.require_same_dims(x)?;
    let ax = conv_slicewise(x, a)?;
    let data: f64 = y
        .as_slice()
        .iter()
        .zip(ax.as_slice())
        .map(|(&u, &v)| (u - v).as_f64().powi(2))
        .sum::<f64>()
        * 0.5;
    let mut value = data + cfg.lambda1 * x.l1_norm();
    for &term in cfg.method.terms() {
        if let Some(axis) = term.axis() {
            let (lambda, _) = cfg.weights(term);
            value += lambda * circular_diff_l1(&ax, axis);
        }
    }
    let nonneg_violation = x.as_slice().iter().fold(0.0f64, |m, &v| m.max(-v.as_f64()));
    Ok(Objective {
        value,
        nonneg_violation,
    })
}

/// `sum |u - shift(u)|` for the backward difference along `axis`.
fn circular_diff_l1<T: Real>(u: &Tensor3<T>, axis: usize) -> f64 {
    let d = u.dims();
    let mut sum = 0.0;
    for t in 0..d.frames {
        for z in 0..d.height {
            for x in 0..d.width {
                let prev = match axis {
                    0 => u.get((x + d.width - 1) % d.width, z, t),
                    1 => u.get(x, (z + d.height - 1) % d.height, t),
                    _ => u.get(x, z, (t + d.frames - 1) % d.frames),
                };
                sum += (u.get(x, z, t) - prev).as_f64().abs();
            }
        }
    }
    sum
}

/// Mean absolute temporal difference of `A * x`.
pub fn temporal_variation<T: Real>(x: &Tensor3<T>, a: &Kernel2<T>) -> Result<f64> {
    let ax = conv_slicewise(x, a)?;
    Ok(circular_diff_l1(&ax, 2) / x.len() as f64)
}
