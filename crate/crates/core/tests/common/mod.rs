#![allow(dead_code)]

use mfdecon::solver::{AdmmState, Method, SolverConfig, Split, Term};
use mfdecon::tensor::{Dims3, Kernel2, Tensor3};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_stack(d: Dims3, seed: u64) -> Tensor3<f64> {
    let mut r = rng(seed);
    Tensor3::from_fn(d, |_, _, _| r.gen_range(-1.0..1.0))
}

pub fn random_kernel(w: usize, h: usize, seed: u64) -> Kernel2<f64> {
    let mut r = rng(seed);
    Kernel2::new(w, h, (0..w * h).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap()
}

fn idx(d: Dims3, x: isize, z: isize, t: isize) -> usize {
    let w = |v: isize, n: usize| v.rem_euclid(n as isize) as usize;
    w(x, d.width) + d.width * (w(z, d.height) + d.height * w(t, d.frames))
}

/// Dense matrix of circular per-frame convolution with `a` (centre at the origin).
pub fn conv_matrix(d: Dims3, a: &Kernel2<f64>) -> DMatrix<f64> {
    let n = d.len();
    let mut m = DMatrix::zeros(n, n);
    let (cw, ch) = ((a.width() / 2) as isize, (a.height() / 2) as isize);
    for t in 0..d.frames as isize {
        for z in 0..d.height as isize {
            for x in 0..d.width as isize {
                for j in 0..a.height() {
                    for i in 0..a.width() {
                        let (ox, oz) = (i as isize - cw, j as isize - ch);
                        m[(idx(d, x, z, t), idx(d, x - ox, z - oz, t))] += a.get(i, j);
                    }
                }
            }
        }
    }
    m
}

/// Dense backward circular difference along `axis`.
pub fn diff_matrix(d: Dims3, axis: usize) -> DMatrix<f64> {
    let n = d.len();
    let mut m = DMatrix::zeros(n, n);
    for t in 0..d.frames as isize {
        for z in 0..d.height as isize {
            for x in 0..d.width as isize {
                let i = idx(d, x, z, t);
                let j = match axis {
                    0 => idx(d, x - 1, z, t),
                    1 => idx(d, x, z - 1, t),
                    _ => idx(d, x, z, t - 1),
                };
                m[(i, i)] += 1.0;
                m[(i, j)] -= 1.0;
            }
        }
    }
    m
}

pub fn vec_of(x: &Tensor3<f64>) -> DVector<f64> {
    DVector::from_column_slice(x.as_slice())
}

pub fn tensor_of(d: Dims3, v: &DVector<f64>) -> Tensor3<f64> {
    Tensor3::new(d.width, d.height, d.frames, v.as_slice().to_vec()).unwrap()
}

/// `G` of a split: the linear map of `X` it constrains.
pub fn term_matrix(d: Dims3, term: Term, a: &DMatrix<f64>) -> DMatrix<f64> {
    match term {
        Term::Sparsity => DMatrix::identity(d.len(), d.len()),
        Term::Red => a.clone(),
        Term::TvX => diff_matrix(d, 0) * a,
        Term::TvZ => diff_matrix(d, 1) * a,
        Term::TvT => diff_matrix(d, 2) * a,
    }
}

pub fn weights(cfg: &SolverConfig, term: Term) -> (f64, f64) {
    match term {
        Term::Sparsity => (cfg.lambda1, cfg.rho1),
        Term::TvX | Term::TvZ | Term::Red => (cfg.lambda2, cfg.rho2),
        Term::TvT => (cfg.lambda3, cfg.rho3),
    }
}

/// `alpha * ||A||^2` with the spectral norm, from a dense eigen-decomposition.
pub fn dense_h(a: &DMatrix<f64>, alpha: f64) -> f64 {
    let ata = a.transpose() * a;
    alpha * ata.symmetric_eigenvalues().max()
}

/// Dense X-update: solves the linearised normal equations directly.
pub fn dense_x_update(
    cfg: &SolverConfig,
    a: &DMatrix<f64>,
    y: &DVector<f64>,
    x: &DVector<f64>,
    splits: &[(Term, DVector<f64>, DVector<f64>)],
    d: Dims3,
) -> DVector<f64> {
    let n = d.len();
    let h = dense_h(a, cfg.alpha);
    let mut m = DMatrix::identity(n, n) * h;
    let mut rhs = x * h + a.transpose() * (y - a * x);
    for (term, z, u) in splits {
        let g = term_matrix(d, *term, a);
        let (_, rho) = weights(cfg, *term);
        m += g.transpose() * &g * rho;
        rhs += g.transpose() * (z - u) * rho;
    }
    m.lu().solve(&rhs).expect("dense system is non-singular")
}

pub fn soft(v: f64, lambda: f64) -> f64 {
    v.signum() * (v.abs() - lambda).max(0.0)
}

/// A split's term with its `Z` and dual as flat vectors.
pub type SplitVectors = (Term, DVector<f64>, DVector<f64>);

/// Straightforward ADMM on dense matrices: Z from the previous X, X from
/// fresh Z and stale duals, then dual ascent. `denoise` maps a whole stack.
/// The returned duals are the ones the last X-update consumed.
pub fn dense_admm(
    cfg: &SolverConfig,
    y: &Tensor3<f64>,
    a: &Kernel2<f64>,
    iterations: usize,
    denoise: &dyn Fn(&Tensor3<f64>) -> Tensor3<f64>,
) -> (Tensor3<f64>, Vec<SplitVectors>) {
    let d = y.dims();
    let am = conv_matrix(d, a);
    let yv = vec_of(y);
    let mut x = DVector::zeros(d.len());
    let mut splits: Vec<_> = cfg
        .method
        .terms()
        .iter()
        .map(|&t| (t, DVector::zeros(d.len()), DVector::zeros(d.len())))
        .collect();
    for it in 0..iterations {
        for (term, z, u) in splits.iter_mut() {
            let g = term_matrix(d, *term, &am) * &x;
            let v = &g + &*u;
            let (lambda, rho) = weights(cfg, *term);
            *z = match term {
                Term::Sparsity => v.map(|e| soft(e.max(0.0), lambda)),
                Term::Red => {
                    if lambda == 0.0 {
                        v
                    } else {
                        let f = vec_of(&denoise(&tensor_of(d, z)));
                        (v * rho + f * lambda) / (rho + lambda)
                    }
                }
                _ => v.map(|e| soft(e, lambda)),
            };
        }
        x = dense_x_update(cfg, &am, &yv, &x, &splits, d);
        if it + 1 == iterations {
            break;
        }
        for (term, z, u) in splits.iter_mut() {
            let g = term_matrix(d, *term, &am) * &x;
            *u += g - &*z;
        }
    }
    (tensor_of(d, &x), splits)
}

pub fn set_random_state(state: &mut AdmmState<f64>, seed: u64) {
    let d = state.dims();
    state.set_x(random_stack(d, seed)).unwrap();
    for (i, term) in state.terms().into_iter().enumerate() {
        let s = Split {
            z: random_stack(d, seed + 10 + 2 * i as u64),
            dual: random_stack(d, seed + 11 + 2 * i as u64),
        };
        state.set_split(term, s).unwrap();
    }
}

pub fn config(method: Method) -> SolverConfig {
    SolverConfig::for_method(method)
}

pub fn rel(a: &Tensor3<f64>, b: &Tensor3<f64>) -> f64 {
    a.relative_error(b)
}
