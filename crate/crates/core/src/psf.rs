//! Gaussian point spread functions: sampling, patch extraction and
//! least-squares fitting to averaged isolated-bubble patches.

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{wrap, Kernel2, Tensor3};

/// An axis-aligned 2D Gaussian. Widths and offsets are in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianPsfParams {
    pub sigma_x: f64,
    pub sigma_z: f64,
    pub amplitude: f64,
    pub offset_x: f64,
    pub offset_z: f64,
}

impl GaussianPsfParams {
    pub fn centered(sigma_x: f64, sigma_z: f64, amplitude: f64) -> Self {
        GaussianPsfParams {
            sigma_x,
            sigma_z,
            amplitude,
            offset_x: 0.0,
            offset_z: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.sigma_x, self.sigma_z, self.amplitude, self.offset_x, self.offset_z]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.sigma_x <= 0.0 || self.sigma_z <= 0.0 || self.amplitude <= 0.0 {
            return Err(Error::arg(format!(
                "gaussian needs positive finite widths and amplitude, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Value at offset `(dx, dz)` from the nominal centre.
    #[inline]
    pub fn eval(&self, dx: f64, dz: f64) -> f64 {
        let u = dx - self.offset_x;
        let v = dz - self.offset_z;
        self.amplitude
            * (-(u * u / (2.0 * self.sigma_x * self.sigma_x) + v * v / (2.0 * self.sigma_z * self.sigma_z))).exp()
    }

    /// Smallest odd extents covering +-3 sigma on each axis.
    pub fn default_size(&self) -> (usize, usize) {
        let side = |s: f64| 2 * (3.0 * s).ceil() as usize + 1;
        (side(self.sigma_x), side(self.sigma_z))
    }
}

/// Samples `params` on a centred odd-sized grid.
pub fn gaussian_kernel<T: Real>(params: &GaussianPsfParams, size: (usize, usize)) -> Result<Kernel2<T>> {
    params.validate()?;
    let (w, h) = size;
    if w % 2 == 0 || h % 2 == 0 {
        return Err(Error::arg(format!("PSF size must be odd, got {w}x{h}")));
    }
    if (w as f64) < 6.0 * params.sigma_x || (h as f64) < 6.0 * params.sigma_z {
        log::warn!(
            "PSF grid {w}x{h} is narrower than 6 sigma ({:.2}, {:.2}); tails are truncated",
            params.sigma_x,
            params.sigma_z
        );
    }
    let (cx, cz) = ((w / 2) as f64, (h / 2) as f64);
    let mut data = Vec::with_capacity(w * h);
    for j in 0..h {
        for i in 0..w {
            data.push(T::lit(params.eval(i as f64 - cx, j as f64 - cz)));
        }
    }
    Kernel2::new(w, h, data)
}

/// An odd-sized image patch cut around a bubble.
pub type Patch2<T> = Kernel2<T>;

/// Cuts a `(2*half+1)`-square patch centred on `(x, z)` of `frame`,
/// wrapping at the borders like the convolution model.
pub fn extract_patch<T: Real>(stack: &Tensor3<T>, frame: usize, x: usize, z: usize, half: usize) -> Result<Patch2<T>> {
    let d = stack.dims();
    if frame >= d.frames || x >= d.width || z >= d.height {
        return Err(Error::arg(format!(
            "patch centre ({x}, {z}) in frame {frame} lies outside {d}"
        )));
    }
    let side = 2 * half + 1;
    if side > d.width || side > d.height {
        return Err(Error::shape(format!("patch side {side} exceeds frame size")));
    }
    let mut data = Vec::with_capacity(side * side);
    for j in 0..side {
        for i in 0..side {
            let sx = wrap(x as isize + i as isize - half as isize, d.width);
            let sz = wrap(z as isize + j as isize - half as isize, d.height);
            data.push(stack.get(sx, sz, frame));
        }
    }
    Kernel2::new(side, side, data)
}

#[derive(Clone, Copy, Debug)]
pub struct PsfFit {
    pub params: GaussianPsfParams,
    /// Root-mean-square residual of the fit on the averaged patch.
    pub rms: f64,
    pub iterations: usize,
}

const MAX_ITERATIONS: usize = 200;
const REL_TOL: f64 = 1e-10;

/// Averages `patches` and fits a Gaussian (no background term) by
/// Levenberg-Marquardt.
pub fn fit_gaussian_psf<T: Real>(patches: &[Patch2<T>]) -> Result<PsfFit> {
    let first = patches
        .first()
        .ok_or_else(|| Error::arg("at least one patch is required"))?;
    let (w, h) = (first.width(), first.height());
    if patches.iter().any(|p| p.width() != w || p.height() != h) {
        return Err(Error::shape("all patches must share one size"));
    }
    let mut mean = vec![0.0; w * h];
    for p in patches {
        for (m, v) in mean.iter_mut().zip(p.as_slice()) {
            *m += v.as_f64();
        }
    }
    let n = patches.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    fit_gaussian(&mean, w, h)
}

fn fit_gaussian(data: &[f64], w: usize, h: usize) -> Result<PsfFit> {
    if data.iter().all(|&v| v == 0.0) {
        return Err(Error::arg("averaged patch is identically zero"));
    }
    let (cx, cz) = ((w / 2) as f64, (h / 2) as f64);
    let coords: Vec<(f64, f64)> = (0..h)
        .flat_map(|j| (0..w).map(move |i| (i as f64 - cx, j as f64 - cz)))
        .collect();

    // moment-based start: peak height, weighted centroid, second moments
    let weights: Vec<f64> = data.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::arg("averaged patch has no positive intensity"));
    }
    let mx = coords.iter().zip(&weights).map(|(c, w)| c.0 * w).sum::<f64>() / total;
    let mz = coords.iter().zip(&weights).map(|(c, w)| c.1 * w).sum::<f64>() / total;
    let vx = coords
        .iter()
        .zip(&weights)
        .map(|(c, w)| (c.0 - mx).powi(2) * w)
        .sum::<f64>()
        / total;
    let vz = coords
        .iter()
        .zip(&weights)
        .map(|(c, w)| (c.1 - mz).powi(2) * w)
        .sum::<f64>()
        / total;
    let peak = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p = [peak, mx, mz, vx.sqrt().max(0.3), vz.sqrt().max(0.3)];

    let residuals = |p: &[f64; 5]| -> Vec<f64> {
        let g = GaussianPsfParams {
            amplitude: p[0],
            offset_x: p[1],
            offset_z: p[2],
            sigma_x: p[3],
            sigma_z: p[4],
        };
        coords.iter().zip(data).map(|(&(x, z), &d)| g.eval(x, z) - d).collect()
    };
    let cost_of = |r: &[f64]| 0.5 * r.iter().map(|v| v * v).sum::<f64>();

    let mut r = residuals(&p);
    let mut cost = cost_of(&r);
    let mut mu = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    let data_scale = 0.5 * data.iter().map(|v| v * v).sum::<f64>();

    while iterations < MAX_ITERATIONS {
        iterations += 1;
        if cost <= data_scale * 1e-28 {
            converged = true;
            break;
        }
        let (jtj, jtr) = normal_equations(&p, &coords, &r);
        let mut accepted = false;
        for _ in 0..30 {
            let mut a = jtj;
            for k in 0..5 {
                a[k][k] += mu * jtj[k][k].max(1e-12);
            }
            let Some(step) = solve5(a, jtr.map(|v| -v)) else {
                mu *= 10.0;
                continue;
            };
            let mut trial = p;
            for k in 0..5 {
                trial[k] += step[k];
            }
            if trial[3] <= 0.0 || trial[4] <= 0.0 || trial.iter().any(|v| !v.is_finite()) {
                mu *= 10.0;
                continue;
            }
            let tr = residuals(&trial);
            let tc = cost_of(&tr);
            if tc <= cost {
                let decrease = (cost - tc) / cost.max(f64::MIN_POSITIVE);
                p = trial;
                r = tr;
                cost = tc;
                mu = (mu * 0.3).max(1e-12);
                accepted = true;
                if decrease < REL_TOL {
                    converged = true;
                }
                break;
            }
            mu *= 10.0;
        }
        if !accepted || converged {
            // no downhill step at any damping means we sit at a minimum
            converged = true;
            break;
        }
    }

    let rms = (2.0 * cost / data.len() as f64).sqrt();
    if !converged {
        return Err(Error::Fit {
            iterations,
            rms,
            reason: format!("no convergence; last estimate {p:?}"),
        });
    }
    let extent = w.max(h) as f64;
    if p[3] > extent || p[4] > extent || p[0] <= 0.0 {
        return Err(Error::Fit {
            iterations,
            rms,
            reason: format!(
                "degenerate blob (amplitude {:.3e}, widths {:.3}, {:.3}) in a {w}x{h} patch",
                p[0], p[3], p[4]
            ),
        });
    }
    Ok(PsfFit {
        params: GaussianPsfParams {
            amplitude: p[0],
            offset_x: p[1],
            offset_z: p[2],
            sigma_x: p[3],
            sigma_z: p[4],
        },
        rms,
        iterations,
    })
}

fn normal_equations(p: &[f64; 5], coords: &[(f64, f64)], r: &[f64]) -> ([[f64; 5]; 5], [f64; 5]) {
    let [a, ox, oz, sx, sz] = *p;
    let mut jtj = [[0.0; 5]; 5];
    let mut jtr = [0.0; 5];
    for (&(x, z), &ri) in coords.iter().zip(r) {
        let u = x - ox;
        let v = z - oz;
        let e = (-(u * u / (2.0 * sx * sx) + v * v / (2.0 * sz * sz))).exp();
        let g = [
            e,
            a * e * u / (sx * sx),
            a * e * v / (sz * sz),
            a * e * u * u / (sx * sx * sx),
            a * e * v * v / (sz * sz * sz),
        ];
        for i in 0..5 {
            jtr[i] += g[i] * ri;
            for j in 0..5 {
                jtj[i][j] += g[i] * g[j];
            }
        }
    }
    (jtj, jtr)
}

/// Gaussian elimination with partial pivoting on a 5x5 system.
fn solve5(mut a: [[f64; 5]; 5], mut b: [f64; 5]) -> Option<[f64; 5]> {
    for col in 0..5 {
        let piv = (col..5).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..5 {
            let f = a[row][col] / a[col][col];
            #[allow(clippy::needless_range_loop)]
            for k in col..5 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 5];
    for row in (0..5).rev() {
        let s: f64 = (row + 1..5).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}
