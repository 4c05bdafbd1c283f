//! Synthetic contrast-enhanced ultrasound stacks with exact ground truth.
//!
//! Bubbles travel along straight or circular vessel paths, are rendered
//! through an analytically evaluated Gaussian PSF and corrupted with white
//! Gaussian noise at a requested peak SNR.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::error::{Error, Result};
use crate::psf::{gaussian_kernel, GaussianPsfParams};
use crate::scalar::Real;
use crate::tensor::{Dims3, Kernel2, Tensor3};

/// Speed of sound in soft tissue, m/s.
pub const SOUND_SPEED: f64 = 1540.0;
/// Transmit centre frequency, Hz.
pub const CENTRE_FREQUENCY: f64 = 7.24e6;

/// `c / f` in micrometres.
pub fn default_wavelength_um() -> f64 {
    SOUND_SPEED / CENTRE_FREQUENCY * 1e6
}

/// A vessel centreline in pixel coordinates with a flow speed in um/s.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum VesselPath {
    Line {
        start: (f64, f64),
        end: (f64, f64),
        speed_um_s: f64,
    },
    /// Angles in degrees, measured from +x towards +z.
    Arc {
        centre: (f64, f64),
        radius: f64,
        start_deg: f64,
        end_deg: f64,
        speed_um_s: f64,
    },
}

impl VesselPath {
    pub fn length(&self) -> f64 {
        match *self {
            VesselPath::Line { start, end, .. } => (end.0 - start.0).hypot(end.1 - start.1),
            VesselPath::Arc {
                radius,
                start_deg,
                end_deg,
                ..
            } => radius * (end_deg - start_deg).abs() * PI / 180.0,
        }
    }

    pub fn speed_um_s(&self) -> f64 {
        match *self {
            VesselPath::Line { speed_um_s, .. } | VesselPath::Arc { speed_um_s, .. } => speed_um_s,
        }
    }

    /// Position at arc length `s` (pixels) from the start.
    pub fn point(&self, s: f64) -> (f64, f64) {
        match *self {
            VesselPath::Line { start, end, .. } => {
                let len = self.length();
                if len == 0.0 {
                    return start;
                }
                let f = s / len;
                (start.0 + f * (end.0 - start.0), start.1 + f * (end.1 - start.1))
            }
            VesselPath::Arc {
                centre,
                radius,
                start_deg,
                end_deg,
                ..
            } => {
                let dir = if end_deg >= start_deg { 1.0 } else { -1.0 };
                let theta = start_deg.to_radians() + dir * s / radius;
                (centre.0 + radius * theta.cos(), centre.1 + radius * theta.sin())
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            VesselPath::Line { start, end, speed_um_s } => {
                [start.0, start.1, end.0, end.1].iter().all(|v| v.is_finite()) && speed_um_s >= 0.0
            }
            VesselPath::Arc {
                centre,
                radius,
                start_deg,
                end_deg,
                speed_um_s,
            } => {
                [centre.0, centre.1, start_deg, end_deg].iter().all(|v| v.is_finite())
                    && radius > 0.0
                    && speed_um_s >= 0.0
            }
        };
        if ok && self.speed_um_s().is_finite() {
            Ok(())
        } else {
            Err(Error::config(format!("invalid vessel path {self}")))
        }
    }
}

impl fmt::Display for VesselPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            VesselPath::Line { start, end, speed_um_s } => {
                write!(f, "line {} {} {} {} {}", start.0, start.1, end.0, end.1, speed_um_s)
            }
            VesselPath::Arc {
                centre,
                radius,
                start_deg,
                end_deg,
                speed_um_s,
            } => write!(
                f,
                "arc {} {} {} {} {} {}",
                centre.0, centre.1, radius, start_deg, end_deg, speed_um_s
            ),
        }
    }
}

impl FromStr for VesselPath {
    type Err = Error;

    /// `line x0 z0 x1 z1 speed` or `arc cx cz radius start_deg end_deg speed`.
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split_whitespace();
        let kind = parts.next().unwrap_or("");
        let nums = parts
            .map(|p| {
                p.parse::<f64>()
                    .map_err(|_| Error::config(format!("bad number {p:?} in path {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let path = match (kind, nums.as_slice()) {
            ("line", &[x0, z0, x1, z1, v]) => VesselPath::Line {
                start: (x0, z0),
                end: (x1, z1),
                speed_um_s: v,
            },
            ("arc", &[cx, cz, r, a0, a1, v]) => VesselPath::Arc {
                centre: (cx, cz),
                radius: r,
                start_deg: a0,
                end_deg: a1,
                speed_um_s: v,
            },
            _ => {
                return Err(Error::config(format!(
                    "path {s:?} is neither `line x0 z0 x1 z1 speed` nor `arc cx cz r a0 a1 speed`"
                )))
            }
        };
        path.validate()?;
        Ok(path)
    }
}

/// Parses a `|`-separated path list.
pub fn parse_paths(s: &str) -> Result<Vec<VesselPath>> {
    s.split('|').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
}

pub fn format_paths(paths: &[VesselPath]) -> String {
    paths.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(" | ")
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub pixel_size_um: f64,
    pub frame_rate_hz: f64,
    pub wavelength_um: f64,
    pub psf: GaussianPsfParams,
    /// Mean number of bubbles present per frame.
    pub bubbles_per_frame: f64,
    pub paths: Vec<VesselPath>,
    /// Bubble amplitudes are uniform in `[amplitude_min, amplitude_max]`,
    /// relative to the PSF amplitude.
    pub amplitude_min: f64,
    pub amplitude_max: f64,
    pub snr_db: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            width: 128,
            height: 128,
            frames: 100,
            pixel_size_um: 50.0,
            frame_rate_hz: 50.0,
            wavelength_um: default_wavelength_um(),
            psf: GaussianPsfParams::centered(1.0, 0.8, 1.0),
            bubbles_per_frame: 5.0,
            paths: default_paths(128, 128),
            amplitude_min: 0.5,
            amplitude_max: 1.0,
            snr_db: 10.0,
            seed: 1,
        }
    }
}

/// A vessel tree spanning a `width x height` field: a few straight vessels
/// and two bends, speeds between 0.5 and 2 mm/s.
pub fn default_paths(width: usize, height: usize) -> Vec<VesselPath> {
    let (w, h) = (width as f64, height as f64);
    let line = |x0: f64, z0: f64, x1: f64, z1: f64, v: f64| VesselPath::Line {
        start: (x0 * w, z0 * h),
        end: (x1 * w, z1 * h),
        speed_um_s: v,
    };
    vec![
        line(0.05, 0.20, 0.95, 0.35, 1500.0),
        line(0.10, 0.90, 0.90, 0.60, 1000.0),
        line(0.30, 0.05, 0.40, 0.95, 750.0),
        line(0.75, 0.95, 0.65, 0.05, 2000.0),
        VesselPath::Arc {
            centre: (0.5 * w, 0.5 * h),
            radius: 0.3 * w.min(h),
            start_deg: 200.0,
            end_deg: 340.0,
            speed_um_s: 1250.0,
        },
        VesselPath::Arc {
            centre: (0.55 * w, 0.6 * h),
            radius: 0.2 * w.min(h),
            start_deg: 10.0,
            end_deg: 160.0,
            speed_um_s: 500.0,
        },
    ]
}

impl SimConfig {
    pub fn dims(&self) -> Dims3 {
        Dims3::new(self.width, self.height, self.frames)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.frames == 0 {
            return Err(Error::config(format!(
                "grid must be non-empty, got {}x{}x{}",
                self.width, self.height, self.frames
            )));
        }
        for (name, v) in [
            ("pixel size", self.pixel_size_um),
            ("frame rate", self.frame_rate_hz),
            ("wavelength", self.wavelength_um),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.bubbles_per_frame >= 0.0 && self.bubbles_per_frame.is_finite()) {
            return Err(Error::config("bubbles per frame must be a finite non-negative number"));
        }
        if !(self.amplitude_min > 0.0 && self.amplitude_min <= self.amplitude_max && self.amplitude_max.is_finite()) {
            return Err(Error::config(format!(
                "amplitude range [{}, {}] is invalid",
                self.amplitude_min, self.amplitude_max
            )));
        }
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return Err(Error::config("snr_db must be a number (+inf disables noise)"));
        }
        if self.paths.is_empty() {
            return Err(Error::config("at least one vessel path is required"));
        }
        self.paths.iter().try_for_each(VesselPath::validate)?;
        self.psf.validate().map_err(|e| Error::config(e.to_string()))
    }

    /// The sampled PSF the data were rendered with.
    pub fn psf_kernel<T: Real>(&self) -> Result<Kernel2<T>> {
        gaussian_kernel(&self.psf, self.psf.default_size())
    }

    /// Brightest possible single-bubble sample, the reference for SNR.
    pub fn nominal_peak(&self) -> f64 {
        self.psf.amplitude * self.amplitude_max
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtPoint {
    pub x: f64,
    pub z: f64,
    pub amplitude: f64,
}

/// Bubble positions per frame, in pixels.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct GroundTruth {
    pub frames: Vec<Vec<GtPoint>>,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.frames.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }
}

/// Per-frame noise streams start after the track stream.
fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

struct Bubble {
    path: usize,
    s: f64,
    amplitude: f64,
}

/// Moves bubbles along the configured paths.
///
/// The initial population is `round(bubbles_per_frame)` bubbles at uniform
/// positions along the paths (weighted by path length). New bubbles enter
/// at path starts as a Poisson process whose rate keeps the expected
/// population at `bubbles_per_frame`. A bubble leaves when it runs off the
/// end of its path or the grid.
pub fn simulate_tracks(cfg: &SimConfig) -> Result<GroundTruth> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, 0);
    let step: Vec<f64> = cfg
        .paths
        .iter()
        .map(|p| p.speed_um_s() / cfg.frame_rate_hz / cfg.pixel_size_um)
        .collect();
    let weight: Vec<f64> = cfg.paths.iter().map(|p| p.length().max(1.0)).collect();
    let total: f64 = weight.iter().sum();
    let pick = |rng: &mut ChaCha8Rng| {
        let mut u = rng.gen::<f64>() * total;
        for (i, w) in weight.iter().enumerate() {
            if u < *w {
                return i;
            }
            u -= w;
        }
        weight.len() - 1
    };
    let amplitude = |rng: &mut ChaCha8Rng| {
        if cfg.amplitude_max > cfg.amplitude_min {
            rng.gen_range(cfg.amplitude_min..=cfg.amplitude_max)
        } else {
            cfg.amplitude_min
        }
    };
    let inside =
        |(x, z): (f64, f64)| x >= 0.0 && z >= 0.0 && x <= (cfg.width - 1) as f64 && z <= (cfg.height - 1) as f64;

    let mut live = Vec::new();
    for _ in 0..cfg.bubbles_per_frame.round() as usize {
        let path = pick(&mut rng);
        let s = rng.gen::<f64>() * cfg.paths[path].length();
        let a = amplitude(&mut rng);
        live.push(Bubble { path, s, amplitude: a });
    }
    let arrivals: Vec<Option<Poisson<f64>>> = step
        .iter()
        .map(|&st| {
            let rate = cfg.bubbles_per_frame * st / total;
            (rate > 0.0).then(|| Poisson::new(rate).expect("positive finite rate"))
        })
        .collect();

    let mut gt = GroundTruth::default();
    for k in 0..cfg.frames {
        if k > 0 {
            for b in live.iter_mut() {
                b.s += step[b.path];
            }
            for (path, dist) in arrivals.iter().enumerate() {
                if let Some(dist) = dist {
                    let n = dist.sample(&mut rng) as usize;
                    for _ in 0..n {
                        let s = rng.gen::<f64>() * step[path];
                        let a = amplitude(&mut rng);
                        live.push(Bubble { path, s, amplitude: a });
                    }
                }
            }
        }
        live.retain(|b| b.s <= cfg.paths[b.path].length() && inside(cfg.paths[b.path].point(b.s)));
        gt.frames.push(
            live.iter()
                .map(|b| {
                    let (x, z) = cfg.paths[b.path].point(b.s);
                    GtPoint {
                        x,
                        z,
                        amplitude: b.amplitude,
                    }
                })
                .collect(),
        );
    }
    Ok(gt)
}

/// Renders every bubble as `amplitude * psf(pixel - position)`, evaluated
/// analytically and summed. The PSF is cut off beyond 6 sigma.
pub fn render_frames<T: Real>(
    gt: &GroundTruth,
    psf: &GaussianPsfParams,
    width: usize,
    height: usize,
) -> Result<Tensor3<T>> {
    psf.validate()?;
    let d = Dims3::new(width, height, gt.frame_count());
    let mut out = vec![0.0f64; d.len()];
    let rx = (6.0 * psf.sigma_x + psf.offset_x.abs()).ceil() as isize;
    let rz = (6.0 * psf.sigma_z + psf.offset_z.abs()).ceil() as isize;
    for (t, points) in gt.frames.iter().enumerate() {
        let frame = &mut out[t * d.frame_len()..(t + 1) * d.frame_len()];
        for p in points {
            let (cx, cz) = (p.x.round() as isize, p.z.round() as isize);
            for z in (cz - rz).max(0)..=(cz + rz).min(height as isize - 1) {
                for x in (cx - rx).max(0)..=(cx + rx).min(width as isize - 1) {
                    frame[x as usize + width * z as usize] += p.amplitude * psf.eval(x as f64 - p.x, z as f64 - p.z);
                }
            }
        }
    }
    Tensor3::new(width, height, d.frames, out.into_iter().map(T::lit).collect())
}

/// Adds white Gaussian noise with `sigma = peak(clean) / 10^(snr_db / 20)`.
pub fn add_noise<T: Real>(clean: &Tensor3<T>, snr_db: f64, seed: u64) -> Result<Tensor3<T>> {
    let peak = clean.max_value().as_f64();
    if !(peak > 0.0) {
        return Err(Error::arg(format!("noise needs a positive clean peak, got {peak}")));
    }
    add_noise_sigma(clean, noise_sigma(peak, snr_db)?, seed)
}

pub fn noise_sigma(peak: f64, snr_db: f64) -> Result<f64> {
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(Error::arg(format!("snr_db must be a number or +inf, got {snr_db}")));
    }
    Ok(peak / 10f64.powf(snr_db / 20.0))
}

/// Adds white Gaussian noise of standard deviation `sigma`. Frame `t` draws
/// from its own stream of `seed`, so frames are independent of each other
/// and of the track generator.
pub fn add_noise_sigma<T: Real>(clean: &Tensor3<T>, sigma: f64, seed: u64) -> Result<Tensor3<T>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::arg(format!("noise sigma must be finite and >= 0, got {sigma}")));
    }
    let mut out = clean.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    for t in 0..clean.frames() {
        let mut rng = stream_rng(seed, t as u64 + 1);
        for v in out.frame_mut(t) {
            *v = *v + T::lit(normal.sample(&mut rng));
        }
    }
    Ok(out)
}

/// A simulated acquisition.
#[derive(Clone, Debug)]
pub struct Simulation<T> {
    pub noisy: Tensor3<T>,
    pub clean: Tensor3<T>,
    pub truth: GroundTruth,
}

/// Tracks, renders and adds noise. The noise level is set against the
/// nominal single-bubble peak, so an empty field still gets the
/// configured noise.
pub fn simulate<T: Real>(cfg: &SimConfig) -> Result<Simulation<T>> {
    let truth = simulate_tracks(cfg)?;
    let clean = render_frames(&truth, &cfg.psf, cfg.width, cfg.height)?;
    let noisy = add_noise_sigma(&clean, noise_sigma(cfg.nominal_peak(), cfg.snr_db)?, cfg.seed)?;
    Ok(Simulation { noisy, clean, truth })
}
