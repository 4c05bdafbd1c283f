//! Plain-text run configuration.
//!
//! One `key=value` per line, keys namespaced by stage (`sim.snr_db`,
//! `solver.lambda1`, `loc.kappa`, ...). `#` starts a comment. Unknown or
//! repeated keys are errors. Keys left out keep their defaults; the solver
//! weights default to the values of the selected `solver.method`, whatever
//! line that key sits on.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::localize::LocalizeParams;
use crate::render::DensityWeight;
use crate::sim::{default_paths, format_paths, parse_paths, SimConfig};
use crate::solver::{DenoiserSpec, Method, SolverConfig};

/// How detections are produced from a stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Detector {
    /// Deconvolve, then threshold against the raw noise image.
    Deconvolution,
    /// Threshold the normalised cross-correlation with the PSF.
    Ncc,
}

impl FromStr for Detector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deconvolution" => Ok(Detector::Deconvolution),
            "ncc" => Ok(Detector::Ncc),
            _ => Err(Error::config(format!(
                "unknown detector '{s}' (expected deconvolution or ncc)"
            ))),
        }
    }
}

impl fmt::Display for Detector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Detector::Deconvolution => "deconvolution",
            Detector::Ncc => "ncc",
        })
    }
}

/// A list of thresholds, written either explicitly (`0.1,0.2,0.4`) or as
/// `geom:start:ratio:count` / `lin:start:step:count`.
#[derive(Clone, Debug, PartialEq)]
pub enum Sweep {
    List(Vec<f64>),
    Geometric { start: f64, ratio: f64, count: usize },
    Linear { start: f64, step: f64, count: usize },
}

impl Sweep {
    pub fn values(&self) -> Vec<f64> {
        match *self {
            Sweep::List(ref v) => v.clone(),
            Sweep::Geometric { start, ratio, count } => (0..count).map(|i| start * ratio.powi(i as i32)).collect(),
            Sweep::Linear { start, step, count } => (0..count).map(|i| start + step * i as f64).collect(),
        }
    }
}

impl FromStr for Sweep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("bad sweep '{s}'"));
        let sweep = match s.split(':').collect::<Vec<_>>().as_slice() {
            [kind @ ("geom" | "lin"), a, b, n] => {
                let a: f64 = a.trim().parse().map_err(|_| bad())?;
                let b: f64 = b.trim().parse().map_err(|_| bad())?;
                let count: usize = n.trim().parse().map_err(|_| bad())?;
                if *kind == "geom" {
                    Sweep::Geometric {
                        start: a,
                        ratio: b,
                        count,
                    }
                } else {
                    Sweep::Linear {
                        start: a,
                        step: b,
                        count,
                    }
                }
            }
            [list] => Sweep::List(
                list.split(',')
                    .map(|v| v.trim().parse::<f64>().map_err(|_| bad()))
                    .collect::<Result<_>>()?,
            ),
            _ => return Err(bad()),
        };
        let values = sweep.values();
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::config(format!(
                "sweep '{s}' must give at least one finite threshold"
            )));
        }
        Ok(sweep)
    }
}

impl fmt::Display for Sweep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sweep::List(v) => {
                let parts: Vec<String> = v.iter().map(f64::to_string).collect();
                f.write_str(&parts.join(","))
            }
            Sweep::Geometric { start, ratio, count } => write!(f, "geom:{start}:{ratio}:{count}"),
            Sweep::Linear { start, step, count } => write!(f, "lin:{start}:{step}:{count}"),
        }
    }
}

/// External inputs. Without `tensor` the pipeline simulates its data.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct InputConfig {
    pub tensor: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    /// Sampled PSF kernel; defaults to the Gaussian of the `sim.psf_*` keys.
    pub psf: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocConfig {
    pub detector: Detector,
    pub window: Option<usize>,
    pub sensitivity: f64,
    pub kappa: f64,
    pub crop: Option<usize>,
    pub ncc_threshold: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// Matching radius; defaults to half the wavelength.
    pub radius_um: Option<f64>,
    pub kappa_sweep: Sweep,
    pub ncc_sweep: Sweep,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderConfig {
    pub upscale: usize,
    pub weight: DensityWeight,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Every random draw derives from this seed.
    pub seed: u64,
    pub input: InputConfig,
    /// Acquisition geometry and, without an input tensor, the simulation.
    pub sim: SimConfig,
    pub solver: SolverConfig,
    pub loc: LocConfig,
    pub eval: EvalConfig,
    pub render: RenderConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sim = SimConfig::default();
        RunConfig {
            seed: sim.seed,
            input: InputConfig::default(),
            sim,
            solver: SolverConfig::for_method(Method::Mf3dTv),
            loc: LocConfig {
                detector: Detector::Deconvolution,
                window: None,
                sensitivity: 0.5,
                kappa: 0.3,
                crop: None,
                ncc_threshold: 0.5,
            },
            eval: EvalConfig {
                radius_um: None,
                kappa_sweep: Sweep::Geometric {
                    start: 0.001,
                    ratio: 1.2,
                    count: 64,
                },
                ncc_sweep: Sweep::Linear {
                    start: 0.05,
                    step: 0.05,
                    count: 19,
                },
            },
            render: RenderConfig {
                upscale: 4,
                weight: DensityWeight::Count,
            },
        }
    }
}

fn opt_to_string<V: fmt::Display>(v: &Option<V>, none: &str) -> String {
    v.as_ref().map_or(none.to_string(), V::to_string)
}

fn path_to_string(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or(String::new(), |p| p.display().to_string())
}

fn value<V: FromStr>(key: &str, raw: &str) -> Result<V> {
    raw.parse()
        .map_err(|_| Error::parse(key, format!("cannot parse '{raw}'")))
}

fn auto<V: FromStr>(key: &str, raw: &str) -> Result<Option<V>> {
    if raw == "auto" {
        Ok(None)
    } else {
        value(key, raw).map(Some)
    }
}

fn path(raw: &str) -> Option<PathBuf> {
    (!raw.is_empty()).then(|| PathBuf::from(raw))
}

/// Re-tags configuration errors from `FromStr` impls with the key.
fn keyed<V>(key: &str, r: Result<V>) -> Result<V> {
    r.map_err(|e| match e {
        Error::Config(m) => Error::parse(key, m),
        other => other,
    })
}

impl RunConfig {
    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let s = &self.sim;
        let v = &self.solver;
        let l = &self.loc;
        vec![
            ("seed", self.seed.to_string()),
            ("input.tensor", path_to_string(&self.input.tensor)),
            ("input.truth", path_to_string(&self.input.truth)),
            ("input.psf", path_to_string(&self.input.psf)),
            ("sim.width", s.width.to_string()),
            ("sim.height", s.height.to_string()),
            ("sim.frames", s.frames.to_string()),
            ("sim.pixel_size_um", s.pixel_size_um.to_string()),
            ("sim.frame_rate_hz", s.frame_rate_hz.to_string()),
            ("sim.wavelength_um", s.wavelength_um.to_string()),
            ("sim.psf_sigma_x", s.psf.sigma_x.to_string()),
            ("sim.psf_sigma_z", s.psf.sigma_z.to_string()),
            ("sim.psf_amplitude", s.psf.amplitude.to_string()),
            ("sim.bubbles_per_frame", s.bubbles_per_frame.to_string()),
            ("sim.amplitude_min", s.amplitude_min.to_string()),
            ("sim.amplitude_max", s.amplitude_max.to_string()),
            ("sim.snr_db", s.snr_db.to_string()),
            ("sim.paths", format_paths(&s.paths)),
            ("solver.method", v.method.to_string()),
            ("solver.lambda1", v.lambda1.to_string()),
            ("solver.lambda2", v.lambda2.to_string()),
            ("solver.lambda3", v.lambda3.to_string()),
            ("solver.rho1", v.rho1.to_string()),
            ("solver.rho2", v.rho2.to_string()),
            ("solver.rho3", v.rho3.to_string()),
            ("solver.alpha", v.alpha.to_string()),
            ("solver.iterations", v.iterations.to_string()),
            ("solver.denoiser", opt_to_string(&v.denoiser, "none")),
            ("loc.detector", l.detector.to_string()),
            ("loc.window", opt_to_string(&l.window, "auto")),
            ("loc.sensitivity", l.sensitivity.to_string()),
            ("loc.kappa", l.kappa.to_string()),
            ("loc.crop", opt_to_string(&l.crop, "auto")),
            ("loc.ncc_threshold", l.ncc_threshold.to_string()),
            ("eval.radius_um", opt_to_string(&self.eval.radius_um, "auto")),
            ("eval.kappa_sweep", self.eval.kappa_sweep.to_string()),
            ("eval.ncc_sweep", self.eval.ncc_sweep.to_string()),
            ("render.upscale", self.render.upscale.to_string()),
            ("render.weight", self.render.weight.to_string()),
        ]
    }

    pub fn keys() -> Vec<&'static str> {
        RunConfig::default().entries().into_iter().map(|e| e.0).collect()
    }

    /// Sets one key. `solver.method` also resets the solver weights to
    /// that method's defaults.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let raw = raw.trim();
        let s = &mut self.sim;
        let v = &mut self.solver;
        let l = &mut self.loc;
        match key {
            "seed" => {
                self.seed = value(key, raw)?;
                s.seed = self.seed;
            }
            "input.tensor" => self.input.tensor = path(raw),
            "input.truth" => self.input.truth = path(raw),
            "input.psf" => self.input.psf = path(raw),
            "sim.width" => s.width = value(key, raw)?,
            "sim.height" => s.height = value(key, raw)?,
            "sim.frames" => s.frames = value(key, raw)?,
            "sim.pixel_size_um" => s.pixel_size_um = value(key, raw)?,
            "sim.frame_rate_hz" => s.frame_rate_hz = value(key, raw)?,
            "sim.wavelength_um" => s.wavelength_um = value(key, raw)?,
            "sim.psf_sigma_x" => s.psf.sigma_x = value(key, raw)?,
            "sim.psf_sigma_z" => s.psf.sigma_z = value(key, raw)?,
            "sim.psf_amplitude" => s.psf.amplitude = value(key, raw)?,
            "sim.bubbles_per_frame" => s.bubbles_per_frame = value(key, raw)?,
            "sim.amplitude_min" => s.amplitude_min = value(key, raw)?,
            "sim.amplitude_max" => s.amplitude_max = value(key, raw)?,
            "sim.snr_db" => s.snr_db = value(key, raw)?,
            "sim.paths" => s.paths = keyed(key, parse_paths(raw))?,
            "solver.method" => *v = SolverConfig::for_method(keyed(key, raw.parse())?),
            "solver.lambda1" => v.lambda1 = value(key, raw)?,
            "solver.lambda2" => v.lambda2 = value(key, raw)?,
            "solver.lambda3" => v.lambda3 = value(key, raw)?,
            "solver.rho1" => v.rho1 = value(key, raw)?,
            "solver.rho2" => v.rho2 = value(key, raw)?,
            "solver.rho3" => v.rho3 = value(key, raw)?,
            "solver.alpha" => v.alpha = value(key, raw)?,
            "solver.iterations" => v.iterations = value(key, raw)?,
            "solver.denoiser" => {
                v.denoiser = if raw == "none" {
                    None
                } else {
                    Some(keyed(key, raw.parse::<DenoiserSpec>())?)
                }
            }
            "loc.detector" => l.detector = keyed(key, raw.parse())?,
            "loc.window" => l.window = auto(key, raw)?,
            "loc.sensitivity" => l.sensitivity = value(key, raw)?,
            "loc.kappa" => l.kappa = value(key, raw)?,
            "loc.crop" => l.crop = auto(key, raw)?,
            "loc.ncc_threshold" => l.ncc_threshold = value(key, raw)?,
            "eval.radius_um" => self.eval.radius_um = auto(key, raw)?,
            "eval.kappa_sweep" => self.eval.kappa_sweep = keyed(key, raw.parse())?,
            "eval.ncc_sweep" => self.eval.ncc_sweep = keyed(key, raw.parse())?,
            "render.upscale" => self.render.upscale = value(key, raw)?,
            "render.weight" => self.render.weight = keyed(key, raw.parse())?,
            _ => return Err(Error::parse(key, "unknown configuration key")),
        }
        Ok(())
    }

    /// Splits configuration text into `(key, value)` pairs, dropping
    /// comments and blank lines. Keys are not checked here, but a key given
    /// twice is an error.
    pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, raw) = line.split_once('=').ok_or_else(|| {
                Error::parse(format!("line {}", i + 1), format!("expected key=value, found '{line}'"))
            })?;
            let key = key.trim();
            if pairs.iter().any(|(k, _)| k == key) {
                return Err(Error::parse(key, format!("set twice (again on line {})", i + 1)));
            }
            pairs.push((key.to_string(), raw.trim().to_string()));
        }
        Ok(pairs)
    }

    /// Parses a configuration file's text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply(&RunConfig::parse_pairs(text)?)?;
        Ok(cfg)
    }

    /// Applies overrides, `solver.method` first. Default vessel paths
    /// follow the grid size unless paths are given.
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        let (method, rest): (Vec<_>, Vec<_>) = pairs.iter().partition(|(k, _)| k == "solver.method");
        for (k, v) in method.into_iter().chain(rest) {
            self.set(k, v)?;
        }
        let resized = pairs.iter().any(|(k, _)| k == "sim.width" || k == "sim.height");
        if resized && !pairs.iter().any(|(k, _)| k == "sim.paths") {
            self.sim.paths = default_paths(self.sim.width, self.sim.height);
        }
        self.validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        RunConfig::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.solver.validate()?;
        if self.solver.method == Method::MfRedTv && self.solver.denoiser.is_none() {
            return Err(Error::config("mf-red-tv needs solver.denoiser"));
        }
        let l = &self.loc;
        if let Some(w) = l.window {
            if w < 3 || w % 2 == 0 {
                return Err(Error::config(format!("loc.window must be odd and >= 3, got {w}")));
            }
        }
        if !(0.0..=1.0).contains(&l.sensitivity) {
            return Err(Error::config(format!(
                "loc.sensitivity must lie in [0, 1], got {}",
                l.sensitivity
            )));
        }
        if !(l.kappa >= 0.0 && l.kappa.is_finite()) {
            return Err(Error::config(format!(
                "loc.kappa must be finite and >= 0, got {}",
                l.kappa
            )));
        }
        if !(l.ncc_threshold > 0.0 && l.ncc_threshold < 1.0) {
            return Err(Error::config(format!(
                "loc.ncc_threshold must lie in (0, 1), got {}",
                l.ncc_threshold
            )));
        }
        if let Some(r) = self.eval.radius_um {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::config(format!("eval.radius_um must be positive, got {r}")));
            }
        }
        if self.eval.ncc_sweep.values().iter().any(|&t| !(t > 0.0 && t < 1.0)) {
            return Err(Error::config("eval.ncc_sweep thresholds must lie in (0, 1)"));
        }
        if self.render.upscale == 0 {
            return Err(Error::config("render.upscale must be >= 1"));
        }
        if self.input.truth.is_some() && self.input.tensor.is_none() {
            return Err(Error::config("input.truth needs input.tensor"));
        }
        Ok(())
    }

    /// Localization parameters with the acquisition geometry filled in.
    pub fn localize_params(&self) -> LocalizeParams {
        LocalizeParams {
            window: self.loc.window,
            sensitivity: self.loc.sensitivity,
            kappa: self.loc.kappa,
            crop: self.loc.crop,
            pixel_size_um: self.sim.pixel_size_um,
            frame_rate_hz: self.sim.frame_rate_hz,
        }
    }

    pub fn radius_um(&self) -> f64 {
        self.eval.radius_um.unwrap_or(self.sim.wavelength_um / 2.0)
    }

    /// The configuration as parseable text, one `key=value` per line.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}
