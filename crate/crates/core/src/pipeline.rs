//! End-to-end runs: simulate or load a stack, deconvolve, localize, score
//! and render, writing every intermediate plus a manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::eval::{match_detections, pr_sweep, EvalReport};
use crate::io::config::{Detector, RunConfig};
use crate::io::{tables, tensor_file};
use crate::localize::{localize_with_noise, ncc_localize_with_map, ncc_map, raw_noise_image, LocalizationSet};
use crate::render::{render_density_map, write_density_map};
use crate::sim::{simulate, GroundTruth};
use crate::solver::solve_stack;
use crate::tensor::{Kernel2, Tensor3};

pub const NOISY: &str = "noisy.mfdt";
pub const CLEAN: &str = "clean.mfdt";
pub const TRUTH: &str = "truth.csv";
pub const PSF: &str = "psf.mfdt";
pub const DECONVOLVED: &str = "deconvolved.mfdt";
pub const TRACE: &str = "objective.csv";
pub const LOCALIZATIONS: &str = "localizations.csv";
pub const REPORT: &str = "report.txt";
pub const PR_CURVE: &str = "pr_curve.csv";
pub const DENSITY: &str = "density.pgm";
pub const MANIFEST: &str = "manifest.txt";

/// What a run produced.
#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub localizations: LocalizationSet,
    /// Present when ground truth was available.
    pub report: Option<EvalReport>,
    /// Written files in creation order, manifest last.
    pub artifacts: Vec<PathBuf>,
    /// Wall time of each stage in seconds.
    pub timings: Vec<(&'static str, f64)>,
}

impl PipelineOutput {
    pub fn manifest_path(&self) -> &Path {
        self.artifacts.last().expect("the manifest is always written")
    }
}

/// SHA-256 of a file, hex encoded.
pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

struct Run<'a> {
    dir: &'a Path,
    artifacts: Vec<PathBuf>,
    timings: Vec<(&'static str, f64)>,
}

impl Run<'_> {
    /// Runs one stage, timing it and tagging its errors with the name.
    fn stage<V>(&mut self, name: &'static str, f: impl FnOnce(&mut Self) -> Result<V>) -> Result<V> {
        let start = Instant::now();
        let out = f(self).map_err(|e| e.in_stage(name))?;
        self.timings.push((name, start.elapsed().as_secs_f64()));
        Ok(out)
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.artifacts.push(p.clone());
        p
    }
}

struct Inputs {
    noisy: Tensor3<f64>,
    psf: Kernel2<f64>,
    truth: Option<GroundTruth>,
}

fn load_inputs(cfg: &RunConfig, run: &mut Run) -> Result<Inputs> {
    let Some(tensor) = &cfg.input.tensor else {
        let sim = simulate::<f64>(&cfg.sim)?;
        tensor_file::write_tensor(run.path(NOISY), &sim.noisy)?;
        tensor_file::write_tensor(run.path(CLEAN), &sim.clean)?;
        tables::write_truth(run.path(TRUTH), &sim.truth)?;
        let psf = cfg.sim.psf_kernel()?;
        tensor_file::write_kernel(run.path(PSF), &psf)?;
        return Ok(Inputs {
            noisy: sim.noisy,
            psf,
            truth: Some(sim.truth),
        });
    };
    let noisy: Tensor3<f64> = tensor_file::read_tensor(tensor)?;
    let psf = match &cfg.input.psf {
        Some(p) => tensor_file::read_kernel(p)?,
        None => cfg.sim.psf_kernel()?,
    };
    tensor_file::write_kernel(run.path(PSF), &psf)?;
    let truth = match &cfg.input.truth {
        Some(p) => Some(tables::read_truth(p, Some(noisy.frames()))?),
        None => None,
    };
    Ok(Inputs { noisy, psf, truth })
}

/// Runs the configured pipeline, writing artifacts into `out_dir` (created
/// if missing). A failing stage aborts the run with the stage named;
/// artifacts written before it are kept.
pub fn run_pipeline(cfg: &RunConfig, out_dir: impl AsRef<Path>) -> Result<PipelineOutput> {
    cfg.validate()?;
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut run = Run {
        dir,
        artifacts: Vec::new(),
        timings: Vec::new(),
    };
    let stage_in = if cfg.input.tensor.is_some() { "load" } else { "simulate" };
    let inputs = run.stage(stage_in, |run| load_inputs(cfg, run))?;
    let y = &inputs.noisy;
    let psf_dims = (inputs.psf.width(), inputs.psf.height());
    let params = cfg.localize_params();

    // Either the deconvolved stack with its noise image, or the NCC map.
    enum Detection {
        Decon(Tensor3<f64>, crate::localize::NoiseImage),
        Ncc(Tensor3<f64>),
    }
    let detection = match cfg.loc.detector {
        Detector::Deconvolution => run.stage("deconvolve", |run| {
            let res = solve_stack(y, &inputs.psf, &cfg.solver)?;
            tensor_file::write_tensor(run.path(DECONVOLVED), &res.x)?;
            tables::write_trace(run.path(TRACE), &res.objective, &res.primal_residual)?;
            let noise = raw_noise_image(y, &params)?;
            Ok(Detection::Decon(res.x, noise))
        })?,
        Detector::Ncc => run.stage("correlate", |_| Ok(Detection::Ncc(ncc_map(y, &inputs.psf)?)))?,
    };
    let detect = |threshold: f64| -> Result<LocalizationSet> {
        match &detection {
            Detection::Decon(x, noise) => {
                let p = crate::localize::LocalizeParams {
                    kappa: threshold,
                    ..params
                };
                localize_with_noise(x, noise, psf_dims, &p)
            }
            Detection::Ncc(map) => ncc_localize_with_map(y, map, psf_dims, threshold, &params),
        }
    };
    let threshold = match cfg.loc.detector {
        Detector::Deconvolution => cfg.loc.kappa,
        Detector::Ncc => cfg.loc.ncc_threshold,
    };
    let locs = run.stage("localize", |run| {
        let locs = detect(threshold)?;
        tables::write_localizations(run.path(LOCALIZATIONS), &locs)?;
        Ok(locs)
    })?;

    let report = match &inputs.truth {
        Some(truth) => Some(run.stage("evaluate", |run| {
            let radius = cfg.radius_um();
            let mut report = EvalReport::from_matching(&match_detections(&locs, truth, radius)?);
            let sweep = match cfg.loc.detector {
                Detector::Deconvolution => cfg.eval.kappa_sweep.values(),
                Detector::Ncc => cfg.eval.ncc_sweep.values(),
            };
            report.curve = pr_sweep(&sweep, truth, radius, &detect)?;
            fs::write(run.path(REPORT), report.to_string())?;
            tables::write_pr_curve(run.path(PR_CURVE), &report.curve)?;
            Ok(report)
        })?),
        None => None,
    };

    run.stage("render", |run| {
        let map = render_density_map(&locs, cfg.render.upscale, (y.width(), y.height()), cfg.render.weight)?;
        write_density_map(run.path(DENSITY), &map)
    })?;

    let manifest = write_manifest(cfg, &mut run).map_err(|e| e.in_stage("manifest"))?;
    run.artifacts.push(manifest);
    Ok(PipelineOutput {
        localizations: locs,
        report,
        artifacts: run.artifacts,
        timings: run.timings,
    })
}

/// Manifest lines: versions, seeds, the full configuration, stage timings
/// and the SHA-256 of every input and artifact.
fn write_manifest(cfg: &RunConfig, run: &mut Run) -> Result<PathBuf> {
    let mut text = String::new();
    let mut line = |k: &str, v: &dyn std::fmt::Display| text.push_str(&format!("{k}={v}\n"));
    line("version.mfdecon", &env!("CARGO_PKG_VERSION"));
    line("version.tensor_format", &tensor_file::FORMAT_VERSION);
    line("seed", &cfg.seed);
    if cfg.input.tensor.is_none() {
        line("seed.streams", &format!("tracks=0,noise=1..{}", cfg.sim.frames));
    }
    for (k, v) in cfg.entries() {
        line(&format!("config.{k}"), &v);
    }
    for (name, secs) in &run.timings {
        line(&format!("timing.{name}_s"), &format!("{secs:.3}"));
    }
    for (key, p) in [
        ("input.tensor", &cfg.input.tensor),
        ("input.truth", &cfg.input.truth),
        ("input.psf", &cfg.input.psf),
    ] {
        if let Some(p) = p {
            line(&format!("input_sha256.{key}"), &sha256_file(p)?);
        }
    }
    for p in &run.artifacts {
        let name = p
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        line(&format!("sha256.{name}"), &sha256_file(p)?);
    }
    let path = run.dir.join(MANIFEST);
    let mut f = fs::File::create(&path)?;
    f.write_all(text.as_bytes())?;
    Ok(path)
}

/// The `sha256.*` entries of a manifest, in file order.
pub fn manifest_hashes(manifest: &str) -> Vec<(String, String)> {
    manifest
        .lines()
        .filter_map(|l| l.strip_prefix("sha256."))
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}
