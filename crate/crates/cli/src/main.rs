use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use mfdecon::eval::{intensity_pr_curve, match_detections, pr_sweep, EvalReport};
use mfdecon::io::{self, tables, RunConfig, Sweep};
use mfdecon::localize::{
    localize_with_noise, ncc_localize, ncc_localize_with_map, ncc_map, raw_noise_image, LocalizeParams,
};
use mfdecon::pipeline::{self, run_pipeline};
use mfdecon::psf::{extract_patch, fit_gaussian_psf, gaussian_kernel, GaussianPsfParams};
use mfdecon::render::{render_density_map, write_density_map};
use mfdecon::sim::simulate;
use mfdecon::solver::solve_stack;
use mfdecon::tensor::{Kernel2, Tensor3};

/// Multi-frame sparse deconvolution and microbubble localization.
#[derive(Parser)]
#[command(name = "mfdecon", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration shared by every subcommand: an optional key=value file
/// plus `--set` overrides, applied in that order.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// key=value configuration file
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set solver.lambda1=0.2` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut pairs = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                RunConfig::parse_pairs(&text).with_context(|| format!("in {}", p.display()))?
            }
            None => Vec::new(),
        };
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got '{s}'"))?;
            let k = k.trim();
            pairs.retain(|(key, _)| key != k);
            pairs.push((k.to_string(), v.trim().to_string()));
        }
        let mut cfg = RunConfig::default();
        cfg.apply(&pairs)?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a stack: writes noisy.mfdt, clean.mfdt, truth.csv and psf.mfdt
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Fit a Gaussian PSF to averaged bubble patches
    PsfEstimate {
        /// Stack to cut patches from
        #[arg(short, long)]
        input: PathBuf,
        /// CSV with header frame,x,z,half
        #[arg(long)]
        patches: PathBuf,
        /// Fitted parameters as key=value text
        #[arg(long)]
        params_out: PathBuf,
        /// Sampled, centred kernel
        #[arg(long)]
        kernel_out: PathBuf,
    },
    /// Deconvolve a stack with the configured method
    Deconvolve {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(short, long)]
        input: PathBuf,
        /// PSF kernel file; defaults to the Gaussian of the sim.psf_* keys
        #[arg(long)]
        psf: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
        /// Objective trace CSV
        #[arg(long)]
        trace: PathBuf,
    },
    /// Localize bubbles in a deconvolved stack
    Localize {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        deconvolved: PathBuf,
        /// Raw stack the noise image is computed from
        #[arg(long)]
        raw: PathBuf,
        /// PSF kernel file, for the border crop
        #[arg(long)]
        psf: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Localize bubbles by normalised cross-correlation with the PSF
    NccLocalize {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(short, long)]
        input: PathBuf,
        #[arg(long)]
        psf: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Score detections against ground truth
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Matching radius in um; defaults to eval.radius_um
        #[arg(long)]
        radius_um: Option<f64>,
        /// Number of frames; defaults to the last frame present in either file
        #[arg(long)]
        frames: Option<usize>,
        /// key=value report
        #[arg(long)]
        report: PathBuf,
        /// PR curve over detection-intensity thresholds
        #[arg(long)]
        pr_curve: Option<PathBuf>,
        /// Thresholds in the intensity PR curve
        #[arg(long, default_value_t = 50)]
        points: usize,
    },
    /// PR curve over localization thresholds
    PrCurve {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Raw stack
        #[arg(long)]
        raw: PathBuf,
        /// Deconvolved stack; without it the NCC detector is swept
        #[arg(long)]
        deconvolved: Option<PathBuf>,
        #[arg(long)]
        psf: Option<PathBuf>,
        #[arg(long)]
        truth: PathBuf,
        /// Thresholds; defaults to eval.kappa_sweep or eval.ncc_sweep
        #[arg(long)]
        sweep: Option<Sweep>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Run simulate/load, deconvolve, localize, evaluate and render
    Pipeline {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Render detections as a super-resolved 16-bit PGM density map
    Render {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        detections: PathBuf,
        /// Grid width in pixels; defaults to sim.width
        #[arg(long)]
        width: Option<usize>,
        /// Grid height in pixels; defaults to sim.height
        #[arg(long)]
        height: Option<usize>,
        #[arg(short, long)]
        out: PathBuf,
    },
}

fn load_psf(path: &Option<PathBuf>, cfg: &RunConfig) -> Result<Kernel2<f64>> {
    Ok(match path.as_ref().or(cfg.input.psf.as_ref()) {
        Some(p) => io::read_kernel(p).with_context(|| format!("reading PSF {}", p.display()))?,
        None => cfg.sim.psf_kernel()?,
    })
}

fn read_stack(p: &Path) -> Result<Tensor3<f64>> {
    io::read_tensor(p).with_context(|| format!("reading {}", p.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { cfg, out } => {
            let cfg = cfg.load()?;
            fs::create_dir_all(&out)?;
            let sim = simulate::<f64>(&cfg.sim)?;
            io::write_tensor(out.join(pipeline::NOISY), &sim.noisy)?;
            io::write_tensor(out.join(pipeline::CLEAN), &sim.clean)?;
            io::write_truth(out.join(pipeline::TRUTH), &sim.truth)?;
            io::write_kernel(out.join(pipeline::PSF), &cfg.sim.psf_kernel::<f64>()?)?;
            info!("simulated {} bubbles over {} frames", sim.truth.len(), cfg.sim.frames);
        }
        Command::PsfEstimate {
            input,
            patches,
            params_out,
            kernel_out,
        } => {
            let y = read_stack(&input)?;
            let specs = io::read_patches(&patches)?;
            let cut = specs
                .iter()
                .map(|p| extract_patch(&y, p.frame, p.x, p.z, p.half))
                .collect::<mfdecon::Result<Vec<_>>>()?;
            let fit = fit_gaussian_psf(&cut)?;
            let p = fit.params;
            let centred = GaussianPsfParams::centered(p.sigma_x, p.sigma_z, p.amplitude);
            let size = centred.default_size();
            fs::write(
                &params_out,
                format!(
                    "sigma_x={}\nsigma_z={}\namplitude={}\noffset_x={}\noffset_z={}\nrms={}\niterations={}\nkernel_width={}\nkernel_height={}\n",
                    p.sigma_x, p.sigma_z, p.amplitude, p.offset_x, p.offset_z, fit.rms, fit.iterations, size.0, size.1
                ),
            )?;
            io::write_kernel(&kernel_out, &gaussian_kernel::<f64>(&centred, size)?)?;
        }
        Command::Deconvolve {
            cfg,
            input,
            psf,
            out,
            trace,
        } => {
            let cfg = cfg.load()?;
            let y = read_stack(&input)?;
            let a = load_psf(&psf, &cfg)?;
            let res = solve_stack(&y, &a, &cfg.solver)?;
            io::write_tensor(&out, &res.x)?;
            io::write_trace(&trace, &res.objective, &res.primal_residual)?;
            info!(
                "{} iterations of {} in {:.1} s",
                res.iterations(),
                cfg.solver.method,
                res.wall_time.as_secs_f64()
            );
        }
        Command::Localize {
            cfg,
            deconvolved,
            raw,
            psf,
            out,
        } => {
            let cfg = cfg.load()?;
            let x = read_stack(&deconvolved)?;
            let y = read_stack(&raw)?;
            if x.dims() != y.dims() {
                bail!("deconvolved and raw stacks differ in size");
            }
            let a = load_psf(&psf, &cfg)?;
            let p = cfg.localize_params();
            let noise = raw_noise_image(&y, &p)?;
            let locs = localize_with_noise(&x, &noise, (a.width(), a.height()), &p)?;
            io::write_localizations(&out, &locs)?;
            info!("{} localizations", locs.len());
        }
        Command::NccLocalize { cfg, input, psf, out } => {
            let cfg = cfg.load()?;
            let y = read_stack(&input)?;
            let a = load_psf(&psf, &cfg)?;
            let locs = ncc_localize(&y, &a, cfg.loc.ncc_threshold, &cfg.localize_params())?;
            io::write_localizations(&out, &locs)?;
            info!("{} localizations", locs.len());
        }
        Command::Evaluate {
            cfg,
            detections,
            truth,
            radius_um,
            frames,
            report,
            pr_curve,
            points,
        } => {
            let cfg = cfg.load()?;
            let mut dets = io::read_localizations(&detections, frames, cfg.sim.pixel_size_um, cfg.sim.frame_rate_hz)?;
            let gt = io::read_truth(&truth, frames)?;
            let n = frames.unwrap_or(dets.frames.max(gt.frame_count()));
            dets.frames = n;
            let gt = mfdecon::sim::GroundTruth {
                frames: (0..n).map(|t| gt.frames.get(t).cloned().unwrap_or_default()).collect(),
            };
            let radius = radius_um.unwrap_or_else(|| cfg.radius_um());
            let mut rep = EvalReport::from_matching(&match_detections(&dets, &gt, radius)?);
            rep.curve = intensity_pr_curve(&dets, &gt, radius, points)?;
            fs::write(&report, rep.to_string())?;
            if let Some(p) = pr_curve {
                tables::write_pr_curve(p, &rep.curve)?;
            }
            println!("{rep}");
        }
        Command::PrCurve {
            cfg,
            raw,
            deconvolved,
            psf,
            truth,
            sweep,
            out,
        } => {
            let cfg = cfg.load()?;
            let y = read_stack(&raw)?;
            let a = load_psf(&psf, &cfg)?;
            let gt = io::read_truth(&truth, Some(y.frames()))?;
            let p = cfg.localize_params();
            let psf_dims = (a.width(), a.height());
            let radius = cfg.radius_um();
            let curve = match deconvolved {
                Some(d) => {
                    let x = read_stack(&d)?;
                    if x.dims() != y.dims() {
                        bail!("deconvolved and raw stacks differ in size");
                    }
                    let noise = raw_noise_image(&y, &p)?;
                    let sweep = sweep.unwrap_or_else(|| cfg.eval.kappa_sweep.clone()).values();
                    pr_sweep(&sweep, &gt, radius, |k| {
                        localize_with_noise(&x, &noise, psf_dims, &LocalizeParams { kappa: k, ..p })
                    })?
                }
                None => {
                    let map = ncc_map(&y, &a)?;
                    let sweep = sweep.unwrap_or_else(|| cfg.eval.ncc_sweep.clone()).values();
                    pr_sweep(&sweep, &gt, radius, |t| {
                        ncc_localize_with_map(&y, &map, psf_dims, t, &p)
                    })?
                }
            };
            tables::write_pr_curve(&out, &curve)?;
            if !curve.excluded.is_empty() {
                log::warn!(
                    "{} thresholds gave no detections and were left out",
                    curve.excluded.len()
                );
            }
            if let Some(b) = curve.best() {
                println!("best_threshold={}\nbest_f1={}", b.threshold, b.f1);
            }
        }
        Command::Pipeline { cfg, out } => {
            let cfg = cfg.load()?;
            let res = run_pipeline(&cfg, &out)?;
            for (stage, secs) in &res.timings {
                info!("{stage}: {secs:.2} s");
            }
            if let Some(r) = &res.report {
                println!("{r}");
            }
            println!("manifest={}", res.manifest_path().display());
        }
        Command::Render {
            cfg,
            detections,
            width,
            height,
            out,
        } => {
            let cfg = cfg.load()?;
            let locs = io::read_localizations(&detections, None, cfg.sim.pixel_size_um, cfg.sim.frame_rate_hz)?;
            let dims = (width.unwrap_or(cfg.sim.width), height.unwrap_or(cfg.sim.height));
            let map = render_density_map(&locs, cfg.render.upscale, dims, cfg.render.weight)?;
            write_density_map(&out, &map)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
