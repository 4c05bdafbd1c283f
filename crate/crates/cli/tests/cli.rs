use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mfdecon::psf::GaussianPsfParams;
use mfdecon::sim::{render_frames, GroundTruth, GtPoint};

const SMALL: &str = "seed = 4
sim.width = 32
sim.height = 32
sim.frames = 6
sim.bubbles_per_frame = 3
sim.snr_db = 15
solver.iterations = 25
loc.kappa = 0.1
eval.kappa_sweep = geom:0.01:1.5:10
";

fn mfdecon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfdecon"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = mfdecon(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn report_value(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in {text}"))
        .to_string()
}

#[test]
fn step_by_step_matches_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("run.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let sim = d.join("sim");
    ok(&["simulate", "-c", s(&cfg), "--out", s(&sim)]);
    for f in ["noisy.mfdt", "clean.mfdt", "truth.csv", "psf.mfdt"] {
        assert!(sim.join(f).exists(), "{f}");
    }
    let (noisy, truth, psf) = (sim.join("noisy.mfdt"), sim.join("truth.csv"), sim.join("psf.mfdt"));

    let x = d.join("x.mfdt");
    ok(&[
        "deconvolve",
        "-c",
        s(&cfg),
        "-i",
        s(&noisy),
        "--psf",
        s(&psf),
        "-o",
        s(&x),
        "--trace",
        s(&d.join("trace.csv")),
    ]);
    let trace = fs::read_to_string(d.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().next().unwrap(), "iteration,objective,primal_residual");
    assert_eq!(trace.lines().count(), 26);

    let locs = d.join("locs.csv");
    ok(&[
        "localize",
        "-c",
        s(&cfg),
        "--deconvolved",
        s(&x),
        "--raw",
        s(&noisy),
        "--psf",
        s(&psf),
        "-o",
        s(&locs),
    ]);

    let run = d.join("run");
    let stdout = ok(&[
        "pipeline",
        "-c",
        s(&cfg),
        "--set",
        &format!("input.tensor={}", s(&noisy)),
        "--set",
        &format!("input.truth={}", s(&truth)),
        "--set",
        &format!("input.psf={}", s(&psf)),
        "-o",
        s(&run),
    ]);
    assert!(stdout.contains("manifest="));
    assert_eq!(fs::read(&x).unwrap(), fs::read(run.join("deconvolved.mfdt")).unwrap());
    // The stepwise path reads the deconvolved stack back from f32.
    let read = |p: &Path| mfdecon::io::read_localizations(p, Some(6), 50.0, 50.0).unwrap();
    let (a, b) = (read(&locs), read(&run.join("localizations.csv")));
    assert!(!a.is_empty());
    assert_eq!(a.len(), b.len());
    for (u, v) in a.locs.iter().zip(&b.locs) {
        assert_eq!(u.frame, v.frame);
        assert!((u.x - v.x).abs() < 1e-5 && (u.z - v.z).abs() < 1e-5 && (u.intensity - v.intensity).abs() < 1e-5);
    }

    let report = d.join("report.txt");
    let curve = d.join("curve.csv");
    ok(&[
        "evaluate",
        "-c",
        s(&cfg),
        "--detections",
        s(&locs),
        "--truth",
        s(&truth),
        "--frames",
        "6",
        "--report",
        s(&report),
        "--pr-curve",
        s(&curve),
    ]);
    let mine = fs::read_to_string(&report).unwrap();
    let theirs = fs::read_to_string(run.join("report.txt")).unwrap();
    for key in ["tp", "fp", "fn", "precision", "recall", "f1"] {
        assert_eq!(report_value(&mine, key), report_value(&theirs, key), "{key}");
    }
    assert!(fs::read_to_string(&curve)
        .unwrap()
        .starts_with("threshold,precision,recall,f1,tp,fp,fn"));

    let pr = d.join("pr.csv");
    let out = ok(&[
        "pr-curve",
        "-c",
        s(&cfg),
        "--raw",
        s(&noisy),
        "--deconvolved",
        s(&x),
        "--psf",
        s(&psf),
        "--truth",
        s(&truth),
        "-o",
        s(&pr),
    ]);
    assert_eq!(fs::read(&pr).unwrap(), fs::read(run.join("pr_curve.csv")).unwrap());
    assert_eq!(report_value(&out, "best_f1"), report_value(&theirs, "best_f1"));

    let pgm = d.join("density.pgm");
    ok(&[
        "render",
        "-c",
        s(&cfg),
        "--detections",
        s(&run.join("localizations.csv")),
        "-o",
        s(&pgm),
    ]);
    assert_eq!(fs::read(&pgm).unwrap(), fs::read(run.join("density.pgm")).unwrap());
    assert!(fs::read(&pgm).unwrap().starts_with(b"P5\n128 128\n65535\n"));
}

#[test]
fn ncc_commands_match_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("run.cfg");
    fs::write(&cfg, format!("{SMALL}loc.detector = ncc\n")).unwrap();
    let sim = d.join("sim");
    ok(&["simulate", "-c", s(&cfg), "--out", s(&sim)]);
    let noisy = sim.join("noisy.mfdt");
    let locs = d.join("ncc.csv");
    ok(&["ncc-localize", "-c", s(&cfg), "-i", s(&noisy), "-o", s(&locs)]);
    let run = d.join("run");
    ok(&[
        "pipeline",
        "-c",
        s(&cfg),
        "--set",
        &format!("input.tensor={}", s(&noisy)),
        "-o",
        s(&run),
    ]);
    assert_eq!(
        fs::read(&locs).unwrap(),
        fs::read(run.join("localizations.csv")).unwrap()
    );

    let pr = d.join("pr.csv");
    ok(&[
        "pr-curve",
        "-c",
        s(&cfg),
        "--raw",
        s(&noisy),
        "--truth",
        s(&sim.join("truth.csv")),
        "--sweep",
        "0.3,0.6,0.9",
        "-o",
        s(&pr),
    ]);
    let rows: Vec<String> = fs::read_to_string(&pr)
        .unwrap()
        .lines()
        .skip(1)
        .map(String::from)
        .collect();
    assert!(!rows.is_empty() && rows.len() <= 3);
    assert!(rows[0].starts_with("0.3,"));
}

#[test]
fn psf_estimate_recovers_the_width() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let truth_psf = GaussianPsfParams::centered(1.6, 1.1, 1.0);
    let spots = [(10.0, 10.0), (30.0, 12.0), (20.0, 28.0), (40.0, 30.0)];
    let gt = GroundTruth {
        frames: (0..3)
            .map(|_| spots.iter().map(|&(x, z)| GtPoint { x, z, amplitude: 1.0 }).collect())
            .collect(),
    };
    let stack = render_frames::<f64>(&gt, &truth_psf, 50, 40).unwrap();
    let input = d.join("stack.mfdt");
    mfdecon::io::write_tensor(&input, &stack).unwrap();
    let mut patches = String::from("frame,x,z,half\n");
    for t in 0..3 {
        for (x, z) in spots {
            patches.push_str(&format!("{t},{x},{z},6\n"));
        }
    }
    fs::write(d.join("patches.csv"), patches).unwrap();
    let (params, kernel) = (d.join("psf.txt"), d.join("psf.mfdt"));
    ok(&[
        "psf-estimate",
        "-i",
        s(&input),
        "--patches",
        s(&d.join("patches.csv")),
        "--params-out",
        s(&params),
        "--kernel-out",
        s(&kernel),
    ]);
    let text = fs::read_to_string(&params).unwrap();
    let sx: f64 = report_value(&text, "sigma_x").parse().unwrap();
    let sz: f64 = report_value(&text, "sigma_z").parse().unwrap();
    assert!(
        (sx / 1.6 - 1.0).abs() < 0.01 && (sz / 1.1 - 1.0).abs() < 0.01,
        "{sx} {sz}"
    );
    let k = mfdecon::io::read_kernel::<f64>(&kernel).unwrap();
    assert_eq!(k.width() % 2, 1);
    assert_eq!(k.width().to_string(), report_value(&text, "kernel_width"));
}

#[test]
fn overrides_take_precedence_over_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("run.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let run = d.join("run");
    ok(&[
        "pipeline",
        "-c",
        s(&cfg),
        "--set",
        "solver.method=decon",
        "--set",
        "seed=9",
        "-o",
        s(&run),
    ]);
    let manifest = fs::read_to_string(run.join("manifest.txt")).unwrap();
    assert!(manifest.contains("config.solver.method=decon\n"));
    assert!(manifest.contains("config.seed=9\n"));
    assert!(manifest.contains("config.solver.iterations=25\n"));
}

#[test]
fn bad_input_fails_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("bad.cfg");
    fs::write(&cfg, "solver.lambda9 = 1\n").unwrap();
    let out = mfdecon(&["simulate", "-c", s(&cfg), "--out", s(&d.join("o"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("solver.lambda9"));

    let out = mfdecon(&["pipeline", "--set", "sim.snr_db", "-o", s(&d.join("p"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("KEY=VALUE"));

    let missing = d.join("missing.mfdt");
    let out = mfdecon(&["ncc-localize", "-i", s(&missing), "-o", s(&d.join("l.csv"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.mfdt"));

    let out = mfdecon(&[
        "pipeline",
        "--set",
        &format!("input.tensor={}", s(&missing)),
        "-o",
        s(&d.join("q")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("load stage failed"));
}
