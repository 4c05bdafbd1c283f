use mfdecon::psf::GaussianPsfParams;
use mfdecon::sim::*;
use mfdecon::tensor::{Dims3, Tensor3};

fn one_path(path: VesselPath, bubbles: f64) -> SimConfig {
    SimConfig {
        width: 64,
        height: 48,
        frames: 20,
        paths: vec![path],
        bubbles_per_frame: bubbles,
        ..SimConfig::default()
    }
}

#[test]
fn stationary_bubble_never_moves() {
    let cfg = one_path(
        VesselPath::Line {
            start: (10.0, 12.0),
            end: (50.0, 30.0),
            speed_um_s: 0.0,
        },
        1.0,
    );
    let gt = simulate_tracks(&cfg).unwrap();
    assert_eq!(gt.frame_count(), 20);
    let first = gt.frames[0].clone();
    assert_eq!(first.len(), 1);
    assert!(gt.frames.iter().all(|f| *f == first));
}

#[test]
fn straight_path_moves_at_constant_speed() {
    // 2500 um/s at 50 um pixels and 50 Hz is exactly one pixel per frame.
    let cfg = one_path(
        VesselPath::Line {
            start: (0.0, 20.0),
            end: (63.0, 20.0),
            speed_um_s: 2500.0,
        },
        1.0,
    );
    let gt = simulate_tracks(&cfg).unwrap();
    let p0 = gt.frames[0][0];
    for (k, f) in gt.frames.iter().enumerate() {
        let want = p0.x + k as f64;
        let found = f
            .iter()
            .any(|p| (p.x - want).abs() < 1e-9 && p.z == 20.0 && p.amplitude == p0.amplitude);
        assert_eq!(found, want <= 63.0, "frame {k}");
    }
}

#[test]
fn tracks_and_noise_are_deterministic() {
    let cfg = SimConfig {
        frames: 10,
        ..SimConfig::default()
    };
    let a = simulate::<f64>(&cfg).unwrap();
    let b = simulate::<f64>(&cfg).unwrap();
    assert_eq!(a.truth, b.truth);
    assert_eq!(a.noisy, b.noisy);
    let c = simulate::<f64>(&SimConfig { seed: 2, ..cfg.clone() }).unwrap();
    assert_ne!(a.noisy, c.noisy);
    for f in &a.truth.frames {
        for p in f {
            assert!(p.x >= 0.0 && p.z >= 0.0 && p.x <= 127.0 && p.z <= 127.0);
        }
    }
}

#[test]
fn empty_path_set_is_a_config_error() {
    let cfg = SimConfig {
        paths: vec![],
        ..SimConfig::default()
    };
    assert!(matches!(simulate_tracks(&cfg), Err(mfdecon::Error::Config(_))));
}

#[test]
fn zero_bubbles_give_pure_noise() {
    let cfg = SimConfig {
        width: 32,
        height: 32,
        frames: 4,
        bubbles_per_frame: 0.0,
        ..SimConfig::default()
    };
    let sim = simulate::<f64>(&cfg).unwrap();
    assert!(sim.truth.is_empty());
    assert_eq!(sim.truth.frame_count(), 4);
    assert!(sim.clean.as_slice().iter().all(|v| *v == 0.0));
    assert!(sim.noisy.norm() > 0.0);
}

fn psf() -> GaussianPsfParams {
    GaussianPsfParams::centered(1.3, 0.9, 1.0)
}

fn truth(frames: Vec<Vec<(f64, f64, f64)>>) -> GroundTruth {
    GroundTruth {
        frames: frames
            .into_iter()
            .map(|f| {
                f.into_iter()
                    .map(|(x, z, amplitude)| GtPoint { x, z, amplitude })
                    .collect()
            })
            .collect(),
    }
}

#[test]
fn integer_position_renders_the_psf() {
    let p = psf();
    let r: Tensor3<f64> = render_frames(&truth(vec![vec![(15.0, 12.0, 0.7)]]), &p, 32, 24).unwrap();
    for z in 0..24 {
        for x in 0..32 {
            let want = 0.7 * p.eval(x as f64 - 15.0, z as f64 - 12.0);
            let (dx, dz) = (x as f64 - 15.0, z as f64 - 12.0);
            if dx.abs() <= 6.0 * p.sigma_x && dz.abs() <= 6.0 * p.sigma_z {
                assert_eq!(r.get(x, z, 0), want);
            } else {
                assert!(r.get(x, z, 0) < 1e-7);
            }
        }
    }
}

#[test]
fn rendering_is_additive() {
    let p = psf();
    let a = truth(vec![vec![(10.2, 8.7, 0.6)], vec![(3.0, 3.0, 1.0)]]);
    let b = truth(vec![vec![(12.9, 9.1, 0.9)], vec![(20.5, 15.5, 0.5)]]);
    let both = truth(vec![
        vec![(10.2, 8.7, 0.6), (12.9, 9.1, 0.9)],
        vec![(3.0, 3.0, 1.0), (20.5, 15.5, 0.5)],
    ]);
    let ra: Tensor3<f64> = render_frames(&a, &p, 28, 20).unwrap();
    let rb: Tensor3<f64> = render_frames(&b, &p, 28, 20).unwrap();
    let rab: Tensor3<f64> = render_frames(&both, &p, 28, 20).unwrap();
    assert_eq!(rab, ra.zip_map(&rb, |u, v| u + v).unwrap());
}

#[test]
fn half_pixel_blob_centroid() {
    let p = psf();
    for (x0, z0) in [(16.5, 12.5), (16.5, 12.0), (15.25, 11.75)] {
        let r: Tensor3<f64> = render_frames(&truth(vec![vec![(x0, z0, 1.0)]]), &p, 32, 24).unwrap();
        let (mut sx, mut sz, mut s) = (0.0, 0.0, 0.0);
        for z in 0..24 {
            for x in 0..32 {
                let v = r.get(x, z, 0);
                sx += x as f64 * v;
                sz += z as f64 * v;
                s += v;
            }
        }
        assert!((sx / s - x0).abs() < 0.05 && (sz / s - z0).abs() < 0.05, "({x0}, {z0})");
    }
}

#[test]
fn noise_level_matches_the_requested_snr() {
    let d = Dims3::new(64, 64, 50);
    let mut clean = Tensor3::zeros(d);
    clean.set(10, 10, 0, 1.0);
    let noisy = add_noise(&clean, 20.0, 7).unwrap();
    let diff: Vec<f64> = noisy
        .as_slice()
        .iter()
        .zip(clean.as_slice())
        .map(|(a, b)| a - b)
        .collect();
    let n = diff.len() as f64;
    let mean = diff.iter().sum::<f64>() / n;
    let sd = (diff.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!((sd / 0.1 - 1.0).abs() < 0.02, "sigma {sd}");
    assert!(mean.abs() < 0.005);

    assert_eq!(add_noise(&clean, f64::INFINITY, 7).unwrap(), clean);
    assert_eq!(add_noise(&clean, 20.0, 7).unwrap(), noisy);
    assert!(add_noise(&Tensor3::<f64>::zeros(d), 20.0, 7).is_err());
}
