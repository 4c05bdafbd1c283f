mod common;

use common::*;
use mfdecon::prox::{median_denoiser, prox_nonneg, Denoiser, IdentityDenoiser};
use mfdecon::psf::{gaussian_kernel, GaussianPsfParams};
use mfdecon::solver::{
    decon_single_frame, mf_decon, mf_decon_3dtv, mf_decon_red_tv, mf_decon_red_tv_with, objective_value, solve,
    temporal_variation, x_update_3dtv, x_update_red_tv, AdmmState, DenoiserSpec, Method, SolverConfig, Split, Term,
};
use mfdecon::tensor::{conv_slicewise, Dims3, Kernel2, Tensor3};
use mfdecon::Error;

fn psf() -> Kernel2<f64> {
    gaussian_kernel(&GaussianPsfParams::centered(0.8, 0.7, 1.0), (7, 5)).unwrap()
}

fn impulse_stack(d: Dims3, x: usize, z: usize) -> Tensor3<f64> {
    Tensor3::from_fn(d, |xx, zz, _| if (xx, zz) == (x, z) { 1.0 } else { 0.0 })
}

/// Two blurred bubbles moving one pixel per frame, with faint structured noise.
fn standard_stack(d: Dims3, a: &Kernel2<f64>) -> Tensor3<f64> {
    let mut x = Tensor3::zeros(d);
    for t in 0..d.frames {
        x.set(d.width / 4 + t, d.height / 3, t, 1.0);
        x.set(2 * d.width / 3, 2 * d.height / 3 - t, t, 0.7);
    }
    let noise = Tensor3::from_fn(d, |x, z, t| (((x * 7 + z * 13 + t * 3) % 17) as f64) / 17.0 - 0.5);
    conv_slicewise(&x, a)
        .unwrap()
        .zip_map(&noise, |v, n| v + 0.04 * n)
        .unwrap()
}

fn argmax_frame(x: &Tensor3<f64>, t: usize) -> (usize, usize) {
    let f = x.frame(t);
    let i = (0..f.len()).max_by(|&a, &b| f[a].total_cmp(&f[b])).unwrap();
    (i % x.width(), i / x.width())
}

fn dense_update_of(state: &AdmmState<f64>, a: &Kernel2<f64>, y: &Tensor3<f64>) -> Tensor3<f64> {
    let d = state.dims();
    let am = conv_matrix(d, a);
    let splits: Vec<_> = state
        .terms()
        .into_iter()
        .map(|t| {
            let s = state.split(t).unwrap();
            (t, vec_of(&s.z), vec_of(&s.dual))
        })
        .collect();
    let x = dense_x_update(state.config(), &am, &vec_of(y), &vec_of(&state.x()), &splits, d);
    tensor_of(d, &x)
}

#[test]
fn x_update_matches_dense_solve_for_every_method() {
    let shapes = [(6, 6, 3), (5, 4, 1), (4, 6, 2), (6, 5, 4), (3, 5, 7)];
    for (si, &(w, h, k)) in shapes.iter().enumerate() {
        let d = Dims3::new(w, h, k);
        let a = random_kernel(3, 3, 100 + si as u64);
        let y = random_stack(d, 200 + si as u64);
        for method in Method::ALL {
            if method == Method::Decon && k != 1 {
                continue;
            }
            let mut state = AdmmState::new(&y, &a, &config(method)).unwrap();
            set_random_state(&mut state, 300 + si as u64);
            let got = state.x_update();
            let want = dense_update_of(&state, &a, &y);
            let err = rel(&got, &want);
            assert!(err <= 1e-8, "{method} on {w}x{h}x{k}: relative error {err:e}");
        }
    }
}

#[test]
fn public_x_updates_check_the_method_family() {
    let d = Dims3::new(6, 6, 3);
    let (y, a) = (random_stack(d, 1), random_kernel(3, 3, 2));
    let tv = AdmmState::new(&y, &a, &config(Method::Mf3dTv)).unwrap();
    let red = AdmmState::new(&y, &a, &config(Method::MfRedTv)).unwrap();
    assert!(x_update_3dtv(&tv).is_ok());
    assert!(x_update_red_tv(&red).is_ok());
    assert!(matches!(x_update_3dtv(&red), Err(Error::Config(_))));
    assert!(matches!(x_update_red_tv(&tv), Err(Error::Config(_))));
}

#[test]
fn h_is_alpha_times_squared_spectral_norm() {
    let d = Dims3::new(6, 5, 2);
    let a = random_kernel(3, 3, 9);
    let cfg = config(Method::MfDecon);
    let state = AdmmState::new(&random_stack(d, 1), &a, &cfg).unwrap();
    let want = dense_h(&conv_matrix(d, &a), cfg.alpha);
    assert!((state.h() - want).abs() <= 1e-10 * want);
}

#[test]
fn zero_right_hand_side_gives_zero_update() {
    let d = Dims3::new(6, 6, 3);
    for method in [Method::MfDecon, Method::Mf3dTv, Method::MfRedTv] {
        let state = AdmmState::new(&Tensor3::zeros(d), &random_kernel(3, 3, 4), &config(method)).unwrap();
        assert!(state.x_update().as_slice().iter().all(|&v| v == 0.0), "{method}");
    }
}

#[test]
fn delta_psf_update_has_closed_form() {
    // With A = delta and alpha = 1 the update is (y + rho1 (z - u)) / (rho1 + 1).
    let d = Dims3::new(5, 4, 3);
    let mut cfg = config(Method::MfDecon);
    cfg.alpha = 1.0;
    cfg.rho1 = 3.5;
    let y = random_stack(d, 5);
    let mut state = AdmmState::new(&y, &Kernel2::delta(), &cfg).unwrap();
    set_random_state(&mut state, 6);
    let s = state.split(Term::Sparsity).unwrap();
    let want = Tensor3::from_fn(d, |x, z, t| {
        (y.get(x, z, t) + cfg.rho1 * (s.z.get(x, z, t) - s.dual.get(x, z, t))) / (cfg.rho1 + 1.0)
    });
    assert!(rel(&state.x_update(), &want) <= 1e-12);
}

#[test]
fn split_round_trips() {
    let d = Dims3::new(4, 4, 3);
    let mut state = AdmmState::new(&random_stack(d, 1), &random_kernel(3, 3, 1), &config(Method::Mf3dTv)).unwrap();
    let s = Split {
        z: random_stack(d, 2),
        dual: random_stack(d, 3),
    };
    state.set_split(Term::TvT, s.clone()).unwrap();
    let back = state.split(Term::TvT).unwrap();
    assert!(back.z.max_abs_diff(&s.z) <= 1e-15);
    assert_eq!(back.dual, s.dual);
    assert!(state.split(Term::Red).is_none());
    assert!(state.set_split(Term::Red, s).is_err());
}

fn check_against_dense_admm(method: Method, d: Dims3, iterations: usize, denoiser: Option<DenoiserSpec>) {
    let a = random_kernel(3, 3, 40);
    let y = random_stack(d, 41).map(|v| v.abs());
    let mut cfg = config(method).with_iterations(iterations);
    if denoiser.is_some() {
        cfg.denoiser = denoiser;
    }
    let mut state = AdmmState::new(&y, &a, &cfg).unwrap();
    for _ in 0..iterations {
        state.step().unwrap();
    }
    let den = cfg.denoiser.map(|s| s.build::<f64>().unwrap());
    let apply = |v: &Tensor3<f64>| den.as_ref().map_or_else(|| v.clone(), |f| f.apply(v));
    let (x, splits) = dense_admm(&cfg, &y, &a, iterations, &apply);
    let err = rel(&state.x(), &x);
    assert!(err <= 1e-9, "{method} X relative error {err:e}");
    for (term, z, u) in splits {
        let s = state.split(term).unwrap();
        assert!(rel(&s.z, &tensor_of(d, &z)) <= 1e-9, "{method} {term:?} z");
        assert!(rel(&s.dual, &tensor_of(d, &u)) <= 1e-9, "{method} {term:?} dual");
    }
}

#[test]
fn fused_iterations_follow_the_textbook_order() {
    for d in [
        Dims3::new(6, 6, 3),
        Dims3::new(5, 4, 5),
        Dims3::new(4, 4, 2),
        Dims3::new(5, 5, 1),
    ] {
        check_against_dense_admm(Method::MfDecon, d, 8, None);
        check_against_dense_admm(Method::Mf3dTv, d, 8, None);
        check_against_dense_admm(Method::MfRedTv, d, 8, Some(DenoiserSpec::Median { window: 3 }));
        check_against_dense_admm(Method::MfRedTv, d, 8, Some(DenoiserSpec::Identity));
    }
}

#[test]
fn run_trace_matches_stepping() {
    let d = Dims3::new(8, 8, 4);
    let (y, a) = (random_stack(d, 7).map(f64::abs), random_kernel(3, 3, 8));
    let cfg = config(Method::Mf3dTv).with_iterations(12);
    let res = solve(&y, &a, &cfg).unwrap();
    assert_eq!(res.iterations(), 12);
    assert_eq!(res.objective.len(), 12);
    let mut state = AdmmState::new(&y, &a, &cfg).unwrap();
    for i in 0..12 {
        state.step().unwrap();
        let s = state.stats();
        assert_eq!(s.iteration, i + 1);
        assert!((s.objective - res.objective[i]).abs() <= 1e-12 * s.objective.abs().max(1.0));
        assert!((s.primal_residual - res.primal_residual[i]).abs() <= 1e-12 * s.primal_residual.max(1.0));
    }
    assert_eq!(res.x, prox_nonneg(&state.x()));
}

#[test]
fn trace_objective_agrees_with_objective_value() {
    let d = Dims3::new(10, 8, 5);
    let (y, a) = (random_stack(d, 17).map(f64::abs), random_kernel(3, 3, 18));
    for method in [Method::MfDecon, Method::Mf3dTv] {
        let cfg = config(method).with_iterations(6);
        let mut state = AdmmState::new(&y, &a, &cfg).unwrap();
        for _ in 0..6 {
            state.step().unwrap();
        }
        let want = objective_value(&y, &a, &state.x(), &cfg).unwrap().value;
        let got = state.stats().objective;
        assert!((got - want).abs() <= 1e-9 * want, "{method}: {got} vs {want}");
    }
}

#[test]
fn zero_input_gives_zero_output() {
    let a = psf();
    let single = Tensor3::zeros(Dims3::new(16, 12, 1));
    let x = decon_single_frame(&single, &a, &config(Method::Decon).with_iterations(30))
        .unwrap()
        .x;
    assert!(x.as_slice().iter().all(|&v| v == 0.0));
    let stack = Tensor3::zeros(Dims3::new(16, 12, 4));
    for method in [Method::MfDecon, Method::Mf3dTv, Method::MfRedTv] {
        let x = solve(&stack, &a, &config(method).with_iterations(30)).unwrap().x;
        assert!(x.as_slice().iter().all(|&v| v == 0.0), "{method}");
    }
}

#[test]
fn single_impulse_is_recovered() {
    let d = Dims3::new(32, 32, 1);
    let a = psf();
    let y = conv_slicewise(&impulse_stack(d, 12, 17), &a).unwrap();
    let x = decon_single_frame(&y, &a, &config(Method::Decon)).unwrap().x;
    assert_eq!(argmax_frame(&x, 0), (12, 17));
    let peak = x.get(12, 17, 0);
    let off: f64 = x.as_slice().iter().map(|v| v * v).sum::<f64>() - peak * peak;
    assert!(off < 0.01 * peak * peak, "off-support energy {off:e}, peak {peak}");
}

#[test]
fn delta_psf_without_sparsity_projects_the_data() {
    let d = Dims3::new(9, 7, 1);
    let y = random_stack(d, 3);
    let mut cfg = config(Method::Decon).with_iterations(500);
    cfg.lambda1 = 0.0;
    let x = decon_single_frame(&y, &Kernel2::delta(), &cfg).unwrap().x;
    let want = prox_nonneg(&y);
    let err = rel(&x, &want);
    assert!(err < 1e-6, "relative residual {err:e}");
}

#[test]
fn identical_frames_stay_identical() {
    let frame = random_stack(Dims3::new(12, 10, 1), 8).map(f64::abs);
    let d = Dims3::new(12, 10, 5);
    let y = Tensor3::from_fn(d, |x, z, _| frame.get(x, z, 0));
    let x = mf_decon(&y, &psf(), &config(Method::MfDecon).with_iterations(100))
        .unwrap()
        .x;
    for t in 1..5 {
        for (a, b) in x.frame(0).iter().zip(x.frame(t)) {
            assert!((a - b).abs() <= 1e-9);
        }
    }
}

#[test]
fn multi_frame_decon_is_separable() {
    let d = Dims3::new(16, 16, 4);
    let y = random_stack(d, 12).map(f64::abs);
    let a = psf();
    let x = mf_decon(&y, &a, &config(Method::MfDecon).with_iterations(200))
        .unwrap()
        .x;
    for t in 0..4 {
        let yt = y.frames_range(t, 1).unwrap();
        let xt = decon_single_frame(&yt, &a, &config(Method::Decon).with_iterations(200))
            .unwrap()
            .x;
        let err = rel(&x.frames_range(t, 1).unwrap(), &xt);
        assert!(err <= 1e-8, "frame {t}: {err:e}");
    }
}

#[test]
fn weak_tv_approaches_plain_multi_frame_decon() {
    let d = Dims3::new(12, 12, 4);
    let y = random_stack(d, 13).map(f64::abs);
    let a = psf();
    let mut cfg = config(Method::Mf3dTv).with_iterations(200);
    cfg.lambda2 = 0.0;
    cfg.lambda3 = 0.0;
    cfg.rho2 = 1e-7;
    cfg.rho3 = 1e-7;
    let tv = mf_decon_3dtv(&y, &a, &cfg).unwrap().x;
    let plain = mf_decon(&y, &a, &config(Method::MfDecon).with_iterations(200))
        .unwrap()
        .x;
    let err = rel(&tv, &plain);
    assert!(err <= 1e-3, "{err:e}");
}

#[test]
fn red_with_identity_denoiser_converges_to_3dtv_without_spatial_tv() {
    // Same objective, different splittings: compare converged solutions.
    let d = Dims3::new(16, 16, 6);
    let a = psf();
    let y = standard_stack(d, &a);
    let cfg_red = config(Method::MfRedTv).with_iterations(2000);
    let red = mf_decon_red_tv_with(&y, &a, &cfg_red, Box::new(IdentityDenoiser))
        .unwrap()
        .x;
    let mut cfg_tv = config(Method::Mf3dTv).with_iterations(2000);
    cfg_tv.lambda2 = 0.0;
    cfg_tv.lambda3 = cfg_red.lambda3;
    let tv = mf_decon_3dtv(&y, &a, &cfg_tv).unwrap().x;
    let err = rel(&red, &tv);
    assert!(err <= 1e-3, "{err:e}");
}

#[test]
fn static_bubble_is_localised_by_every_multi_frame_method() {
    let d = Dims3::new(48, 40, 10);
    let a = psf();
    let y = conv_slicewise(&impulse_stack(d, 30, 25), &a).unwrap();
    for method in [Method::MfDecon, Method::Mf3dTv, Method::MfRedTv] {
        let x = solve(&y, &a, &config(method)).unwrap().x;
        for t in 0..d.frames {
            let (px, pz) = argmax_frame(&x, t);
            assert!(
                px.abs_diff(30) <= 1 && pz.abs_diff(25) <= 1,
                "{method} frame {t}: ({px}, {pz})"
            );
        }
    }
}

#[test]
fn solves_are_deterministic() {
    let d = Dims3::new(16, 12, 6);
    let y = random_stack(d, 15).map(f64::abs);
    for method in [Method::MfDecon, Method::Mf3dTv, Method::MfRedTv] {
        let cfg = config(method).with_iterations(40);
        let a = solve(&y, &psf(), &cfg).unwrap();
        let b = solve(&y, &psf(), &cfg).unwrap();
        assert_eq!(a.x, b.x, "{method}");
        assert_eq!(a.objective, b.objective, "{method}");
    }
}

#[test]
fn temporal_tv_smooths_over_time() {
    let d = Dims3::new(24, 24, 8);
    let a = psf();
    for seed in 0..10 {
        let clean = conv_slicewise(&impulse_stack(d, 8 + seed as usize, 12), &a).unwrap();
        let y = clean.zip_map(&random_stack(d, 500 + seed), |v, n| v + 0.2 * n).unwrap();
        let tv = temporal_variation(
            &mf_decon_3dtv(&y, &a, &config(Method::Mf3dTv).with_iterations(150))
                .unwrap()
                .x,
            &a,
        )
        .unwrap();
        let plain = temporal_variation(
            &mf_decon(&y, &a, &config(Method::MfDecon).with_iterations(150))
                .unwrap()
                .x,
            &a,
        )
        .unwrap();
        assert!(tv <= plain, "seed {seed}: {tv} > {plain}");
    }
}

#[test]
fn primal_residual_settles_over_the_last_iterations() {
    let d = Dims3::new(32, 32, 8);
    let a = psf();
    let y = standard_stack(d, &a);
    for method in [Method::Mf3dTv, Method::MfDecon] {
        let res = solve(&y, &a, &config(method)).unwrap();
        let tail = &res.primal_residual[res.primal_residual.len() - 100..];
        let avg: Vec<f64> = tail.windows(20).map(|w| w.iter().sum::<f64>() / 20.0).collect();
        for w in avg.windows(2) {
            assert!(
                w[1] <= w[0] * (1.0 + 1e-9),
                "{method}: moving average rose {} -> {}",
                w[0],
                w[1]
            );
        }
    }
}

#[test]
fn objective_value_oracles() {
    let d = Dims3::new(7, 6, 4);
    let y = random_stack(d, 20);
    let a = random_kernel(3, 3, 21);
    let cfg = config(Method::Mf3dTv);
    let zero = objective_value(&y, &a, &Tensor3::zeros(d), &cfg).unwrap();
    assert!((zero.value - 0.5 * y.norm_sq()).abs() <= 1e-12 * zero.value);
    assert_eq!(zero.nonneg_violation, 0.0);

    let x = random_stack(d, 22).map(f64::abs);
    let mut exact = config(Method::MfDecon);
    exact.lambda1 = 0.0;
    let o = objective_value(&x, &Kernel2::delta(), &x, &exact).unwrap();
    assert_eq!(o.value, 0.0);

    // Direct recomputation from the definitions with the dense operators.
    let x = random_stack(d, 23);
    let am = conv_matrix(d, &a);
    let ax = &am * vec_of(&x);
    let mut want = 0.5 * (vec_of(&y) - &ax).norm_squared() + cfg.lambda1 * vec_of(&x).lp_norm(1);
    want += cfg.lambda2 * (diff_matrix(d, 0) * &ax).lp_norm(1);
    want += cfg.lambda2 * (diff_matrix(d, 1) * &ax).lp_norm(1);
    want += cfg.lambda3 * (diff_matrix(d, 2) * &ax).lp_norm(1);
    let o = objective_value(&y, &a, &x, &cfg).unwrap();
    assert!((o.value - want).abs() <= 1e-10 * want);
    let most_negative = x.as_slice().iter().fold(0.0f64, |m, &v| m.max(-v));
    assert_eq!(o.nonneg_violation, most_negative);
}

#[test]
fn configuration_errors() {
    let a = psf();
    let stack = random_stack(Dims3::new(16, 16, 3), 1);
    assert!(matches!(
        decon_single_frame(&stack, &a, &config(Method::Decon)),
        Err(Error::Shape(_))
    ));
    assert!(matches!(
        mf_decon(&stack, &a, &config(Method::Mf3dTv)),
        Err(Error::Config(_))
    ));
    let mut cfg = config(Method::Mf3dTv);
    cfg.rho3 = 0.0;
    assert!(matches!(mf_decon_3dtv(&stack, &a, &cfg), Err(Error::Config(_))));
    let mut cfg = config(Method::Mf3dTv);
    cfg.rho2 = -1.0;
    assert!(matches!(mf_decon_3dtv(&stack, &a, &cfg), Err(Error::Config(_))));
    let mut cfg = config(Method::MfRedTv);
    cfg.denoiser = None;
    assert!(matches!(mf_decon_red_tv(&stack, &a, &cfg), Err(Error::Config(_))));
    let cfg = SolverConfig {
        iterations: 0,
        ..config(Method::MfDecon)
    };
    assert!(matches!(mf_decon(&stack, &a, &cfg), Err(Error::Config(_))));
}

#[test]
fn median_denoiser_is_a_valid_red_prior() {
    let m = median_denoiser(5).unwrap();
    assert_eq!(Denoiser::<f64>::name(&m), "median5");
}

#[test]
fn f32_solves_track_f64() {
    let d = Dims3::new(16, 16, 4);
    let y = random_stack(d, 30).map(f64::abs);
    let a = psf();
    let cfg = config(Method::Mf3dTv).with_iterations(50);
    let x64 = solve(&y, &a, &cfg).unwrap().x;
    let x32 = solve(&y.cast::<f32>(), &a.cast::<f32>(), &cfg).unwrap().x.cast::<f64>();
    assert!(rel(&x32, &x64) <= 1e-4);
}
