use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use nsfixedb::dgp::{simulate, DgpSpec, SamplePath};
use nsfixedb::estimators::{
    default_bandwidths, fixed_b_lrv, fixed_b_lrv_bartlett_partial_sums, hac_lrv, local_autocov,
    local_lrv_curve, local_regressor_moment, ols_fit, sample_autocov, LocalLrvCurve, LrvEstimate,
};
use nsfixedb::kernels::{eval_lag_kernel, LagKernel, TimeKernel};
use nsfixedb::Error;

fn alternating() -> SamplePath {
    SamplePath::location(vec![1.0, -1.0, 1.0, -1.0]).unwrap()
}

fn random_regression(t: usize, p: usize, seed: u64) -> SamplePath {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || -> f64 { StandardNormal.sample(&mut rng) };
    let x = DMatrix::from_fn(t, p, |_, j| if j == 0 { 1.0 } else { draw() });
    let y = DVector::from_fn(t, |i, _| x.row(i).sum() + draw());
    SamplePath::new(y, x).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn alternating_sample_hand_values() {
    let fit = ols_fit(&alternating()).unwrap();
    assert!(fit.beta_hat[0].abs() < 1e-15);
    assert!((&fit.residuals - DVector::from_vec(vec![1.0, -1.0, 1.0, -1.0])).amax() < 1e-15);
    assert!((sample_autocov(&fit, 0).unwrap()[(0, 0)] - 1.0).abs() < 1e-15);
    assert!((sample_autocov(&fit, 1).unwrap()[(0, 0)] + 0.75).abs() < 1e-15);
    assert!((sample_autocov(&fit, 2).unwrap()[(0, 0)] - 0.5).abs() < 1e-15);
    assert!((sample_autocov(&fit, 3).unwrap()[(0, 0)] + 0.25).abs() < 1e-15);
    assert!(matches!(
        sample_autocov(&fit, 4),
        Err(Error::OutOfRange { .. })
    ));

    let hac = hac_lrv(&fit, LagKernel::Bartlett, 1.0 / 3.0)
        .unwrap()
        .scalar();
    assert!((hac - 1.0 / 3.0).abs() < 1e-14, "{hac}");
    let ps = fixed_b_lrv_bartlett_partial_sums(&fit).scalar();
    assert!((ps - 0.25).abs() < 1e-15);
}

#[test]
fn perfect_fit_has_zero_residuals() {
    let x = DMatrix::from_fn(50, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
    let y = DVector::from_fn(50, |i, _| 2.0 + 0.5 * i as f64);
    let fit = ols_fit(&SamplePath::new(y, x).unwrap()).unwrap();
    assert!(fit.residuals.amax() < 1e-10);
    assert!(
        fixed_b_lrv(&fit, LagKernel::Bartlett, 1.0)
            .unwrap()
            .value
            .amax()
            < 1e-18
    );
    assert!(hac_lrv(&fit, LagKernel::Parzen, 0.1).unwrap().value.amax() < 1e-18);
}

#[test]
fn ols_matches_normal_equations() {
    for seed in 0..10 {
        let s = random_regression(200, 3, seed);
        let fit = ols_fit(&s).unwrap();
        let xtx = s.x.transpose() * &s.x;
        let xty = s.x.transpose() * &s.y;
        let beta = xtx.cholesky().unwrap().solve(&xty);
        let rel = (&fit.beta_hat - &beta).norm() / beta.norm();
        assert!(rel < 1e-9, "{rel}");
        let score_sum: f64 = (s.x.transpose() * &fit.residuals).amax();
        assert!(score_sum < 1e-9);
    }
}

#[test]
fn rank_deficient_design_is_rejected() {
    let x = DMatrix::from_fn(20, 2, |_, _| 1.0);
    let y = DVector::from_element(20, 1.0);
    assert!(matches!(
        ols_fit(&SamplePath::new(y, x).unwrap()),
        Err(Error::RankDeficient { .. })
    ));
}

#[test]
fn truncated_kernel_with_wide_bandwidth_keeps_lag_zero() {
    let fit = ols_fit(&random_regression(100, 2, 4)).unwrap();
    let g0 = sample_autocov(&fit, 0).unwrap();
    let hac = hac_lrv(&fit, LagKernel::Truncated, 1.0).unwrap();
    assert!((hac.value - g0).amax() < 1e-14);
}

#[test]
fn fixed_b_forms_agree() {
    let fit = ols_fit(&random_regression(150, 2, 9)).unwrap();
    let t = fit.len() as f64;
    let fb = fixed_b_lrv(&fit, LagKernel::Bartlett, 1.0).unwrap().value;
    let hac = hac_lrv(&fit, LagKernel::Bartlett, 1.0 / t).unwrap().value;
    let ps = fixed_b_lrv_bartlett_partial_sums(&fit).value;
    assert!((&fb - &hac).amax() < 1e-10 * fb.amax());
    assert!((&fb - &ps).amax() < 1e-10 * fb.amax());
    assert!(matches!(
        fixed_b_lrv(&fit, LagKernel::Truncated, 0.5),
        Err(Error::NonPsdKernel(_))
    ));
}

#[test]
fn estimators_match_brute_force_double_sum() {
    for (k, b) in [
        (LagKernel::Bartlett, 0.3),
        (LagKernel::Parzen, 0.8),
        (LagKernel::QuadraticSpectral, 0.1),
    ] {
        let fit = ols_fit(&random_regression(120, 2, 17)).unwrap();
        let t = fit.len();
        let v = &fit.v_hat;
        let mut brute = DMatrix::<f64>::zeros(2, 2);
        for i in 0..t {
            for j in 0..t {
                let w = eval_lag_kernel(k, (i as f64 - j as f64) / (t as f64 * b));
                brute += w * v.row(i).transpose() * v.row(j);
            }
        }
        brute /= t as f64;
        let fb = fixed_b_lrv(&fit, k, b).unwrap().value;
        assert!((&fb - &brute).amax() < 1e-10 * brute.amax(), "{k:?}");
        let hac = hac_lrv(&fit, k, 1.0 / (t as f64 * b)).unwrap().value;
        assert!((&hac - &brute).amax() < 1e-10 * brute.amax(), "{k:?}");
    }
}

#[test]
fn hac_consistency_improves_with_t() {
    let spec = DgpSpec::stationary_ar1(0.5, 1.0);
    let err_at = |t: usize| {
        let errs = (0..100)
            .map(|rep| {
                let fit = ols_fit(&simulate(&spec, t, 1000 + rep).unwrap()).unwrap();
                let b_t = (t as f64).powf(-0.5);
                (hac_lrv(&fit, LagKernel::Bartlett, b_t).unwrap().scalar() - 4.0).abs() / 4.0
            })
            .collect();
        median(errs)
    };
    let errs = [err_at(1000), err_at(2000), err_at(4000)];
    assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
}

#[test]
fn local_autocov_reduces_to_sample_autocov() {
    let fit = ols_fit(&random_regression(200, 2, 3)).unwrap();
    let g0 = sample_autocov(&fit, 0).unwrap();
    let c0 = local_autocov(&fit, 0.5, 0, 1.0, TimeKernel::Uniform).unwrap();
    assert!((&c0 - &g0).amax() < 1e-12 * g0.amax(), "{c0} vs {g0}");
    let c3 = local_autocov(&fit, 0.4, 3, 0.5, TimeKernel::Quartic).unwrap();
    let cm3 = local_autocov(&fit, 0.4, -3, 0.5, TimeKernel::Quartic).unwrap();
    assert!((c3.transpose() - cm3).amax() < 1e-14);
}

#[test]
fn zero_scores_give_zero_curve() {
    let s = SamplePath::location(vec![0.0; 400]).unwrap();
    let fit = ols_fit(&s).unwrap();
    assert_eq!(
        local_autocov(&fit, 0.5, 2, 0.3, TimeKernel::Triangular).unwrap()[(0, 0)],
        0.0
    );
    let curve =
        local_lrv_curve(&fit, 10, 0.2, 0.3, LagKernel::Bartlett, TimeKernel::Quartic).unwrap();
    assert!(curve.omega.iter().all(|m| m[(0, 0)] == 0.0));
}

fn iid_curves(reps: u64) -> Vec<LocalLrvCurve> {
    let iid = DgpSpec::stationary_ar1(0.0, 1.0);
    (0..reps)
        .map(|rep| {
            let fit = ols_fit(&simulate(&iid, 4000, 500 + rep).unwrap()).unwrap();
            local_lrv_curve(&fit, 20, 0.1, 0.2, LagKernel::Bartlett, TimeKernel::Quartic).unwrap()
        })
        .collect()
}

// Asymptotic variance 2 Ω² ∫K₁² ∫K₂² / (T h₁ h₂): Bartlett ∫K² = 2/3, quartic ∫K₂² = 10/7.
#[test]
fn local_curve_pointwise_mean_and_spread_on_iid_data() {
    let reps = 200;
    let curves = iid_curves(reps);
    let sd_theory = (2.0f64 * (2.0 / 3.0) * (10.0 / 7.0) / (4000.0 * 0.1 * 0.2)).sqrt();
    for i in [5, 10, 14] {
        let v: Vec<f64> = curves.iter().map(|c| c.omega[i][(0, 0)]).collect();
        let m = v.iter().sum::<f64>() / reps as f64;
        let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
        assert!(
            (m - 1.0).abs() < 3.0 * sd / (reps as f64).sqrt() + 0.02,
            "u index {i}: mean {m}"
        );
        assert!(
            (sd / sd_theory - 1.0).abs() < 0.2,
            "u index {i}: sd {sd} vs {sd_theory}"
        );
    }
}

// The pointwise sd is about 0.15, so a ±0.35 band over 20 points holds in
// roughly two thirds of samples at these bandwidths, not 90%.
#[test]
#[ignore = "uniform ±0.35 band in 90% of reps is not attainable at h1 = 0.1, h2 = 0.2, T = 4000 (about 65% observed)"]
fn local_curve_uniform_band_on_iid_data() {
    let curves = iid_curves(200);
    let good = curves
        .iter()
        .filter(|c| c.omega.iter().all(|m| (m[(0, 0)] - 1.0).abs() <= 0.35))
        .count();
    assert!(good >= 180, "{good}/200");
}

#[test]
fn local_curve_tracks_variance_break() {
    let vb = DgpSpec::variance_break(1.0, 4.0, 0.5);
    let mut lo = Vec::new();
    let mut hi = Vec::new();
    for rep in 0..60 {
        let fit = ols_fit(&simulate(&vb, 4000, 900 + rep).unwrap()).unwrap();
        let curve =
            local_lrv_curve(&fit, 20, 0.1, 0.2, LagKernel::Bartlett, TimeKernel::Quartic).unwrap();
        lo.push(curve.sigma_at(0.25)[(0, 0)].powi(2));
        hi.push(curve.sigma_at(0.75)[(0, 0)].powi(2));
    }
    let (lo, hi) = (median(lo), median(hi));
    assert!((lo - 1.0).abs() < 0.4, "{lo}");
    assert!((hi / 4.0 - 1.0).abs() < 0.4, "{hi}");
}

#[test]
fn curve_square_root_and_psd() {
    let fit = ols_fit(&random_regression(600, 2, 8)).unwrap();
    let curve = local_lrv_curve(
        &fit,
        15,
        0.3,
        0.3,
        LagKernel::QuadraticSpectral,
        TimeKernel::Triangular,
    )
    .unwrap();
    for (om, sg) in curve.omega.iter().zip(&curve.sigma) {
        assert!(om.clone().symmetric_eigenvalues().min() >= -1e-12);
        assert!((sg * sg.transpose() - om).amax() < 1e-10 * om.amax().max(1.0));
    }
}

#[test]
fn narrow_window_is_degenerate() {
    let fit = ols_fit(&random_regression(100, 1, 2)).unwrap();
    assert!(matches!(
        local_lrv_curve(&fit, 5, 0.5, 0.02, LagKernel::Bartlett, TimeKernel::Uniform),
        Err(Error::DegenerateBandwidth(_))
    ));
}

#[test]
fn local_regressor_moment_values() {
    let s = SamplePath::location(vec![0.0; 200]).unwrap();
    for u in [0.0, 0.5, 1.0] {
        assert!(
            (local_regressor_moment(&s, u, 0.2, TimeKernel::Quartic).unwrap()[(0, 0)] - 1.0).abs()
                < 1e-12
        );
    }
    let x = DMatrix::from_element(200, 1, 3.0);
    let s = SamplePath::new(DVector::zeros(200), x).unwrap();
    assert!(
        (local_regressor_moment(&s, 0.3, 0.2, TimeKernel::Uniform).unwrap()[(0, 0)] - 9.0).abs()
            < 1e-12
    );

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = DMatrix::from_fn(4000, 1, |i, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        if i < 2000 {
            z
        } else {
            2.0 * z
        }
    });
    let s = SamplePath::new(DVector::zeros(4000), x).unwrap();
    let lo = local_regressor_moment(&s, 0.25, 0.2, TimeKernel::Quartic).unwrap()[(0, 0)];
    let hi = local_regressor_moment(&s, 0.75, 0.2, TimeKernel::Quartic).unwrap()[(0, 0)];
    assert!(
        (lo - 1.0).abs() < 0.15 && (hi / 4.0 - 1.0).abs() < 0.15,
        "{lo} {hi}"
    );
}

#[test]
fn default_bandwidth_rates() {
    let (h1, h2) = default_bandwidths(1000);
    assert!((h1 - 1.5 * 1000f64.powf(-0.2)).abs() < 1e-15);
    assert!((h2 - 1000f64.powf(-1.0 / 6.0)).abs() < 1e-15);
    let (h1, _) = default_bandwidths(5);
    assert!(h1 <= 1.0);
}

#[test]
fn estimate_and_curve_serialization() {
    let fit = ols_fit(&random_regression(300, 2, 12)).unwrap();
    let est = fixed_b_lrv(&fit, LagKernel::Parzen, 0.5).unwrap();
    assert_eq!(LrvEstimate::from_json(&est.to_json()).unwrap(), est);

    let fit = ols_fit(&simulate(&DgpSpec::variance_break(1.0, 4.0, 0.5), 800, 1).unwrap()).unwrap();
    let curve =
        local_lrv_curve(&fit, 12, 0.3, 0.3, LagKernel::Bartlett, TimeKernel::Quartic).unwrap();
    let mut buf = Vec::new();
    curve.write_csv(&mut buf).unwrap();
    let header = std::str::from_utf8(&buf)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string();
    assert!(header.starts_with("u,omega_hat,sigma_hat"), "{header}");
    let back = LocalLrvCurve::read_csv(buf.as_slice()).unwrap();
    assert_eq!(back.grid, curve.grid);
    assert_eq!(back.omega, curve.omega);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn psd_for_psd_kernels(
        seed in any::<u64>(),
        k in prop::sample::select(vec![LagKernel::Bartlett, LagKernel::Parzen, LagKernel::QuadraticSpectral]),
        b in 0.05f64..=1.0,
    ) {
        let fit = ols_fit(&random_regression(80, 3, seed)).unwrap();
        let v = fixed_b_lrv(&fit, k, b).unwrap().value;
        prop_assert!((&v - v.transpose()).amax() <= 1e-12 * v.amax());
        prop_assert!(v.clone().symmetric_eigenvalues().min() >= -1e-9 * v.trace());
    }

    #[test]
    fn bartlett_identity(seed in any::<u64>(), t in 10usize..200) {
        let fit = ols_fit(&random_regression(t, 2, seed)).unwrap();
        let a = fixed_b_lrv(&fit, LagKernel::Bartlett, 1.0).unwrap().value;
        let b = fixed_b_lrv_bartlett_partial_sums(&fit).value;
        prop_assert!((&a - &b).amax() <= 1e-10 * a.amax());
    }

    #[test]
    fn location_shift_invariance(y in prop::collection::vec(-10.0f64..10.0, 20..80), c in -100.0f64..100.0) {
        let a = ols_fit(&SamplePath::location(y.clone()).unwrap()).unwrap();
        let b = ols_fit(&SamplePath::location(y.iter().map(|v| v + c).collect()).unwrap()).unwrap();
        prop_assert!((&a.v_hat - &b.v_hat).amax() < 1e-9);
        let ea = fixed_b_lrv(&a, LagKernel::Parzen, 0.5).unwrap().scalar();
        let eb = fixed_b_lrv(&b, LagKernel::Parzen, 0.5).unwrap().scalar();
        prop_assert!((ea - eb).abs() <= 1e-8 * ea.abs().max(1.0));
    }

    #[test]
    fn autocov_transpose(seed in any::<u64>(), k in 0i64..30) {
        let fit = ols_fit(&random_regression(40, 2, seed)).unwrap();
        let a = sample_autocov(&fit, k).unwrap();
        let b = sample_autocov(&fit, -k).unwrap();
        prop_assert_eq!(a.transpose(), b);
    }
}
