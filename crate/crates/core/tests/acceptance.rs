//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Lines are written straight to stdout so they appear even when the test
//! harness captures output.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use nsfixedb::dgp::{simulate, DgpSpec, RegressorMomentPath, SamplePath, VariancePath};
use nsfixedb::estimators::{fixed_b_lrv, fixed_b_lrv_bartlett_partial_sums, hac_lrv, ols_fit};
use nsfixedb::harness::{cli_main, run_erp_study, run_size_experiment, ExperimentSpec};
use nsfixedb::kernels::{BandwidthedKernel, LagKernel};
use nsfixedb::limitdist::{
    cumulant_bound, cumulants_asymptotic_nodes, draw_rng, expansion_rejection_approx,
    expansion_rejection_approx_unchecked, finite_t_moments, mean_g_b, quantile_sorted,
    quantile_with_se, Functional, GridSpec, LimitEngine, LimitForm, Statistic, CUMULANT_NODES,
};
use nsfixedb::Error;

fn report(
    id: &str,
    title: &str,
    pass: bool,
    elapsed: Duration,
    budget: Duration,
    detail: &str,
) -> bool {
    let ok = pass && elapsed <= budget;
    let line = format!(
        "[{}] {id} {title}: {detail} ({:.1}s of {:.0}s)\n",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        budget.as_secs_f64()
    );
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    ok
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

/// Sample variance and its standard error `√((m₄ − s⁴)/N)`.
fn var_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
    (v, ((m4 - v * v) / n).sqrt())
}

fn random_fit(rng: &mut ChaCha8Rng) -> nsfixedb::estimators::OlsFit {
    let t = rng.random_range(20..300);
    let p = rng.random_range(1..4);
    let x = DMatrix::from_fn(t, p, |_, j| {
        if j == 0 {
            1.0
        } else {
            StandardNormal.sample(rng)
        }
    });
    let mut e = 0.0;
    let y = DVector::from_fn(t, |i, _| {
        e = 0.6 * e + Distribution::<f64>::sample(&StandardNormal, rng);
        (i as f64 / t as f64) * 0.5 + x[(i, p - 1)] + e
    });
    ols_fit(&SamplePath::new(y, x).unwrap()).unwrap()
}

fn ac1() -> bool {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let fit = random_fit(&mut rng);
        let a = fixed_b_lrv(&fit, LagKernel::Bartlett, 1.0).unwrap().value;
        let b = fixed_b_lrv_bartlett_partial_sums(&fit).value;
        worst = worst.max((&a - &b).amax() / b.amax());
    }
    report(
        "AC1",
        "Bartlett partial-sum identity",
        worst <= 1e-10,
        start.elapsed(),
        Duration::from_secs(5),
        &format!("max relative gap {worst:.2e} over 100 fits (tol 1e-10)"),
    )
}

fn ac2() -> bool {
    let start = Instant::now();
    let k = BandwidthedKernel::new(LagKernel::Bartlett, 1.0).unwrap();
    let mu = mean_g_b(k, &VariancePath::constant(1.0)).unwrap();
    let engine = LimitEngine::stationary(1, GridSpec::new(1000).unwrap()).unwrap();
    let f = Functional::with_form(k, LimitForm::Bartlett, 1000).unwrap();
    let draws: Vec<f64> = engine
        .g_draws(&f, 50_000, 2002)
        .iter()
        .map(|g| g[(0, 0)])
        .collect();
    let (m, se) = mean_se(&draws);
    let pass = (mu - 1.0 / 3.0).abs() <= 1e-6 && (m - 1.0 / 3.0).abs() <= 3.0 * se;
    report(
        "AC2",
        "mean of the Bartlett limit functional",
        pass,
        start.elapsed(),
        Duration::from_secs(120),
        &format!("quadrature {mu:.10}, MC mean {m:.5} ± {se:.5} (target 1/3)"),
    )
}

/// Stationary limit t with the bridge and `𝒢_BT` coded directly.
fn hard_coded_stationary_t(n: usize, seed: u64, index: u64) -> f64 {
    let mut rng = draw_rng(seed, index);
    let sd = 1.0 / (n as f64).sqrt();
    let w: Vec<f64> = (0..n)
        .scan(0.0, |acc, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            *acc += z * sd;
            Some(*acc)
        })
        .collect();
    let w1 = w[n - 1];
    let g: f64 = w
        .iter()
        .enumerate()
        .map(|(i, wi)| {
            let b = wi - (i + 1) as f64 / n as f64 * w1;
            b * b
        })
        .sum::<f64>()
        * 2.0
        / n as f64;
    w1 / g.sqrt()
}

fn ac3() -> bool {
    let start = Instant::now();
    let grid = GridSpec::new(1000).unwrap();
    let k = BandwidthedKernel::new(LagKernel::Bartlett, 1.0).unwrap();
    let f = Functional::new(k, 1000).unwrap();
    let r = DMatrix::from_element(1, 1, 1.0);
    let base = LimitEngine::new(
        &VariancePath::constant(1.0),
        &RegressorMomentPath::identity(1),
        grid,
    )
    .unwrap();
    let reference = base
        .statistic_draws(&f, &r, Statistic::T, 2000, 33)
        .unwrap();
    let mut identical = true;
    for (omega, q) in [(4.0, 1.0), (0.09, 2.5), (17.0, 0.3)] {
        let e = LimitEngine::new(
            &VariancePath::constant(omega),
            &RegressorMomentPath::constant(DMatrix::from_element(1, 1, q)).unwrap(),
            grid,
        )
        .unwrap();
        identical &= e.statistic_draws(&f, &r, Statistic::T, 2000, 33).unwrap() == reference;
    }
    let mut ours = base
        .statistic_draws(&f, &r, Statistic::T, 100_000, 303)
        .unwrap();
    let mut hard: Vec<f64> = (0..100_000u64)
        .map(|i| hard_coded_stationary_t(1000, 303, i))
        .collect();
    ours.sort_by(f64::total_cmp);
    hard.sort_by(f64::total_cmp);
    let (qa, qb) = (quantile_sorted(&ours, 0.975), quantile_sorted(&hard, 0.975));
    let rel = (qa - qb).abs() / qb;
    report(
        "AC3",
        "pivotality under stationarity",
        identical && rel <= 0.02,
        start.elapsed(),
        Duration::from_secs(300),
        &format!(
            "draw-identical across (Ω, Q): {identical}; 97.5% quantile {qa:.4} vs hard-coded {qb:.4} (rel {rel:.1e})"
        ),
    )
}

fn ac4() -> bool {
    let start = Instant::now();
    let grid = GridSpec::new(1000).unwrap();
    let k = BandwidthedKernel::new(LagKernel::Bartlett, 1.0).unwrap();
    let f = Functional::new(k, 1000).unwrap();
    let r = DMatrix::from_element(1, 1, 1.0);
    let q = RegressorMomentPath::identity(1);
    let quant = |sigma: &VariancePath, seed| {
        let e = LimitEngine::new(sigma, &q, grid).unwrap();
        let mut d: Vec<f64> = e
            .statistic_draws(&f, &r, Statistic::T, 100_000, seed)
            .unwrap()
            .iter()
            .map(|x| x.abs())
            .collect();
        d.sort_by(f64::total_cmp);
        quantile_with_se(&d, 0.975)
    };
    let (qs, ses) = quant(&VariancePath::constant(1.0), 404);
    let (qn, sen) = quant(&VariancePath::steps(&[0.5], &[1.0, 4.0]).unwrap(), 405);
    let joint = (ses * ses + sen * sen).sqrt();
    let gap = (qs - qn).abs() / joint;
    report(
        "AC4",
        "non-pivotality under a variance break",
        gap > 5.0,
        start.elapsed(),
        Duration::from_secs(300),
        &format!("97.5% |t| quantile {qs:.3} (stationary) vs {qn:.3} (Ω 1→4): {gap:.1} joint se"),
    )
}

fn ac5() -> bool {
    let start = Instant::now();
    let spec = DgpSpec::stationary_ar1(0.5, 1.0);
    let t = 5000;
    let mut est: Vec<f64> = (0..200u64)
        .map(|rep| {
            let fit = ols_fit(&simulate(&spec, t, 5_000_000 + rep).unwrap()).unwrap();
            hac_lrv(&fit, LagKernel::Bartlett, (t as f64).powf(-0.5))
                .unwrap()
                .scalar()
        })
        .collect();
    est.sort_by(f64::total_cmp);
    let median = quantile_sorted(&est, 0.5);
    let exp: ExperimentSpec = serde_json::from_value(serde_json::json!({
        "schema": 1,
        "dgp": spec,
        "T_list": [2000],
        "reps": 10000,
        "tests": [{ "name": "hac", "kind": "t_hac", "kernel": "bartlett", "bandwidth_exponent": 0.5, "cv_source": "standard" }],
        "level": 0.05,
        "seed": 55
    }))
    .unwrap();
    let table = run_size_experiment(&exp).unwrap();
    let row = table.find(2000, "hac", 0.0).unwrap();
    let pass = (median - 4.0).abs() <= 0.8 && (0.035..=0.065).contains(&row.rate);
    report(
        "AC5",
        "HAC consistency and size",
        pass,
        start.elapsed(),
        Duration::from_secs(600),
        &format!(
            "median Ω̂_HAC {median:.3} (target 4 ± 20%), size {:.4} ± {:.4} (band [0.035, 0.065])",
            row.rate, row.se
        ),
    )
}

fn ac6() -> bool {
    let start = Instant::now();
    let spec =
        ExperimentSpec::from_file(repo_root().join("specs/erp_variance_break.json")).unwrap();
    let (_, erp) = run_erp_study(&spec).unwrap();
    let series = |name: &str| erp.series(name);
    let joint = |a: f64, b: f64| (a * a + b * b).sqrt();
    let monotone = |s: &[&nsfixedb::harness::ErpPoint]| {
        s.windows(2)
            .all(|w| w[1].erp <= w[0].erp + 2.0 * joint(w[0].se, w[1].se))
    };
    let st = series("fixed-b-stationary");
    let pi = series("fixed-b-plug-in");
    let hac = series("hac");
    let a_level = st.iter().all(|p| p.erp > 0.02);
    let (first, last) = (st[0], st[st.len() - 1]);
    let a_flat =
        first.erp - last.erp <= 2.0 * joint(first.se, last.se) && last.erp >= 0.5 * first.erp;
    let b = monotone(&pi);
    let c = monotone(&hac);
    let fmt = |s: &[&nsfixedb::harness::ErpPoint]| {
        s.iter()
            .map(|p| format!("{}:{:.4}", p.t, p.rate))
            .collect::<Vec<_>>()
            .join(" ")
    };
    report(
        "AC6",
        "ERP orders on the 1→8 variance break",
        a_level && a_flat && b && c,
        start.elapsed(),
        Duration::from_secs(45 * 60),
        &format!(
            "stationary cv [{}] (>2pp: {a_level}, no decrease: {a_flat}); plug-in [{}] (decreasing: {b}); HAC [{}] (decreasing: {c})",
            fmt(&st),
            fmt(&pi),
            fmt(&hac)
        ),
    )
}

fn ac7() -> bool {
    let start = Instant::now();
    let bk = |k, b| BandwidthedKernel::new(k, b).unwrap();
    let step = |hi: f64| VariancePath::steps(&[0.5], &[1.0, hi]).unwrap();
    let combos = [
        (bk(LagKernel::Bartlett, 1.0), VariancePath::constant(1.0)),
        (bk(LagKernel::Bartlett, 0.5), step(4.0)),
        (bk(LagKernel::Parzen, 0.3), step(4.0)),
        (bk(LagKernel::Parzen, 1.0), step(8.0)),
        (
            bk(LagKernel::QuadraticSpectral, 0.5),
            VariancePath::constant(1.0),
        ),
        (bk(LagKernel::QuadraticSpectral, 0.2), step(0.25)),
    ];
    let mut bounds_ok = true;
    let mut worst_ratio = 0.0f64;
    for (k, omega) in &combos {
        let kappa = cumulants_asymptotic_nodes(*k, omega, CUMULANT_NODES).unwrap();
        bounds_ok &= kappa[0] >= 0.0;
        for m in [2usize, 3] {
            let ratio = kappa[m - 2].abs() / cumulant_bound(*k, omega, m);
            worst_ratio = worst_ratio.max(ratio);
            bounds_ok &= ratio <= 1.0;
        }
    }
    let k = bk(LagKernel::Bartlett, 1.0);
    let kappa2 =
        cumulants_asymptotic_nodes(k, &VariancePath::constant(1.0), CUMULANT_NODES).unwrap()[0];
    let engine = LimitEngine::stationary(1, GridSpec::new(1000).unwrap()).unwrap();
    let f = Functional::new(k, 1000).unwrap();
    let g: Vec<f64> = engine
        .g_draws(&f, 50_000, 7007)
        .iter()
        .map(|g| g[(0, 0)])
        .collect();
    let (v, vse) = var_se(&g);
    let mc_ok = (v - kappa2).abs() <= 3.0 * vse;
    let fm = finite_t_moments(&DgpSpec::stationary_ar1(0.0, 1.0), 500, k).unwrap();
    let mu_ok = (fm.mu_b_t - 1.0 / 3.0).abs() <= 0.02;
    report(
        "AC7",
        "cumulant machinery",
        bounds_ok && mc_ok && mu_ok,
        start.elapsed(),
        Duration::from_secs(300),
        &format!(
            "6 combos within bound (max |κ|/bound {worst_ratio:.3}); κ₂ {kappa2:.5} vs MC {v:.5} ± {vse:.5}; μ_1,T {:.4}",
            fm.mu_b_t
        ),
    )
}

fn ac8() -> bool {
    let start = Instant::now();
    let k = BandwidthedKernel::new(LagKernel::Bartlett, 0.1).unwrap();
    let omega = VariancePath::constant(1.0);
    // b = 0.1 lies above the enforced bound 1/16, so the criterion uses the unchecked series.
    let enforced = matches!(
        expansion_rejection_approx(k, &omega, 1.96, 3),
        Err(Error::BandwidthTooLarge { .. })
    );
    let approx = expansion_rejection_approx_unchecked(k, &omega, 1.96, 3).unwrap();
    let n = 500;
    let engine = LimitEngine::stationary(1, GridSpec::new(n).unwrap()).unwrap();
    let f = Functional::new(k, n).unwrap();
    let r = DMatrix::from_element(1, 1, 1.0);
    let draws = engine
        .statistic_draws(&f, &r, Statistic::T, 50_000, 8008)
        .unwrap();
    let mc = draws.iter().filter(|t| t.abs() <= 1.96).count() as f64 / draws.len() as f64;
    report(
        "AC8",
        "chi-square expansion at z = 1.96",
        enforced && (approx - mc).abs() <= 0.02,
        start.elapsed(),
        Duration::from_secs(180),
        &format!("series {approx:.4} vs MC {mc:.4} (tol 0.02); bound enforced by the checked variant: {enforced}"),
    )
}

fn run_cli(args: &[&str]) -> i32 {
    let mut argv = vec!["nsfixedb"];
    argv.extend_from_slice(args);
    cli_main(argv)
}

fn ac9() -> bool {
    let start = Instant::now();
    let root = repo_root();
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let mut mismatches = Vec::new();
    for threads in ["1", "3"] {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        let exp = root.join("specs/stationary_size.json");
        let ar1 = root.join("specs/ar1.json");
        let runs: Vec<(Vec<String>, PathBuf, &str)> = vec![
            (
                [
                    "--threads",
                    threads,
                    "--out",
                    d.join("exp").to_str().unwrap(),
                    "experiment",
                    "--spec",
                    exp.to_str().unwrap(),
                ]
                .map(String::from)
                .to_vec(),
                d.join("exp/rejections.csv"),
                "stationary_size_rejections.csv",
            ),
            (
                [
                    "--threads",
                    threads,
                    "--seed",
                    "2024",
                    "--grid-n",
                    "500",
                    "--out",
                    d.join("ld").to_str().unwrap(),
                    "limitdist",
                    "--kernel",
                    "bartlett",
                    "--b",
                    "1",
                    "--stationary",
                    "--draws",
                    "20000",
                ]
                .map(String::from)
                .to_vec(),
                d.join("ld/quantiles.csv"),
                "limitdist_bartlett_b1_quantiles.csv",
            ),
            (
                [
                    "--threads",
                    threads,
                    "--seed",
                    "7",
                    "--out",
                    d.join("sample.csv").to_str().unwrap(),
                    "simulate",
                    "--spec",
                    ar1.to_str().unwrap(),
                    "--T",
                    "200",
                ]
                .map(String::from)
                .to_vec(),
                d.join("sample.csv"),
                "ar1_T200_seed7.csv",
            ),
        ];
        for (args, produced, name) in runs {
            let refs: Vec<&str> = args.iter().map(String::as_str).collect();
            let code = run_cli(&refs);
            let same = code == 0
                && std::fs::read(&produced).ok() == std::fs::read(golden.join(name)).ok()
                && golden.join(name).exists();
            if !same {
                mismatches.push(format!("{name} (threads {threads}, exit {code})"));
            }
        }
    }
    report(
        "AC9",
        "CLI golden files",
        mismatches.is_empty(),
        start.elapsed(),
        Duration::from_secs(120),
        &if mismatches.is_empty() {
            "3 golden files byte-identical at 1 and 3 workers".to_string()
        } else {
            format!("mismatch: {}", mismatches.join(", "))
        },
    )
}

#[test]
fn acceptance() {
    let results = [
        ac1(),
        ac2(),
        ac3(),
        ac4(),
        ac5(),
        ac6(),
        ac7(),
        ac8(),
        ac9(),
    ];
    let passed = results.iter().filter(|r| **r).count();
    let line = format!("acceptance: {passed}/{} criteria passed\n", results.len());
    std::io::stdout().lock().write_all(line.as_bytes()).unwrap();
    assert_eq!(passed, results.len());
}
