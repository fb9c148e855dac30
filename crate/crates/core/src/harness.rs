//! Monte Carlo experiments and the command-line front end.
//!
//! Every replication is a pure function of `(spec, T, rep)`: its data seed and
//! plug-in seed are derived from the base seed, and results are aggregated in
//! replication order, so tables do not depend on the worker count.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dgp::{simulate, DgpSpec, Model, SamplePath};
use crate::error::{Error, Result};
use crate::estimators::{
    attach_regressor_moment, default_bandwidths, fixed_b_estimate, hac_lrv, local_lrv_curve,
    ols_fit, LocalLrvCurve, OlsFit,
};
use crate::har::{
    decide, f_stat_with_lrv, t_stat_with_lrv, CvSource, DecisionContext, DrawSetCache,
    HypothesisSpec, PlugInRequest, StatKind, TestResult,
};
use crate::kernels::{BandwidthedKernel, LagKernel, TimeKernel};
use crate::limitdist::{
    critical_values, plug_in_limit_distribution, stationary_draw_set, GridSpec, LimitDrawSet,
    LimitEngine, PathSource, Statistic,
};

pub const SCHEMA_VERSION: u32 = 1;

/// Seed for replication-level streams: ChaCha keyed by `base ⊕ a`, stream `b`.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base ^ a.rotate_left(32));
    rng.set_stream(b);
    rng.next_u64()
}

const STATIONARY_TAG: u64 = 0x5747_4154;
const PLUG_IN_TAG: u64 = 0x504c_5547;

/// Per-replication result: statistic, critical value, its MC se, and the decision.
type Outcome = (f64, f64, Option<f64>, bool);

/// One statistic/critical-value combination in an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub kind: StatKind,
    pub kernel: LagKernel,
    /// `b` for fixed-b statistics, `b_T` for HAC.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<f64>,
    /// HAC only: `b_T = T^{-e}`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bandwidth_exponent: Option<f64>,
    pub cv_source: CvSource,
}

impl TestConfig {
    pub fn label(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        let kind = match self.kind {
            StatKind::TFixedB => "t-fixed-b",
            StatKind::FFixedB => "f-fixed-b",
            StatKind::THac => "t-hac",
        };
        let bw = match (self.bandwidth, self.bandwidth_exponent) {
            (Some(b), _) => format!("b{b}"),
            (None, Some(e)) => format!("T^-{e}"),
            _ => String::new(),
        };
        let src = match self.cv_source {
            CvSource::Standard => "standard",
            CvSource::StationarySimulated => "stationary",
            CvSource::PlugInSimulated => "plug-in",
        };
        format!("{kind}/{}/{bw}/{src}", self.kernel)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(format!("test `{}`: {m}", self.label())));
        match self.kind {
            StatKind::THac => {
                if self.bandwidth.is_some() == self.bandwidth_exponent.is_some() {
                    return bad("HAC needs exactly one of bandwidth or bandwidth_exponent");
                }
                if self.cv_source != CvSource::Standard {
                    return bad("HAC statistics use standard critical values");
                }
            }
            StatKind::TFixedB | StatKind::FFixedB => {
                let b = match self.bandwidth {
                    Some(b) => b,
                    None => return bad("fixed-b needs a bandwidth"),
                };
                if self.bandwidth_exponent.is_some() {
                    return bad("bandwidth_exponent applies to HAC only");
                }
                BandwidthedKernel::new(self.kernel, b)?;
                if !self.kernel.psd() {
                    return Err(Error::NonPsdKernel(self.kernel.name()));
                }
            }
        }
        Ok(())
    }

    fn hac_bandwidth(&self, t_len: usize) -> f64 {
        match (self.bandwidth, self.bandwidth_exponent) {
            (Some(b), _) => b,
            (None, Some(e)) => (t_len as f64).powf(-e),
            _ => unreachable!("validated"),
        }
    }
}

fn default_n_u() -> usize {
    40
}
fn default_plug_in_draws() -> usize {
    2000
}
fn default_plug_in_grid() -> usize {
    200
}
fn default_lag_kernel() -> LagKernel {
    LagKernel::Bartlett
}
fn default_time_kernel() -> TimeKernel {
    TimeKernel::Quartic
}

/// Local-curve estimation and draw sizes for plug-in critical values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlugInSettings {
    /// Defaults to `1.5 T^{-1/5}`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h1: Option<f64>,
    /// Defaults to `T^{-1/6}`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h2: Option<f64>,
    #[serde(default = "default_lag_kernel")]
    pub lag_kernel: LagKernel,
    #[serde(default = "default_time_kernel")]
    pub time_kernel: TimeKernel,
    #[serde(default = "default_n_u")]
    pub n_u: usize,
    #[serde(default = "default_plug_in_draws")]
    pub draws: usize,
    #[serde(default = "default_plug_in_grid")]
    pub grid_n: usize,
}

impl Default for PlugInSettings {
    fn default() -> Self {
        Self {
            h1: None,
            h2: None,
            lag_kernel: default_lag_kernel(),
            time_kernel: default_time_kernel(),
            n_u: default_n_u(),
            draws: default_plug_in_draws(),
            grid_n: default_plug_in_grid(),
        }
    }
}

impl PlugInSettings {
    pub fn bandwidths(&self, t_len: usize) -> (f64, f64) {
        let (h1, h2) = default_bandwidths(t_len);
        (self.h1.unwrap_or(h1), self.h2.unwrap_or(h2))
    }

    /// Estimate `Σ̂(u)` (and `Q̂(u)` for regressions) from one sample.
    pub fn curve(
        &self,
        sample: &SamplePath,
        fit: &OlsFit,
        regression: bool,
    ) -> Result<LocalLrvCurve> {
        let (h1, h2) = self.bandwidths(sample.len());
        let mut curve = local_lrv_curve(fit, self.n_u, h1, h2, self.lag_kernel, self.time_kernel)?;
        if regression {
            attach_regressor_moment(&mut curve, sample, h2, self.time_kernel)?;
        }
        Ok(curve)
    }
}

fn default_level() -> f64 {
    0.05
}
fn default_grid_n() -> usize {
    1000
}
fn default_stationary_draws() -> usize {
    20_000
}
fn default_d_list() -> Vec<f64> {
    vec![0.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub schema: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub dgp: DgpSpec,
    #[serde(rename = "T_list")]
    pub t_list: Vec<usize>,
    pub reps: usize,
    /// Per-`T` replication counts overriding `reps`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reps_by_t: Option<Vec<usize>>,
    pub tests: Vec<TestConfig>,
    #[serde(default = "default_level")]
    pub level: f64,
    pub seed: u64,
    /// Grid for the stationary limit simulation.
    #[serde(default = "default_grid_n")]
    pub grid_n: usize,
    #[serde(default = "default_stationary_draws")]
    pub stationary_draws: usize,
    #[serde(default)]
    pub plug_in: PlugInSettings,
    #[serde(default = "default_d_list")]
    pub d_list: Vec<f64>,
}

impl ExperimentSpec {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let spec: ExperimentSpec = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.schema != SCHEMA_VERSION {
            return bad(format!(
                "schema {} unsupported (expected {SCHEMA_VERSION})",
                self.schema
            ));
        }
        self.dgp.validate()?;
        if self.t_list.is_empty() || self.t_list.windows(2).any(|w| w[1] <= w[0]) {
            return bad("T_list must be nonempty and strictly ascending".into());
        }
        let reps = self.reps_list();
        if reps.len() != self.t_list.len() {
            return bad("reps_by_t must match T_list in length".into());
        }
        if reps.iter().any(|r| *r < 100) {
            return bad("at least 100 replications per T".into());
        }
        if self.tests.is_empty() {
            return bad("no test configurations".into());
        }
        if !(self.level > 0.0 && self.level <= 1.0) {
            return bad(format!("level {} outside (0, 1]", self.level));
        }
        if self.d_list.is_empty() {
            return bad("d_list must be nonempty".into());
        }
        GridSpec::new(self.grid_n)?;
        GridSpec::new(self.plug_in.grid_n)?;
        for t in &self.tests {
            t.validate()?;
        }
        Ok(())
    }

    pub fn reps_list(&self) -> Vec<usize> {
        self.reps_by_t
            .clone()
            .unwrap_or_else(|| vec![self.reps; self.t_list.len()])
    }
}

/// Rejection frequency for one `(T, test, d)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionRow {
    #[serde(rename = "T")]
    pub t: usize,
    pub config: String,
    pub cv_source: CvSource,
    pub d: f64,
    pub reps: usize,
    pub successes: usize,
    pub failures: usize,
    pub rejections: usize,
    pub rate: f64,
    pub se: f64,
    pub mean_stat: f64,
    pub mean_cv: f64,
    /// Average Monte Carlo standard error of simulated critical values.
    pub mean_cv_se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RejectionTable {
    pub rows: Vec<RejectionRow>,
}

impl RejectionTable {
    pub fn find(&self, t: usize, config: &str, d: f64) -> Option<&RejectionRow> {
        self.rows
            .iter()
            .find(|r| r.t == t && r.config == config && r.d == d)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wr.serialize(r)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let rows = rd
            .deserialize()
            .collect::<std::result::Result<Vec<RejectionRow>, _>>()?;
        Ok(Self { rows })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErpPoint {
    #[serde(rename = "T")]
    pub t: usize,
    pub config: String,
    pub cv_source: CvSource,
    pub rate: f64,
    pub erp: f64,
    pub se: f64,
    /// Log-log slope of ERP against `T` for this configuration, when at
    /// least three sample sizes are available.
    pub slope: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ErpCurve {
    pub points: Vec<ErpPoint>,
}

impl ErpCurve {
    pub fn from_table(table: &RejectionTable, level: f64) -> Self {
        let mut configs: Vec<&str> = Vec::new();
        for r in &table.rows {
            if r.d == 0.0 && !configs.contains(&r.config.as_str()) {
                configs.push(&r.config);
            }
        }
        let mut points = Vec::new();
        for c in configs {
            let rows: Vec<&RejectionRow> = table
                .rows
                .iter()
                .filter(|r| r.config == c && r.d == 0.0)
                .collect();
            let erps: Vec<f64> = rows.iter().map(|r| (r.rate - level).abs()).collect();
            let slope = if rows.len() >= 3 && erps.iter().all(|e| *e > 0.0) {
                let xs: Vec<f64> = rows.iter().map(|r| (r.t as f64).ln()).collect();
                let ys: Vec<f64> = erps.iter().map(|e| e.ln()).collect();
                Some(ols_slope(&xs, &ys))
            } else {
                None
            };
            for (r, erp) in rows.iter().zip(erps) {
                points.push(ErpPoint {
                    t: r.t,
                    config: r.config.clone(),
                    cv_source: r.cv_source,
                    rate: r.rate,
                    erp,
                    se: r.se,
                    slope,
                });
            }
        }
        Self { points }
    }

    pub fn series(&self, config: &str) -> Vec<&ErpPoint> {
        self.points.iter().filter(|p| p.config == config).collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for p in &self.points {
            wr.serialize(p)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let points = rd
            .deserialize()
            .collect::<std::result::Result<Vec<ErpPoint>, _>>()?;
        Ok(Self { points })
    }
}

fn ols_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// `(stat, cv, cv_se, reject)` per `d`, or a failure for the whole configuration.
type ConfigOutcome = std::result::Result<Vec<Outcome>, String>;

struct Runner<'a> {
    spec: &'a ExperimentSpec,
    dgp: DgpSpec,
    coef: usize,
    null_value: f64,
    stationary: Vec<Option<Arc<LimitDrawSet>>>,
}

impl<'a> Runner<'a> {
    fn new(spec: &'a ExperimentSpec) -> Result<Self> {
        spec.validate()?;
        let mut dgp = spec.dgp.clone();
        dgp.d = 0.0;
        let coef = dgp.p() - 1;
        let null_value = dgp.beta0()[coef];
        let cache = DrawSetCache::new();
        let grid = GridSpec::new(spec.grid_n)?;
        let seed = derive_seed(spec.seed, STATIONARY_TAG, 0);
        let stationary = spec
            .tests
            .iter()
            .map(|t| match t.cv_source {
                CvSource::StationarySimulated => {
                    let b = t.bandwidth.expect("validated");
                    let stat = t.kind.limit_statistic();
                    let key = format!(
                        "{}|{b}|{stat:?}|{}|{}",
                        t.kernel, spec.grid_n, spec.stationary_draws
                    );
                    cache
                        .get_or_build(&key, || {
                            stationary_draw_set(
                                BandwidthedKernel::new(t.kernel, b)?,
                                1,
                                stat,
                                grid,
                                spec.stationary_draws,
                                seed,
                            )
                        })
                        .map(Some)
                }
                _ => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec,
            dgp,
            coef,
            null_value,
            stationary,
        })
    }

    fn hypothesis(&self, p: usize) -> HypothesisSpec {
        HypothesisSpec::single(p, self.coef, self.null_value).expect("coefficient in range")
    }

    fn replicate(&self, t_len: usize, rep: usize) -> Vec<ConfigOutcome> {
        let seed = derive_seed(self.spec.seed, t_len as u64, rep as u64);
        let fail_all = |e: Error| vec![Err(e.to_string()); self.spec.tests.len()];
        let sample = match simulate(&self.dgp, t_len, seed) {
            Ok(s) => s,
            Err(e) => return fail_all(e),
        };
        let fit = match ols_fit(&sample) {
            Ok(f) => f,
            Err(e) => return fail_all(e),
        };
        let hyp = self.hypothesis(fit.p());
        let needs_curve = self
            .spec
            .tests
            .iter()
            .any(|t| t.cv_source == CvSource::PlugInSimulated);
        let curve = needs_curve.then(|| {
            self.spec
                .plug_in
                .curve(&sample, &fit, self.dgp.model == Model::Regression)
        });
        let plug_seed = derive_seed(seed, PLUG_IN_TAG, 0);
        self.spec
            .tests
            .iter()
            .enumerate()
            .map(|(i, cfg)| {
                self.run_config(cfg, i, &fit, &hyp, curve.as_ref(), plug_seed)
                    .map_err(|e| e.to_string())
            })
            .collect()
    }

    fn run_config(
        &self,
        cfg: &TestConfig,
        index: usize,
        fit: &OlsFit,
        hyp: &HypothesisSpec,
        curve: Option<&Result<LocalLrvCurve>>,
        plug_seed: u64,
    ) -> Result<Vec<Outcome>> {
        let t_len = fit.len();
        let omega = match cfg.kind {
            StatKind::THac => hac_lrv(fit, cfg.kernel, cfg.hac_bandwidth(t_len))?.value,
            _ => fixed_b_estimate(fit, cfg.kernel, cfg.bandwidth.expect("validated"))?.value,
        };
        let built;
        let draws: Option<&LimitDrawSet> = match cfg.cv_source {
            CvSource::Standard => None,
            CvSource::StationarySimulated => self.stationary[index].as_deref(),
            CvSource::PlugInSimulated => {
                let curve = match curve.expect("curve requested") {
                    Ok(c) => c,
                    Err(e) => return Err(Error::InvalidArgument(format!("plug-in curve: {e}"))),
                };
                let kernel = BandwidthedKernel::new(cfg.kernel, cfg.bandwidth.expect("validated"))?;
                built = plug_in_limit_distribution(
                    curve,
                    kernel,
                    &hyp.r_mat,
                    cfg.kind.limit_statistic(),
                    GridSpec::new(self.spec.plug_in.grid_n)?,
                    self.spec.plug_in.draws,
                    plug_seed,
                )?;
                Some(&built)
            }
        };
        let ctx = DecisionContext {
            draws,
            plug_in: None,
            q: Some(1),
        };
        let root_t = (t_len as f64).sqrt();
        let mut out = Vec::with_capacity(self.spec.d_list.len());
        for &d in &self.spec.d_list {
            let mut shifted = fit.clone();
            shifted.beta_hat[self.coef] += d / root_t;
            let stat = match cfg.kind {
                StatKind::FFixedB => f_stat_with_lrv(&shifted, hyp, &omega)?,
                _ => t_stat_with_lrv(&shifted, hyp, &omega)?,
            };
            let r = decide(stat, cfg.kind, cfg.cv_source, self.spec.level, &ctx)?;
            out.push((r.stat, r.cv, r.cv_se, r.reject));
        }
        Ok(out)
    }

    fn run(&self) -> Result<RejectionTable> {
        let mut rows = Vec::new();
        for (&t_len, &reps) in self.spec.t_list.iter().zip(&self.spec.reps_list()) {
            let outcomes: Vec<Vec<ConfigOutcome>> = (0..reps)
                .into_par_iter()
                .map(|rep| self.replicate(t_len, rep))
                .collect();
            for (ci, cfg) in self.spec.tests.iter().enumerate() {
                let failures = outcomes.iter().filter(|o| o[ci].is_err()).count();
                if failures * 100 > reps {
                    let first = outcomes
                        .iter()
                        .find_map(|o| o[ci].as_ref().err())
                        .cloned()
                        .unwrap_or_default();
                    log::error!("{}: T = {t_len}: first failure: {first}", cfg.label());
                    return Err(Error::TooManyFailures { failures, reps });
                }
                for (di, &d) in self.spec.d_list.iter().enumerate() {
                    let ok: Vec<&Outcome> = outcomes
                        .iter()
                        .filter_map(|o| o[ci].as_ref().ok().map(|v| &v[di]))
                        .collect();
                    let n = ok.len();
                    let rejections = ok.iter().filter(|x| x.3).count();
                    let rate = rejections as f64 / n as f64;
                    let mean = |f: &dyn Fn(&Outcome) -> f64| {
                        ok.iter().map(|x| f(x)).sum::<f64>() / n as f64
                    };
                    let mean_cv_se = (cfg.cv_source != CvSource::Standard)
                        .then(|| mean(&|x| x.2.unwrap_or(0.0)));
                    rows.push(RejectionRow {
                        t: t_len,
                        config: cfg.label(),
                        cv_source: cfg.cv_source,
                        d,
                        reps,
                        successes: n,
                        failures,
                        rejections,
                        rate,
                        se: (rate * (1.0 - rate) / n as f64).sqrt(),
                        mean_stat: mean(&|x| x.0),
                        mean_cv: mean(&|x| x.1),
                        mean_cv_se,
                    });
                }
            }
        }
        Ok(RejectionTable { rows })
    }
}

/// Null rejection rates. `d_list` must be `[0]`.
pub fn run_size_experiment(spec: &ExperimentSpec) -> Result<RejectionTable> {
    if spec.d_list.iter().any(|d| *d != 0.0) {
        return Err(Error::InvalidSpec(
            "size experiments take d = 0 only".into(),
        ));
    }
    Runner::new(spec)?.run()
}

/// Rejection rates under local alternatives `β = β₀ + d/√T`; all `d` share
/// the same data and critical values within a replication.
pub fn run_power_experiment(spec: &ExperimentSpec) -> Result<RejectionTable> {
    Runner::new(spec)?.run()
}

/// `|rate − level|` per sample size, with log-log slopes.
pub fn run_erp_study(spec: &ExperimentSpec) -> Result<(RejectionTable, ErpCurve)> {
    if spec.t_list.len() < 3 {
        return Err(Error::InvalidSpec(
            "an ERP study needs at least three sample sizes".into(),
        ));
    }
    let mut size_spec = spec.clone();
    size_spec.d_list = vec![0.0];
    let table = run_size_experiment(&size_spec)?;
    let curve = ErpCurve::from_table(&table, spec.level);
    Ok((table, curve))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetadata {
    pub name: Option<String>,
    pub version: String,
    pub git_describe: String,
    pub seed: u64,
    pub threads: usize,
    pub wall_seconds: f64,
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

// ---------------------------------------------------------------- CLI

#[derive(Debug, Parser)]
#[command(
    name = "nsfixedb",
    version,
    about = "HAR inference with fixed-b and plug-in critical values under nonstationarity"
)]
struct Cli {
    /// Base random seed.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Grid size for limit simulations.
    #[arg(long = "grid-n", global = true, default_value_t = 1000)]
    grid_n: usize,
    /// Output file, or directory for multi-file commands.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a sample from a DGP spec and write it as CSV.
    Simulate(SimulateArgs),
    /// Long-run variance estimates or a local LRV curve from sample CSV.
    Estimate(EstimateArgs),
    /// Simulate a limit distribution and print its quantile table.
    Limitdist(LimitdistArgs),
    /// Test a single coefficient restriction on sample CSV.
    Test(TestArgs),
    /// Run a Monte Carlo experiment from an experiment spec.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long = "T")]
    t: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EstimateKind {
    Hac,
    FixedB,
    Local,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "fixed-b")]
    kind: EstimateKind,
    #[arg(long, default_value = "bartlett")]
    kernel: LagKernel,
    /// `b` (fixed-b) or `b_T` (HAC; defaults to `T^{-1/2}`).
    #[arg(long)]
    bandwidth: Option<f64>,
    #[arg(long)]
    h1: Option<f64>,
    #[arg(long)]
    h2: Option<f64>,
    #[arg(long = "time-kernel", default_value = "quartic")]
    time_kernel: TimeKernel,
    #[arg(long = "n-u", default_value_t = 40)]
    n_u: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StatArg {
    T,
    F,
}

#[derive(Debug, Args)]
struct LimitdistArgs {
    #[arg(long)]
    kernel: LagKernel,
    #[arg(long)]
    b: f64,
    /// Constant nuisance paths.
    #[arg(long, conflicts_with_all = ["curve", "spec"])]
    stationary: bool,
    /// Estimated curve CSV (plug-in).
    #[arg(long, conflicts_with = "spec")]
    curve: Option<PathBuf>,
    /// DGP spec whose true paths are used.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "t")]
    statistic: StatArg,
    #[arg(long, default_value_t = 10_000)]
    draws: usize,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.9, 0.95, 0.975, 0.99])]
    levels: Vec<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TestKindArg {
    TFixedB,
    FFixedB,
    THac,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CvArg {
    Standard,
    Stationary,
    PlugIn,
}

#[derive(Debug, Args)]
struct TestArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "t-fixed-b")]
    kind: TestKindArg,
    #[arg(long, default_value = "bartlett")]
    kernel: LagKernel,
    /// `b` (fixed-b, default 1) or `b_T` (HAC, default `T^{-1/2}`).
    #[arg(long)]
    bandwidth: Option<f64>,
    /// Coefficient index (0-based); defaults to the last.
    #[arg(long)]
    coef: Option<usize>,
    /// Hypothesized value.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    value: f64,
    #[arg(long, default_value_t = 0.05)]
    level: f64,
    #[arg(long = "cv-source", value_enum, default_value = "stationary")]
    cv_source: CvArg,
    #[arg(long, default_value_t = 10_000)]
    draws: usize,
    /// Curve CSV for plug-in critical values; estimated from the data when absent.
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    #[arg(long)]
    spec: PathBuf,
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => {
            let mut so = std::io::stdout().lock();
            so.write_all(text.as_bytes())?;
            so.flush()?;
        }
    }
    Ok(())
}

fn out_dir(out: &Option<PathBuf>) -> Result<&Path> {
    let dir = out
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("--out <DIR> is required for this command".into()))?;
    std::fs::create_dir_all(dir)?;
    Ok(dir)
}

fn quantile_table_csv(set: &LimitDrawSet, levels: &[f64]) -> Result<String> {
    let rows = critical_values(set, levels)?;
    let mut wr = csv::Writer::from_writer(Vec::new());
    for r in rows {
        wr.serialize(r)?;
    }
    Ok(String::from_utf8(wr.into_inner().map_err(|e| Error::Io(e.into_error()))?).expect("utf8"))
}

fn cmd_simulate(cli: &Cli, a: &SimulateArgs) -> Result<()> {
    let spec = DgpSpec::from_file(&a.spec)?;
    let sample = simulate(&spec, a.t, cli.seed)?;
    let mut buf = Vec::new();
    sample.write_csv(&mut buf)?;
    emit(&cli.out, &String::from_utf8(buf).expect("utf8"))
}

fn cmd_estimate(cli: &Cli, a: &EstimateArgs) -> Result<()> {
    let sample = SamplePath::from_csv_file(&a.data)?;
    let fit = ols_fit(&sample)?;
    let t_len = fit.len();
    match a.kind {
        EstimateKind::Hac => {
            let b = a.bandwidth.unwrap_or((t_len as f64).powf(-0.5));
            emit(&cli.out, &(hac_lrv(&fit, a.kernel, b)?.to_json() + "\n"))
        }
        EstimateKind::FixedB => {
            let b = a.bandwidth.unwrap_or(1.0);
            emit(
                &cli.out,
                &(fixed_b_estimate(&fit, a.kernel, b)?.to_json() + "\n"),
            )
        }
        EstimateKind::Local => {
            let settings = PlugInSettings {
                h1: a.h1,
                h2: a.h2,
                lag_kernel: a.kernel,
                time_kernel: a.time_kernel,
                n_u: a.n_u,
                ..Default::default()
            };
            let (h1, h2) = settings.bandwidths(t_len);
            let curve = settings.curve(&sample, &fit, sample.p() > 1)?;
            let mut buf = Vec::new();
            curve.write_csv(&mut buf)?;
            emit(&cli.out, &String::from_utf8(buf).expect("utf8"))?;
            if cli.out.is_some() {
                let summary = serde_json::json!({
                    "T": t_len, "n_u": a.n_u, "h1": h1, "h2": h2,
                    "lag_kernel": a.kernel, "time_kernel": a.time_kernel,
                });
                println!("{summary}");
            }
            Ok(())
        }
    }
}

fn cmd_limitdist(cli: &Cli, a: &LimitdistArgs) -> Result<()> {
    let grid = GridSpec::new(cli.grid_n)?;
    let kernel = BandwidthedKernel::new(a.kernel, a.b)?;
    let statistic = match a.statistic {
        StatArg::T => Statistic::T,
        StatArg::F => Statistic::F,
    };
    let set = if let Some(path) = &a.curve {
        let curve = LocalLrvCurve::from_csv_file(path)?;
        let p = curve.p();
        let mut r = DMatrix::zeros(1, p);
        r[(0, p - 1)] = 1.0;
        plug_in_limit_distribution(&curve, kernel, &r, statistic, grid, a.draws, cli.seed)?
    } else if let Some(path) = &a.spec {
        let spec = DgpSpec::from_file(path)?;
        let engine = LimitEngine::new(&spec.variance_path(), &spec.regressor_moment_path(), grid)?;
        let p = spec.p();
        let mut r = DMatrix::zeros(1, p);
        r[(0, p - 1)] = 1.0;
        LimitDrawSet::simulate(
            &engine,
            kernel,
            &r,
            statistic,
            a.draws,
            cli.seed,
            PathSource::Oracle,
            PathSource::Oracle,
        )?
    } else if a.stationary {
        stationary_draw_set(kernel, 1, statistic, grid, a.draws, cli.seed)?
    } else {
        return Err(Error::InvalidArgument(
            "one of --stationary, --curve or --spec is required".into(),
        ));
    };
    let table = quantile_table_csv(&set, &a.levels)?;
    if let Some(dir) = &cli.out {
        std::fs::create_dir_all(dir)?;
        set.save(dir, "draws")?;
        std::fs::write(dir.join("quantiles.csv"), &table)?;
    }
    emit(&None, &table)
}

fn cmd_test(cli: &Cli, a: &TestArgs) -> Result<()> {
    let sample = SamplePath::from_csv_file(&a.data)?;
    let fit = ols_fit(&sample)?;
    let p = fit.p();
    let hyp = HypothesisSpec::single(p, a.coef.unwrap_or(p - 1), a.value)?;
    let t_len = fit.len();
    let kind = match a.kind {
        TestKindArg::TFixedB => StatKind::TFixedB,
        TestKindArg::FFixedB => StatKind::FFixedB,
        TestKindArg::THac => StatKind::THac,
    };
    let omega = match kind {
        StatKind::THac => {
            hac_lrv(
                &fit,
                a.kernel,
                a.bandwidth.unwrap_or((t_len as f64).powf(-0.5)),
            )?
            .value
        }
        _ => fixed_b_estimate(&fit, a.kernel, a.bandwidth.unwrap_or(1.0))?.value,
    };
    let stat = match kind {
        StatKind::FFixedB => f_stat_with_lrv(&fit, &hyp, &omega)?,
        _ => t_stat_with_lrv(&fit, &hyp, &omega)?,
    };
    let grid = GridSpec::new(cli.grid_n)?;
    let cv_source = match a.cv_source {
        CvArg::Standard => CvSource::Standard,
        CvArg::Stationary => CvSource::StationarySimulated,
        CvArg::PlugIn => CvSource::PlugInSimulated,
    };
    let result: TestResult = match cv_source {
        CvSource::Standard => decide(
            stat,
            kind,
            cv_source,
            a.level,
            &DecisionContext {
                q: Some(1),
                ..Default::default()
            },
        )?,
        CvSource::StationarySimulated => {
            let kernel = BandwidthedKernel::new(a.kernel, a.bandwidth.unwrap_or(1.0))?;
            let set =
                stationary_draw_set(kernel, 1, kind.limit_statistic(), grid, a.draws, cli.seed)?;
            decide(
                stat,
                kind,
                cv_source,
                a.level,
                &DecisionContext {
                    draws: Some(&set),
                    ..Default::default()
                },
            )?
        }
        CvSource::PlugInSimulated => {
            let curve = match &a.curve {
                Some(path) => LocalLrvCurve::from_csv_file(path)?,
                None => PlugInSettings::default().curve(&sample, &fit, p > 1)?,
            };
            let kernel = BandwidthedKernel::new(a.kernel, a.bandwidth.unwrap_or(1.0))?;
            let req = PlugInRequest {
                curve: &curve,
                kernel,
                r_mat: &hyp.r_mat,
                grid,
                draws: a.draws,
                seed: cli.seed,
            };
            decide(
                stat,
                kind,
                cv_source,
                a.level,
                &DecisionContext {
                    plug_in: Some(req),
                    ..Default::default()
                },
            )?
        }
    };
    emit(&cli.out, &(result.to_json() + "\n"))
}

fn cmd_experiment(cli: &Cli, a: &ExperimentArgs) -> Result<()> {
    let spec = ExperimentSpec::from_file(&a.spec)?;
    let dir = out_dir(&cli.out)?;
    let start = Instant::now();
    let (table, erp) = if spec.t_list.len() >= 3 && spec.d_list == [0.0] {
        let (t, e) = run_erp_study(&spec)?;
        (t, Some(e))
    } else {
        (run_power_experiment(&spec)?, None)
    };
    table.write_csv(std::fs::File::create(dir.join("rejections.csv"))?)?;
    if let Some(e) = &erp {
        e.write_csv(std::fs::File::create(dir.join("erp.csv"))?)?;
    }
    let meta = RunMetadata {
        name: spec.name.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        git_describe: git_describe(),
        seed: spec.seed,
        threads: rayon::current_num_threads(),
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    std::fs::write(
        dir.join("metadata.json"),
        serde_json::to_string_pretty(&meta)? + "\n",
    )?;
    let mut buf = Vec::new();
    table.write_csv(&mut buf)?;
    emit(&None, &String::from_utf8(buf).expect("utf8"))
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(cli, a),
        Command::Estimate(a) => cmd_estimate(cli, a),
        Command::Limitdist(a) => cmd_limitdist(cli, a),
        Command::Test(a) => cmd_test(cli, a),
        Command::Experiment(a) => cmd_experiment(cli, a),
    }
}

/// Run the CLI on `argv` (program name first) and return the exit code:
/// 0 success, 1 usage, 2 data error, 3 numerical error. Errors go to stderr
/// as one line of JSON.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!(
                "{}",
                serde_json::json!({"error": "ThreadPool", "message": e.to_string()})
            );
            return 2;
        }
    };
    match pool.install(|| dispatch(&cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!(
                "{}",
                serde_json::json!({"error": e.kind(), "message": e.to_string()})
            );
            e.exit_code()
        }
    }
}

/// Hypothesis `β_last = value` for a `p`-coefficient model.
pub fn last_coefficient_hypothesis(p: usize, value: f64) -> Result<HypothesisSpec> {
    HypothesisSpec::new(
        DMatrix::from_fn(1, p, |_, j| if j == p - 1 { 1.0 } else { 0.0 }),
        DVector::from_element(1, value),
    )
}
