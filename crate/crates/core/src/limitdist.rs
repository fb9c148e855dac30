//! Fixed-b limit distributions under nonstationarity.
//!
//! The limit of `T^{-1/2} S_{⌊Tr⌋}` is the weighted Wiener process
//! `X(r) = ∫₀^r Σ(u) dW(u)`, simulated on a uniform grid with left-endpoint
//! (Itô) increments. Its regression bridge
//! `H(r) = X(r) − (∫₀^r Q) Q̄⁻¹ X(1)` feeds three functionals:
//!
//! * `𝒢 = −∫∫ K_b''(r − s) H(r) H(s)′ dr ds` for twice differentiable kernels,
//! * `𝒢_BT = 2 ∫ H(r) H(r)′ dr` for Bartlett at `b = 1`,
//! * `𝒢_b = ∫∫ K_b(r − s) dH(r) dH(s)′` for any positive semidefinite kernel.
//!
//! Limit t and F statistics are built from the numerator `R Q̄⁻¹ X(1)` and one
//! of these functionals, both taken from the same path. The module also holds
//! the analytic side: `μ_b = E 𝒢_b`, cumulants by tensor midpoint quadrature,
//! finite-sample cumulants via matrix traces, and the chi-square expansion of
//! `P(|t| ≤ z)`.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::function::erf::erf;

use crate::dgp::{DgpSpec, RegressorMomentPath, VariancePath};
use crate::error::{Error, Result};
use crate::estimators::LocalLrvCurve;
use crate::kernels::{BandwidthedKernel, DemeanedKernel, LagKernel};
use crate::quad;

/// Minimum draw count for quantile extraction.
pub const MIN_DRAWS: usize = 1000;

/// Nodes per dimension for cumulant quadrature; the result is checked against half as many.
pub const CUMULANT_NODES: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n: usize,
}

impl GridSpec {
    pub fn new(n: usize) -> Result<Self> {
        if n < 100 {
            return Err(Error::InvalidArgument(format!(
                "grid n = {n} must be at least 100"
            )));
        }
        Ok(Self { n })
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { n: 1000 }
    }
}

/// Generator for draw `index` of the stream family `seed`.
pub fn draw_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// `X(r_i)` for `r_i = i/n`, stored as a `p × (n+1)` matrix with `X(0) = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedWienerPath {
    pub values: DMatrix<f64>,
}

impl WeightedWienerPath {
    pub fn n(&self) -> usize {
        self.values.ncols() - 1
    }

    pub fn endpoint(&self) -> DVector<f64> {
        self.values.column(self.n()).into_owned()
    }
}

/// Which functional of the bridge represents the limit of the fixed-b estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LimitForm {
    /// `2 ∫ H H′` (Bartlett, `b = 1`).
    Bartlett,
    /// `−∫∫ K_b'' H H′`.
    SecondDerivative,
    /// `∫∫ K_b dH dH′`.
    Increments,
}

/// A limit functional with its kernel matrix precomputed for grid size `n`.
#[derive(Debug, Clone)]
pub struct Functional {
    pub kernel: BandwidthedKernel,
    pub form: LimitForm,
    n: usize,
    matrix: Option<DMatrix<f64>>,
}

impl Functional {
    /// Bartlett `b = 1` uses `𝒢_BT`, other Bartlett bandwidths use increments,
    /// and twice differentiable kernels use the second-derivative form.
    pub fn new(kernel: BandwidthedKernel, n: usize) -> Result<Self> {
        if !kernel.base.psd() {
            return Err(Error::NonPsdKernel(kernel.base.name()));
        }
        let form = match kernel.base {
            LagKernel::Bartlett if kernel.b == 1.0 => LimitForm::Bartlett,
            LagKernel::Bartlett => LimitForm::Increments,
            k if k.twice_differentiable() => LimitForm::SecondDerivative,
            k => return Err(Error::NonPsdKernel(k.name())),
        };
        Self::with_form(kernel, form, n)
    }

    pub fn with_form(kernel: BandwidthedKernel, form: LimitForm, n: usize) -> Result<Self> {
        let toeplitz = |f: &dyn Fn(f64) -> f64| {
            let row: Vec<f64> = (0..n).map(|d| f(d as f64 / n as f64)).collect();
            DMatrix::from_fn(n, n, |i, j| row[i.abs_diff(j)])
        };
        let matrix = match form {
            LimitForm::Bartlett => {
                if kernel.base != LagKernel::Bartlett || kernel.b != 1.0 {
                    return Err(Error::InvalidArgument(
                        "the Bartlett form needs the Bartlett kernel at b = 1".into(),
                    ));
                }
                None
            }
            LimitForm::SecondDerivative => {
                if !kernel.base.twice_differentiable() {
                    return Err(Error::UnsupportedKernel(kernel.base.name()));
                }
                Some(toeplitz(&|x| kernel.eval_dd(x).expect("checked above")))
            }
            LimitForm::Increments => {
                if !kernel.base.psd() {
                    return Err(Error::NonPsdKernel(kernel.base.name()));
                }
                Some(toeplitz(&|x| kernel.eval(x)))
            }
        };
        Ok(Self {
            kernel,
            form,
            n,
            matrix,
        })
    }

    /// Evaluate on a bridge path `h` (`p × (n+1)`).
    pub fn apply(&self, h: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.n;
        assert_eq!(h.ncols(), n + 1, "functional built for a different grid");
        let hm = h.columns(1, n);
        match self.form {
            LimitForm::Bartlett => hm * hm.transpose() * (2.0 / n as f64),
            LimitForm::SecondDerivative => {
                let k = self.matrix.as_ref().expect("matrix present");
                (hm * k) * hm.transpose() * (-1.0 / (n as f64 * n as f64))
            }
            LimitForm::Increments => {
                let k = self.matrix.as_ref().expect("matrix present");
                let dh = hm - h.columns(0, n);
                (&dh * k) * dh.transpose()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Statistic {
    T,
    F,
    /// The `(1,1)` entry of the limit functional itself.
    G,
}

/// Divide every cell by the largest entry of the first nonzero cell.
fn normalize(cells: Vec<DMatrix<f64>>) -> (Vec<DMatrix<f64>>, f64) {
    let scale = cells
        .iter()
        .map(|c| c.amax())
        .find(|a| *a > 0.0)
        .unwrap_or(1.0);
    let cells = cells.into_iter().map(|c| c / scale).collect();
    (cells, scale)
}

/// `M_i = (∫₀^{r_i} Q) Q̄⁻¹` from cell averages of `Q`, with `M_n = I`.
fn bridge_weights(q_cells: &[DMatrix<f64>]) -> Result<(Vec<DMatrix<f64>>, DMatrix<f64>)> {
    let n = q_cells.len();
    let p = q_cells[0].nrows();
    let mut cum = Vec::with_capacity(n + 1);
    let mut c = DMatrix::zeros(p, p);
    cum.push(c.clone());
    for q in q_cells {
        c += q / n as f64;
        cum.push(c.clone());
    }
    let q_bar = c;
    let q_bar_inv = q_bar
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidArgument("integrated regressor moment is singular".into()))?;
    let mut weights: Vec<DMatrix<f64>> = if p == 1 {
        cum.iter().map(|c| c / q_bar[(0, 0)]).collect()
    } else {
        cum.iter().map(|c| c * &q_bar_inv).collect()
    };
    weights[n] = DMatrix::identity(p, p);
    Ok((weights, q_bar_inv))
}

/// Simulation engine for one `(Σ, Q, n)` configuration.
///
/// `Σ` and `Q` cells are stored divided by scalar scales, which cancel in t
/// and F statistics; functionals are rescaled by `σ²` on output. Constant
/// paths therefore give bit-identical statistics whatever their level.
#[derive(Debug, Clone)]
pub struct LimitEngine {
    n: usize,
    p: usize,
    sigma_cells: Vec<DMatrix<f64>>,
    sigma_scale: f64,
    bridge: Vec<DMatrix<f64>>,
    q_bar_inv: DMatrix<f64>,
    source_hash: String,
}

impl LimitEngine {
    /// `Σ` at left endpoints `j/n`, `Q` averaged over cells.
    pub fn new(sigma: &VariancePath, q: &RegressorMomentPath, grid: GridSpec) -> Result<Self> {
        let n = grid.n;
        let sigma_cells = (0..n).map(|j| sigma.sigma(j as f64 / n as f64)).collect();
        let q_cells = (0..n)
            .map(|j| {
                q.path()
                    .cell_average(j as f64 / n as f64, (j + 1) as f64 / n as f64)
            })
            .collect();
        Self::from_cells(sigma_cells, q_cells, grid)
    }

    /// Engine with `Σ ≡ I_p`, `Q ≡ I_p`.
    pub fn stationary(p: usize, grid: GridSpec) -> Result<Self> {
        let id = DMatrix::identity(p, p);
        Self::from_cells(vec![id.clone(); grid.n], vec![id; grid.n], grid)
    }

    pub fn from_cells(
        sigma_cells: Vec<DMatrix<f64>>,
        q_cells: Vec<DMatrix<f64>>,
        grid: GridSpec,
    ) -> Result<Self> {
        let n = grid.n;
        if sigma_cells.len() != n || q_cells.len() != n {
            return Err(Error::InvalidArgument(format!(
                "expected {n} cells for Σ and Q"
            )));
        }
        let p = sigma_cells[0].nrows();
        if q_cells[0].nrows() != p {
            return Err(Error::InvalidArgument("Σ and Q dimensions differ".into()));
        }
        let (sigma_cells, sigma_scale) = normalize(sigma_cells);
        let (q_cells, _) = normalize(q_cells);
        let mut hasher = Sha256::new();
        hasher.update((n as u64).to_le_bytes());
        hasher.update((p as u64).to_le_bytes());
        hasher.update(sigma_scale.to_le_bytes());
        for c in sigma_cells.iter().chain(q_cells.iter()) {
            for v in c.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        let source_hash = hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        let (bridge, q_bar_inv) = bridge_weights(&q_cells)?;
        Ok(Self {
            n,
            p,
            sigma_cells,
            sigma_scale,
            bridge,
            q_bar_inv,
            source_hash,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// SHA-256 of the normalized cells, for cache keys.
    pub fn source_hash(&self) -> &str {
        &self.source_hash
    }

    pub fn is_degenerate(&self) -> bool {
        self.sigma_cells.iter().all(|c| c.amax() == 0.0)
    }

    /// `p × n` Gaussian increments with variance `1/n` for draw `index`.
    pub fn increments(&self, seed: u64, index: u64) -> DMatrix<f64> {
        let mut rng = draw_rng(seed, index);
        let sd = (self.n as f64).sqrt().recip();
        let mut dw = DMatrix::zeros(self.p, self.n);
        for j in 0..self.n {
            for a in 0..self.p {
                let z: f64 = StandardNormal.sample(&mut rng);
                dw[(a, j)] = z * sd;
            }
        }
        dw
    }

    /// Normalized `X` (without the `σ` scale) from increments.
    fn wiener_normalized(&self, dw: &DMatrix<f64>) -> DMatrix<f64> {
        let (n, p) = (self.n, self.p);
        let mut x = DMatrix::zeros(p, n + 1);
        if p == 1 {
            let mut acc = 0.0;
            for j in 0..n {
                acc += self.sigma_cells[j][(0, 0)] * dw[(0, j)];
                x[(0, j + 1)] = acc;
            }
        } else {
            for j in 0..n {
                let step = &self.sigma_cells[j] * dw.column(j);
                let next = x.column(j) + step;
                x.set_column(j + 1, &next);
            }
        }
        x
    }

    pub fn wiener_from_increments(&self, dw: &DMatrix<f64>) -> WeightedWienerPath {
        WeightedWienerPath {
            values: self.wiener_normalized(dw) * self.sigma_scale,
        }
    }

    /// `H(r_i) = X(r_i) − M_i X(1)`.
    pub fn bridge(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.n;
        let mut h = x.clone();
        if self.p == 1 {
            let x1 = x[(0, n)];
            for i in 0..=n {
                h[(0, i)] -= self.bridge[i][(0, 0)] * x1;
            }
        } else {
            let x1 = x.column(n).into_owned();
            for i in 0..=n {
                let adj = &self.bridge[i] * &x1;
                let col = h.column(i) - adj;
                h.set_column(i, &col);
            }
        }
        h
    }

    /// One functional draw (scaled back by `σ²`).
    pub fn g_draw(&self, functional: &Functional, seed: u64, index: u64) -> DMatrix<f64> {
        let x = self.wiener_normalized(&self.increments(seed, index));
        let h = self.bridge(&x);
        functional.apply(&h) * (self.sigma_scale * self.sigma_scale)
    }

    pub fn g_draws(&self, functional: &Functional, count: usize, seed: u64) -> Vec<DMatrix<f64>> {
        (0..count as u64)
            .into_par_iter()
            .map(|i| self.g_draw(functional, seed, i))
            .collect()
    }

    /// t or F statistic from given increments.
    pub fn statistic_from_increments(
        &self,
        functional: &Functional,
        r: &DMatrix<f64>,
        statistic: Statistic,
        dw: &DMatrix<f64>,
    ) -> Result<f64> {
        let x = self.wiener_normalized(dw);
        let h = self.bridge(&x);
        let g = functional.apply(&h);
        if statistic == Statistic::G {
            return Ok(g[(0, 0)] * self.sigma_scale * self.sigma_scale);
        }
        let rq = r * &self.q_bar_inv;
        let num = &rq * x.column(self.n);
        let mid = &rq * g * rq.transpose();
        limit_ratio(&num, &mid, statistic)
    }

    pub fn statistic_draw(
        &self,
        functional: &Functional,
        r: &DMatrix<f64>,
        statistic: Statistic,
        seed: u64,
        index: u64,
    ) -> Result<f64> {
        self.statistic_from_increments(functional, r, statistic, &self.increments(seed, index))
    }

    /// `count` independent draws; draw `i` depends only on `(seed, i)`.
    pub fn statistic_draws(
        &self,
        functional: &Functional,
        r: &DMatrix<f64>,
        statistic: Statistic,
        count: usize,
        seed: u64,
    ) -> Result<Vec<f64>> {
        check_restriction(r, self.p)?;
        (0..count as u64)
            .into_par_iter()
            .map(|i| self.statistic_draw(functional, r, statistic, seed, i))
            .collect()
    }
}

fn check_restriction(r: &DMatrix<f64>, p: usize) -> Result<()> {
    if r.ncols() != p || r.nrows() == 0 || r.nrows() > p {
        return Err(Error::InvalidArgument(format!(
            "restriction matrix is {}×{}, model has p = {p}",
            r.nrows(),
            r.ncols()
        )));
    }
    Ok(())
}

fn limit_ratio(num: &DVector<f64>, mid: &DMatrix<f64>, statistic: Statistic) -> Result<f64> {
    match statistic {
        Statistic::T => {
            let v = mid[(0, 0)];
            if !(v > 0.0) {
                return Err(Error::DegenerateVariance(v));
            }
            Ok(num[0] / v.sqrt())
        }
        Statistic::F => {
            let q = num.len();
            let chol = mid
                .clone()
                .cholesky()
                .ok_or(Error::SingularMiddleMatrix(f64::INFINITY))?;
            let sol = chol.solve(num);
            Ok(num.dot(&sol) / q as f64)
        }
        Statistic::G => unreachable!("handled by the caller"),
    }
}

fn single_engine(
    sigma: &VariancePath,
    q: &RegressorMomentPath,
    grid: GridSpec,
) -> Result<LimitEngine> {
    if sigma.dim() != q.dim() {
        return Err(Error::InvalidArgument(
            "Σ and Q paths have different dimensions".into(),
        ));
    }
    LimitEngine::new(sigma, q, grid)
}

pub fn simulate_weighted_wiener(
    sigma: &VariancePath,
    grid: GridSpec,
    seed: u64,
) -> Result<WeightedWienerPath> {
    let engine = single_engine(sigma, &RegressorMomentPath::identity(sigma.dim()), grid)?;
    Ok(engine.wiener_from_increments(&engine.increments(seed, 0)))
}

/// `r ↦ X(r) − (∫₀^r Q) Q̄⁻¹ X(1)` on the path's grid.
pub fn bridge_functional(
    path: &WeightedWienerPath,
    q: &RegressorMomentPath,
) -> Result<DMatrix<f64>> {
    let n = path.n();
    let q_cells: Vec<_> = (0..n)
        .map(|j| {
            q.path()
                .cell_average(j as f64 / n as f64, (j + 1) as f64 / n as f64)
        })
        .collect();
    let (q_cells, _) = normalize(q_cells);
    let (weights, _) = bridge_weights(&q_cells)?;
    let x1 = path.endpoint();
    let mut h = path.values.clone();
    for (i, m) in weights.iter().enumerate() {
        let col = h.column(i) - m * &x1;
        h.set_column(i, &col);
    }
    Ok(h)
}

/// One draw of `𝒢` (Theorem-1 form with `K''`, `b = 1`).
pub fn simulate_g_general(
    kernel: LagKernel,
    sigma: &VariancePath,
    q: &RegressorMomentPath,
    grid: GridSpec,
    seed: u64,
) -> Result<DMatrix<f64>> {
    let f = Functional::with_form(
        BandwidthedKernel::new(kernel, 1.0)?,
        LimitForm::SecondDerivative,
        grid.n,
    )?;
    Ok(single_engine(sigma, q, grid)?.g_draw(&f, seed, 0))
}

/// One draw of `𝒢_BT`.
pub fn simulate_g_bartlett(
    sigma: &VariancePath,
    q: &RegressorMomentPath,
    grid: GridSpec,
    seed: u64,
) -> Result<DMatrix<f64>> {
    let f = Functional::with_form(
        BandwidthedKernel::new(LagKernel::Bartlett, 1.0)?,
        LimitForm::Bartlett,
        grid.n,
    )?;
    Ok(single_engine(sigma, q, grid)?.g_draw(&f, seed, 0))
}

/// One draw of `𝒢_b` from bridge increments.
pub fn simulate_g_b(
    kernel: BandwidthedKernel,
    sigma: &VariancePath,
    q: &RegressorMomentPath,
    grid: GridSpec,
    seed: u64,
) -> Result<DMatrix<f64>> {
    let f = Functional::with_form(kernel, LimitForm::Increments, grid.n)?;
    Ok(single_engine(sigma, q, grid)?.g_draw(&f, seed, 0))
}

pub fn limit_t_draw(
    kernel: BandwidthedKernel,
    sigma: &VariancePath,
    q: &RegressorMomentPath,
    r: &DMatrix<f64>,
    grid: GridSpec,
    seed: u64,
) -> Result<f64> {
    if r.nrows() != 1 {
        return Err(Error::InvalidArgument(
            "t statistics take a single restriction".into(),
        ));
    }
    let engine = single_engine(sigma, q, grid)?;
    check_restriction(r, engine.p())?;
    engine.statistic_draw(&Functional::new(kernel, grid.n)?, r, Statistic::T, seed, 0)
}

pub fn limit_f_draw(
    kernel: BandwidthedKernel,
    sigma: &VariancePath,
    q: &RegressorMomentPath,
    r: &DMatrix<f64>,
    grid: GridSpec,
    seed: u64,
) -> Result<f64> {
    let engine = single_engine(sigma, q, grid)?;
    check_restriction(r, engine.p())?;
    engine.statistic_draw(&Functional::new(kernel, grid.n)?, r, Statistic::F, seed, 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathSource {
    Oracle,
    PlugIn,
    Stationary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawSetMeta {
    pub statistic: Statistic,
    pub kernel: LagKernel,
    pub b: f64,
    pub sigma_source: PathSource,
    pub q_source: PathSource,
    pub grid_n: usize,
    pub seed: u64,
    pub draws: usize,
    pub source_hash: String,
}

/// Monte Carlo draws of a limit statistic with provenance metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitDrawSet {
    pub draws: Vec<f64>,
    pub meta: DrawSetMeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantileRow {
    pub level: f64,
    pub value: f64,
    pub se: f64,
}

/// Type-7 quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Quantile and its Monte Carlo standard error from the binomial
/// confidence band of order statistics.
pub fn quantile_with_se(sorted: &[f64], p: f64) -> (f64, f64) {
    let n = sorted.len() as f64;
    let value = quantile_sorted(sorted, p);
    let z = 1.959_963_984_540_054;
    let half = z * (n * p * (1.0 - p)).sqrt();
    let idx = |x: f64| (x.round().max(0.0) as usize).min(sorted.len() - 1);
    let lo = idx(n * p - half - 1.0);
    let hi = idx(n * p + half - 1.0);
    (value, (sorted[hi] - sorted[lo]) / (2.0 * z))
}

fn sorted_copy(v: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut s: Vec<f64> = v.collect();
    s.sort_by(f64::total_cmp);
    s
}

impl LimitDrawSet {
    #[allow(clippy::too_many_arguments)]
    pub fn simulate(
        engine: &LimitEngine,
        kernel: BandwidthedKernel,
        r: &DMatrix<f64>,
        statistic: Statistic,
        count: usize,
        seed: u64,
        sigma_source: PathSource,
        q_source: PathSource,
    ) -> Result<Self> {
        let f = Functional::new(kernel, engine.n())?;
        let draws = engine.statistic_draws(&f, r, statistic, count, seed)?;
        Ok(Self {
            draws,
            meta: DrawSetMeta {
                statistic,
                kernel: kernel.base,
                b: kernel.b,
                sigma_source,
                q_source,
                grid_n: engine.n(),
                seed,
                draws: count,
                source_hash: engine.source_hash().to_string(),
            },
        })
    }

    /// Critical value for a test at `level`: the `1 − level` quantile of
    /// `|t|` draws, or of the draws themselves for F.
    pub fn critical_value(&self, level: f64) -> Result<(f64, f64)> {
        if self.draws.len() < MIN_DRAWS {
            return Err(Error::TooFewDraws {
                got: self.draws.len(),
                need: MIN_DRAWS,
            });
        }
        let sorted = match self.meta.statistic {
            Statistic::T => sorted_copy(self.draws.iter().map(|d| d.abs())),
            _ => sorted_copy(self.draws.iter().copied()),
        };
        Ok(quantile_with_se(&sorted, 1.0 - level))
    }

    /// `(#{draws ≥ stat} + 1) / (N + 1)`, on absolute values for t.
    pub fn p_value(&self, stat: f64) -> f64 {
        let count = match self.meta.statistic {
            Statistic::T => self.draws.iter().filter(|d| d.abs() >= stat.abs()).count(),
            _ => self.draws.iter().filter(|d| **d >= stat).count(),
        };
        (count + 1) as f64 / (self.draws.len() + 1) as f64
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["draw_index", "value"])?;
        for (i, d) in self.draws.iter().enumerate() {
            wr.write_record([i.to_string(), d.to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, meta: DrawSetMeta) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let mut draws = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let v = rec
                .get(1)
                .ok_or_else(|| Error::InvalidArgument("draw row missing value".into()))?;
            draws.push(
                v.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidArgument(format!("bad draw `{v}`: {e}")))?,
            );
        }
        Ok(Self { draws, meta })
    }

    /// Write `<stem>.csv` and the `<stem>.json` sidecar.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        self.write_csv(std::fs::File::create(dir.join(format!("{stem}.csv")))?)?;
        std::fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&self.meta)? + "\n",
        )?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>, stem: &str) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: DrawSetMeta =
            serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
        Self::read_csv(std::fs::File::open(dir.join(format!("{stem}.csv")))?, meta)
    }
}

/// Empirical quantiles of the raw draws at probabilities `levels`.
pub fn critical_values(drawset: &LimitDrawSet, levels: &[f64]) -> Result<Vec<QuantileRow>> {
    if drawset.draws.len() < MIN_DRAWS {
        return Err(Error::TooFewDraws {
            got: drawset.draws.len(),
            need: MIN_DRAWS,
        });
    }
    let sorted = sorted_copy(drawset.draws.iter().copied());
    Ok(levels
        .iter()
        .map(|&level| {
            let (value, se) = quantile_with_se(&sorted, level);
            QuantileRow { level, value, se }
        })
        .collect())
}

/// Stationary pivotal draws (`Σ ≡ I`, `Q ≡ I`) for a restriction on the
/// last of `p` coefficients.
pub fn stationary_draw_set(
    kernel: BandwidthedKernel,
    p: usize,
    statistic: Statistic,
    grid: GridSpec,
    count: usize,
    seed: u64,
) -> Result<LimitDrawSet> {
    let engine = LimitEngine::stationary(p, grid)?;
    let mut r = DMatrix::zeros(1, p);
    r[(0, p - 1)] = 1.0;
    LimitDrawSet::simulate(
        &engine,
        kernel,
        &r,
        statistic,
        count,
        seed,
        PathSource::Stationary,
        PathSource::Stationary,
    )
}

/// Engine built from estimated curves, step-interpolated onto the grid.
/// `Q̂ ≡ I` when the curve carries no regressor moment.
pub fn plug_in_engine(curve: &LocalLrvCurve, grid: GridSpec) -> Result<LimitEngine> {
    if curve.sigma.iter().all(|s| s.amax() == 0.0) {
        return Err(Error::DegenerateCurve);
    }
    let n = grid.n;
    let nu = curve.len();
    let midpoint = curve
        .grid
        .iter()
        .enumerate()
        .all(|(i, &g)| (g - (i as f64 + 0.5) / nu as f64).abs() < 1e-12);
    let index = |u: f64| {
        if midpoint {
            ((u * nu as f64).floor() as usize).min(nu - 1)
        } else {
            curve.cell(u)
        }
    };
    let p = curve.p();
    let mut sigma_cells = Vec::with_capacity(n);
    let mut q_cells = Vec::with_capacity(n);
    for j in 0..n {
        let i = index(j as f64 / n as f64);
        sigma_cells.push(curve.sigma[i].clone());
        q_cells.push(match &curve.q_hat {
            Some(q) => q[i].clone(),
            None => DMatrix::identity(p, p),
        });
    }
    LimitEngine::from_cells(sigma_cells, q_cells, grid)
}

/// Feasible critical-value generator: limit draws with `Σ̂(u)`, `Q̂(u)` in
/// place of the unknown paths.
pub fn plug_in_limit_distribution(
    curve: &LocalLrvCurve,
    kernel: BandwidthedKernel,
    r: &DMatrix<f64>,
    statistic: Statistic,
    grid: GridSpec,
    draws: usize,
    seed: u64,
) -> Result<LimitDrawSet> {
    let engine = plug_in_engine(curve, grid)?;
    let source = if curve.q_hat.is_some() {
        PathSource::PlugIn
    } else {
        PathSource::Stationary
    };
    LimitDrawSet::simulate(
        &engine,
        kernel,
        r,
        statistic,
        draws,
        seed,
        PathSource::PlugIn,
        source,
    )
}

fn require_scalar(omega: &VariancePath) -> Result<()> {
    if omega.dim() != 1 {
        return Err(Error::InvalidArgument(
            "moment computations need a scalar Ω path".into(),
        ));
    }
    Ok(())
}

/// `μ_b = ∫₀¹ K_b*(s, s) Ω(s) ds`.
pub fn mean_g_b(kernel: BandwidthedKernel, omega: &VariancePath) -> Result<f64> {
    require_scalar(omega)?;
    let dk = DemeanedKernel::new(kernel);
    let b = kernel.b;
    let mut breaks = omega.0.breaks();
    breaks.extend([0.5 * b, b, 1.0 - b, 1.0 - 0.5 * b]);
    Ok(quad::integrate_with_breaks(
        |s| dk.diagonal(s) * omega.omega(s)[(0, 0)],
        0.0,
        1.0,
        &breaks,
        1e-10,
    ))
}

/// Symmetric matrix `A = D^{1/2} K* D^{1/2} / N` on midpoint nodes, so that
/// `Tr(A^m)` is the `m`-dimensional tensor midpoint rule for
/// `∫…∫ Π Ω(τ_j) K*(τ_j, τ_{j+1})`.
fn demeaned_operator(
    kernel: BandwidthedKernel,
    omega: &VariancePath,
    nodes: usize,
) -> DMatrix<f64> {
    let dk = DemeanedKernel::new(kernel);
    let tau: Vec<f64> = (0..nodes)
        .map(|i| (i as f64 + 0.5) / nodes as f64)
        .collect();
    let rows: Vec<f64> = tau.par_iter().map(|&t| dk.row_integral(t)).collect();
    let root: Vec<f64> = tau
        .iter()
        .map(|&t| omega.omega(t)[(0, 0)].max(0.0).sqrt())
        .collect();
    DMatrix::from_fn(nodes, nodes, |i, j| {
        root[i] * root[j] * dk.eval_with_rows(tau[i], tau[j], rows[i], rows[j]) / nodes as f64
    })
}

/// `Tr(A^m)` for `m = 1..=4`.
fn traces(a: &DMatrix<f64>) -> [f64; 4] {
    let a2 = a * a;
    let t1 = a.trace();
    let t2 = a.component_mul(&a.transpose()).sum();
    let t3 = a2.component_mul(&a.transpose()).sum();
    let t4 = a2.component_mul(&a2.transpose()).sum();
    [t1, t2, t3, t4]
}

fn factorial(m: usize) -> f64 {
    (1..=m).map(|i| i as f64).product()
}

/// `κ_m = 2^{m−1}(m−1)! Ω^{−m} Tr(A^m)` for `m = 2..=4` on a given node count.
pub fn cumulants_asymptotic_nodes(
    kernel: BandwidthedKernel,
    omega: &VariancePath,
    nodes: usize,
) -> Result<[f64; 3]> {
    require_scalar(omega)?;
    let a = demeaned_operator(kernel, omega, nodes);
    let tr = traces(&a);
    let om = omega.integrated_scalar();
    let k =
        |m: usize| 2f64.powi(m as i32 - 1) * factorial(m - 1) * om.powi(-(m as i32)) * tr[m - 1];
    Ok([k(2), k(3), k(4)])
}

/// Cumulant `κ_m` (`m ∈ {2, 3, 4}`) of `Ω⁻¹ 𝒢_b`.
pub fn cumulants_asymptotic(
    kernel: BandwidthedKernel,
    omega: &VariancePath,
    m: usize,
) -> Result<f64> {
    if !(2..=4).contains(&m) {
        return Err(Error::InvalidArgument(format!(
            "cumulant order {m} outside 2..=4"
        )));
    }
    let fine = cumulants_asymptotic_nodes(kernel, omega, CUMULANT_NODES)?;
    let coarse = cumulants_asymptotic_nodes(kernel, omega, CUMULANT_NODES / 2)?;
    let (f, c) = (fine[m - 2], coarse[m - 2]);
    log::debug!(
        "kappa_{m}: {c} at {} nodes, {f} at {}",
        CUMULANT_NODES / 2,
        CUMULANT_NODES
    );
    Ok(f)
}

/// `C̄₁ = 4 ∫|K|`.
pub fn c1_bar(kernel: LagKernel) -> f64 {
    4.0 * kernel.abs_integral()
}

/// `2^m (m−1)! Ω^{−m} C_Ω^m (C̄₁ b)^{m−1}`.
pub fn cumulant_bound(kernel: BandwidthedKernel, omega: &VariancePath, m: usize) -> f64 {
    let om = omega.integrated()[(0, 0)];
    let c = omega.sup();
    2f64.powi(m as i32)
        * factorial(m - 1)
        * (c / om).powi(m as i32)
        * (c1_bar(kernel.base) * kernel.b).powi(m as i32 - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub mu_b: f64,
    pub omega_bar: f64,
    pub c_omega: f64,
    pub c1_bar: f64,
    /// `κ₂, κ₃, κ₄`.
    pub kappa: [f64; 3],
    pub kappa_coarse: [f64; 3],
    pub bounds: [f64; 3],
    /// `Ξ₂, Ξ₃, Ξ₄`.
    pub xi: [f64; 3],
}

pub fn moment_report(kernel: BandwidthedKernel, omega: &VariancePath) -> Result<MomentReport> {
    let kappa = cumulants_asymptotic_nodes(kernel, omega, CUMULANT_NODES)?;
    let kappa_coarse = cumulants_asymptotic_nodes(kernel, omega, CUMULANT_NODES / 2)?;
    let m = moments_from_cumulants(&[0.0, kappa[0], kappa[1], kappa[2]]);
    Ok(MomentReport {
        mu_b: mean_g_b(kernel, omega)?,
        omega_bar: omega.integrated_scalar(),
        c_omega: omega.sup(),
        c1_bar: c1_bar(kernel.base),
        kappa,
        kappa_coarse,
        bounds: [2, 3, 4].map(|m| cumulant_bound(kernel, omega, m)),
        xi: [m[1], m[2], m[3]],
    })
}

/// Moments `μ′_1..μ′_n` from cumulants `κ_1..κ_n` via
/// `μ′_n = Σ_{k=1}^{n} C(n−1, k−1) κ_k μ′_{n−k}`.
pub fn moments_from_cumulants(kappa: &[f64]) -> Vec<f64> {
    let n = kappa.len();
    let mut mom = vec![1.0];
    for order in 1..=n {
        let mut acc = 0.0;
        let mut binom = 1.0;
        for k in 1..=order {
            acc += binom * kappa[k - 1] * mom[order - k];
            binom = binom * (order - k) as f64 / k as f64;
        }
        mom.push(acc);
    }
    mom.remove(0);
    mom
}

/// Exact finite-sample moments of `ζ_{b,T} = Ω̂_b / Ω_T` in the location model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteTMoments {
    pub t: usize,
    pub omega_t: f64,
    pub mu_b_t: f64,
    /// `κ_{2,T}, κ_{3,T}, κ_{4,T}`.
    pub kappa: [f64; 3],
}

/// Largest `T` for the dense trace computation.
pub const FINITE_T_CAP: usize = 2000;

pub fn finite_t_moments(
    spec: &DgpSpec,
    t_len: usize,
    kernel: BandwidthedKernel,
) -> Result<FiniteTMoments> {
    if t_len > FINITE_T_CAP {
        return Err(Error::TooLarge {
            got: t_len,
            cap: FINITE_T_CAP,
        });
    }
    if spec.p() != 1 {
        return Err(Error::InvalidArgument(
            "finite-sample cumulants are implemented for the location model".into(),
        ));
    }
    let ups = spec.error_autocov_matrix(t_len)?;
    let tf = t_len as f64;
    let m = tf * kernel.b;
    let row: Vec<f64> = (0..t_len).map(|d| kernel.base.eval(d as f64 / m)).collect();
    let w = DMatrix::from_fn(t_len, t_len, |i, j| row[i.abs_diff(j)]);
    // A W A with A = I − l l′/T, using symmetry of W.
    let means: Vec<f64> = (0..t_len).map(|i| w.row(i).sum() / tf).collect();
    let grand = means.iter().sum::<f64>() / tf;
    let awa = DMatrix::from_fn(t_len, t_len, |i, j| w[(i, j)] - means[i] - means[j] + grand);
    let omega_t = ups.sum() / tf;
    let pm = &ups * &awa;
    let p2 = &pm * &pm;
    let tr = [
        pm.trace(),
        pm.component_mul(&pm.transpose()).sum(),
        p2.component_mul(&pm.transpose()).sum(),
        p2.component_mul(&p2.transpose()).sum(),
    ];
    let k = |mm: usize| {
        2f64.powi(mm as i32 - 1)
            * factorial(mm - 1)
            * (tf * omega_t).powi(-(mm as i32))
            * tr[mm - 1]
    };
    Ok(FiniteTMoments {
        t: t_len,
        omega_t,
        mu_b_t: tr[0] / (tf * omega_t),
        kappa: [k(2), k(3), k(4)],
    })
}

/// Centered finite-sample cumulant `κ_{m,T}` (`κ_{1,T} = 0`).
pub fn cumulants_finite_t(
    spec: &DgpSpec,
    t_len: usize,
    kernel: BandwidthedKernel,
    m: usize,
) -> Result<f64> {
    if !(1..=4).contains(&m) {
        return Err(Error::InvalidArgument(format!(
            "cumulant order {m} outside 1..=4"
        )));
    }
    let fm = finite_t_moments(spec, t_len, kernel)?;
    Ok(if m == 1 { 0.0 } else { fm.kappa[m - 2] })
}

/// `d^m/dx^m` of the chi-square(1) cdf; `m = 0` is the cdf itself.
pub fn chi2_1_cdf_derivative(order: usize, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if order == 0 {
        return erf((0.5 * x).sqrt());
    }
    // f^{(j)}(x) = e^{−x/2} / √(2π) · Σ_i c_i x^{−1/2 − i}
    let mut c = vec![1.0];
    for _ in 1..order {
        let mut next = vec![0.0; c.len() + 1];
        for (i, &ci) in c.iter().enumerate() {
            next[i] -= 0.5 * ci;
            next[i + 1] -= (0.5 + i as f64) * ci;
        }
        c = next;
    }
    let pref = (-0.5 * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    pref * c
        .iter()
        .enumerate()
        .map(|(i, ci)| ci * x.powf(-0.5 - i as f64))
        .sum::<f64>()
}

/// `b < 1 / (16 max(C_Ω, 1) ∫|K|)`.
pub fn expansion_bandwidth_bound(kernel: LagKernel, omega: &VariancePath) -> f64 {
    1.0 / (16.0 * omega.sup().max(1.0) * kernel.abs_integral())
}

/// `P(|t| ≤ z)` from the chi-square expansion, enforcing the bandwidth bound.
pub fn expansion_rejection_approx(
    kernel: BandwidthedKernel,
    omega: &VariancePath,
    z: f64,
    m_max: usize,
) -> Result<f64> {
    let bound = expansion_bandwidth_bound(kernel.base, omega);
    if !(kernel.b < bound) {
        return Err(Error::BandwidthTooLarge { b: kernel.b, bound });
    }
    expansion_rejection_approx_unchecked(kernel, omega, z, m_max)
}

/// [`expansion_rejection_approx`] without the bandwidth check.
pub fn expansion_rejection_approx_unchecked(
    kernel: BandwidthedKernel,
    omega: &VariancePath,
    z: f64,
    m_max: usize,
) -> Result<f64> {
    require_scalar(omega)?;
    if !(1..=4).contains(&m_max) {
        return Err(Error::InvalidArgument(format!(
            "m_max = {m_max} outside 1..=4"
        )));
    }
    if z <= 0.0 {
        return Ok(0.0);
    }
    let mu = mean_g_b(kernel, omega)? / omega.integrated_scalar();
    let kappa = cumulants_asymptotic_nodes(kernel, omega, CUMULANT_NODES)?;
    let xi = moments_from_cumulants(&[0.0, kappa[0], kappa[1], kappa[2]]);
    let x = mu * z * z;
    let mut total = chi2_1_cdf_derivative(0, x);
    for m in 2..=m_max {
        total += chi2_1_cdf_derivative(m, x) * xi[m - 1] * (z * z).powi(m as i32) / factorial(m);
    }
    Ok(total)
}
