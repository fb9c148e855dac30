//! OLS, sample autocovariances, HAC and fixed-b long-run variance estimators,
//! and the two-bandwidth local estimators of `Ω(u)`, `Σ(u)` and `Q(u)`.
//!
//! Local estimates smooth the lagged score products `V̂_s V̂′_{s−|k|}` over
//! rescaled time with a time kernel centered at `u`. Near the sample edges
//! part of the window falls outside `[1, T]`, so the weights are divided by
//! their in-sample total (boundary renormalization) instead of `T h₂`.

use std::io::{Read, Write};
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dgp::{psd_sqrt, SamplePath};
use crate::error::{Error, Result};
use crate::kernels::{LagKernel, TimeKernel};

/// Minimum number of observations with positive time-kernel weight.
pub const MIN_WINDOW: usize = 8;

#[derive(Debug, Clone)]
pub struct OlsFit {
    pub beta_hat: DVector<f64>,
    pub residuals: DVector<f64>,
    /// `T × p` score products `V̂_t = x_t ê_t`.
    pub v_hat: DMatrix<f64>,
    /// `T⁻¹ Σ x_t x_t′`.
    pub q_hat: DMatrix<f64>,
    /// `T × p` partial sums `Ŝ_t = Σ_{j≤t} V̂_j`.
    pub partial_sums: DMatrix<f64>,
}

impl OlsFit {
    pub fn len(&self) -> usize {
        self.residuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residuals.is_empty()
    }

    pub fn p(&self) -> usize {
        self.beta_hat.len()
    }
}

pub fn ols_fit(sample: &SamplePath) -> Result<OlsFit> {
    let x = &sample.x;
    let t_len = x.nrows();
    let p = x.ncols();
    let svd = x.clone().svd(true, true);
    let max_sv = svd.singular_values.max();
    let min_sv = svd.singular_values.min();
    if !(min_sv > 1e-10 * max_sv.max(f64::MIN_POSITIVE)) {
        return Err(Error::RankDeficient { min_sv });
    }
    let beta_hat = svd
        .solve(&sample.y, 0.0)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let residuals = &sample.y - x * &beta_hat;
    let mut v_hat = x.clone();
    for (mut row, e) in v_hat.row_iter_mut().zip(residuals.iter()) {
        row *= *e;
    }
    let q_hat = x.transpose() * x / t_len as f64;
    let mut partial_sums = DMatrix::zeros(t_len, p);
    let mut run = vec![0.0; p];
    for t in 0..t_len {
        for j in 0..p {
            run[j] += v_hat[(t, j)];
            partial_sums[(t, j)] = run[j];
        }
    }
    Ok(OlsFit {
        beta_hat,
        residuals,
        v_hat,
        q_hat,
        partial_sums,
    })
}

/// `Γ̂(k) = T⁻¹ Σ_{t=k+1}^{T} V̂_t V̂′_{t−k}`, and `Γ̂(−k) = Γ̂(k)′`.
pub fn sample_autocov(fit: &OlsFit, k: i64) -> Result<DMatrix<f64>> {
    let t_len = fit.len() as i64;
    if k.abs() > t_len - 1 {
        return Err(Error::OutOfRange {
            index: k,
            limit: t_len - 1,
        });
    }
    let g = autocov_unchecked(fit, k.unsigned_abs() as usize);
    Ok(if k < 0 { g.transpose() } else { g })
}

fn autocov_unchecked(fit: &OlsFit, k: usize) -> DMatrix<f64> {
    let t_len = fit.len();
    let n = t_len - k;
    fit.v_hat.rows(k, n).transpose() * fit.v_hat.rows(0, n) / t_len as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    Hac,
    FixedB,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrvEstimate {
    pub value: DMatrix<f64>,
    pub kind: EstimatorKind,
    pub kernel: LagKernel,
    /// `b_T` for HAC, `b` for fixed-b.
    pub bandwidth: f64,
}

#[derive(Serialize, Deserialize)]
struct LrvEstimateJson {
    kind: EstimatorKind,
    kernel: LagKernel,
    bandwidth: f64,
    value: Vec<Vec<f64>>,
}

impl LrvEstimate {
    pub fn scalar(&self) -> f64 {
        self.value[(0, 0)]
    }

    pub fn to_json(&self) -> String {
        let rows = (0..self.value.nrows())
            .map(|i| self.value.row(i).iter().copied().collect())
            .collect();
        serde_json::to_string(&LrvEstimateJson {
            kind: self.kind,
            kernel: self.kernel,
            bandwidth: self.bandwidth,
            value: rows,
        })
        .expect("estimate serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let j: LrvEstimateJson = serde_json::from_str(s)?;
        let p = j.value.len();
        let flat: Vec<f64> = j.value.into_iter().flatten().collect();
        if flat.len() != p * p {
            return Err(Error::InvalidArgument(
                "estimate value must be square".into(),
            ));
        }
        Ok(Self {
            value: DMatrix::from_row_slice(p, p, &flat),
            kind: j.kind,
            kernel: j.kernel,
            bandwidth: j.bandwidth,
        })
    }
}

/// `Σ_k w(k) Γ̂(k)` with `w(0) = 1`, stopping once `stop(k)` holds.
fn lag_weighted_sum(
    fit: &OlsFit,
    weight: impl Fn(usize) -> f64,
    stop: impl Fn(usize) -> bool,
) -> DMatrix<f64> {
    let mut acc = autocov_unchecked(fit, 0);
    for k in 1..fit.len() {
        if stop(k) {
            break;
        }
        let w = weight(k);
        if w == 0.0 {
            continue;
        }
        let g = autocov_unchecked(fit, k);
        acc += (&g + g.transpose()) * w;
    }
    acc
}

/// `Σ_{|k|<T} K(b_T k) Γ̂(k)`.
pub fn hac_lrv(fit: &OlsFit, kernel: LagKernel, b_t: f64) -> Result<LrvEstimate> {
    if !(b_t > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "b_T = {b_t} must be positive"
        )));
    }
    let support = kernel.support();
    let value = lag_weighted_sum(
        fit,
        |k| kernel.eval(b_t * k as f64),
        |k| support.is_some_and(|s| b_t * k as f64 >= s),
    );
    Ok(LrvEstimate {
        value,
        kind: EstimatorKind::Hac,
        kernel,
        bandwidth: b_t,
    })
}

fn check_fixed_b(kernel: LagKernel, b: f64) -> Result<()> {
    if !(b > 0.0 && b <= 1.0) {
        return Err(Error::InvalidArgument(format!("b = {b} outside (0, 1]")));
    }
    if !kernel.psd() {
        return Err(Error::NonPsdKernel(kernel.name()));
    }
    Ok(())
}

/// `Σ_{|k|<T} K(k / (T b)) Γ̂(k)` by direct summation over lags.
pub fn fixed_b_lrv(fit: &OlsFit, kernel: LagKernel, b: f64) -> Result<LrvEstimate> {
    check_fixed_b(kernel, b)?;
    let m = fit.len() as f64 * b;
    let support = kernel.support();
    let value = lag_weighted_sum(
        fit,
        |k| kernel.eval(k as f64 / m),
        |k| support.is_some_and(|s| k as f64 / m >= s),
    );
    Ok(LrvEstimate {
        value,
        kind: EstimatorKind::FixedB,
        kernel,
        bandwidth: b,
    })
}

/// `2 T⁻² Σ_i Ŝ_i Ŝ_i′`, equal to the Bartlett `b = 1` estimator.
pub fn fixed_b_lrv_bartlett_partial_sums(fit: &OlsFit) -> LrvEstimate {
    let t = fit.len() as f64;
    let s = &fit.partial_sums;
    LrvEstimate {
        value: s.transpose() * s * (2.0 / (t * t)),
        kind: EstimatorKind::FixedB,
        kernel: LagKernel::Bartlett,
        bandwidth: 1.0,
    }
}

/// Fixed-b estimate using the `O(T)` partial-sum form when it applies.
pub fn fixed_b_estimate(fit: &OlsFit, kernel: LagKernel, b: f64) -> Result<LrvEstimate> {
    if kernel == LagKernel::Bartlett && b == 1.0 {
        Ok(fixed_b_lrv_bartlett_partial_sums(fit))
    } else {
        fixed_b_lrv(fit, kernel, b)
    }
}

/// Default smoothing bandwidths `(h₁, h₂) = (1.5 T^{-1/5}, T^{-1/6})`, capped at 1.
pub fn default_bandwidths(t_len: usize) -> (f64, f64) {
    let t = t_len as f64;
    ((1.5 * t.powf(-0.2)).min(1.0), t.powf(-1.0 / 6.0).min(1.0))
}

/// Time-kernel weights for lag `|k|` around `u`, as `(first s, weights)` with
/// 0-based `s`. The window is centered at `(⌊Tu⌋ + |k|/2) / T`.
fn time_window(t_len: usize, u: f64, k_abs: usize, h2: f64, k2: TimeKernel) -> (usize, Vec<f64>) {
    let tf = t_len as f64;
    let center = (tf * u).floor() + 0.5 * k_abs as f64;
    let half = 0.5 * tf * h2;
    // 1-based s ranges over |k|+1..=T.
    let lo = ((center - half).floor().max(k_abs as f64 + 1.0)) as usize;
    let hi = ((center + half).ceil().min(tf)) as usize;
    if hi < lo {
        return (lo.saturating_sub(1), Vec::new());
    }
    let weights = (lo..=hi)
        .map(|s| k2.eval((center - s as f64) / (tf * h2) + 0.5))
        .collect();
    (lo - 1, weights)
}

fn weighted_lag_product(v: &DMatrix<f64>, k_abs: usize, first: usize, w: &[f64]) -> DMatrix<f64> {
    let p = v.ncols();
    let mut acc = DMatrix::zeros(p, p);
    for (i, &wi) in w.iter().enumerate() {
        if wi == 0.0 {
            continue;
        }
        let s = first + i;
        for a in 0..p {
            let va = wi * v[(s, a)];
            for b in 0..p {
                acc[(a, b)] += va * v[(s - k_abs, b)];
            }
        }
    }
    acc
}

fn check_local_args(t_len: usize, u: f64, h2: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::InvalidArgument(format!("u = {u} outside [0, 1]")));
    }
    if !(h2 > 0.0 && h2 <= 1.0) {
        return Err(Error::InvalidArgument(format!("h2 = {h2} outside (0, 1]")));
    }
    if t_len == 0 {
        return Err(Error::InvalidArgument("empty sample".into()));
    }
    Ok(())
}

fn local_autocov_inner(
    fit: &OlsFit,
    u: f64,
    k: i64,
    h2: f64,
    k2: TimeKernel,
    renormalize: bool,
) -> Result<DMatrix<f64>> {
    let t_len = fit.len();
    check_local_args(t_len, u, h2)?;
    if k.unsigned_abs() as usize >= t_len {
        return Err(Error::OutOfRange {
            index: k,
            limit: t_len as i64 - 1,
        });
    }
    let k_abs = k.unsigned_abs() as usize;
    let (first, w) = time_window(t_len, u, k_abs, h2, k2);
    let effective = w.iter().filter(|x| **x > 0.0).count();
    if effective < MIN_WINDOW {
        return Err(Error::DegenerateBandwidth(effective));
    }
    let total: f64 = if renormalize {
        w.iter().sum()
    } else {
        t_len as f64 * h2
    };
    let c = weighted_lag_product(&fit.v_hat, k_abs, first, &w) / total;
    Ok(if k < 0 { c.transpose() } else { c })
}

/// Local autocovariance `ĉ(u, k)` with boundary-renormalized weights.
pub fn local_autocov(
    fit: &OlsFit,
    u: f64,
    k: i64,
    h2: f64,
    k2: TimeKernel,
) -> Result<DMatrix<f64>> {
    local_autocov_inner(fit, u, k, h2, k2, true)
}

/// Local autocovariance with the raw `(T h₂)⁻¹` normalization.
pub fn local_autocov_raw(
    fit: &OlsFit,
    u: f64,
    k: i64,
    h2: f64,
    k2: TimeKernel,
) -> Result<DMatrix<f64>> {
    local_autocov_inner(fit, u, k, h2, k2, false)
}

fn local_lrv_at(
    fit: &OlsFit,
    u: f64,
    h1: f64,
    h2: f64,
    k1: LagKernel,
    k2: TimeKernel,
) -> Result<DMatrix<f64>> {
    let t_len = fit.len();
    let mut acc = local_autocov(fit, u, 0, h2, k2)?;
    let support = k1.support();
    for k in 1..t_len {
        let x = h1 * k as f64;
        if support.is_some_and(|s| x >= s) {
            break;
        }
        let w = k1.eval(x);
        if w == 0.0 {
            continue;
        }
        match local_autocov(fit, u, k as i64, h2, k2) {
            Ok(c) => acc += (&c + c.transpose()) * w,
            // Long lags leave too few pairs near the edge; they carry no information.
            Err(Error::DegenerateBandwidth(_)) => break,
            Err(e) => return Err(e),
        }
    }
    Ok(acc)
}

/// Clip negative eigenvalues of a symmetric matrix at zero.
pub fn psd_project(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.nrows() == 1 {
        return DMatrix::from_element(1, 1, m[(0, 0)].max(0.0));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0)));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Midpoint grid `u_i = (i + 1/2) / n`.
pub fn midpoint_grid(n: usize) -> Vec<f64> {
    (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveSettings {
    pub h1: f64,
    pub h2: f64,
    pub lag_kernel: LagKernel,
    pub time_kernel: TimeKernel,
}

/// Grid-sampled local long-run variance `Ω̂(u_i)`, its square root, and
/// optionally the local regressor moment `Q̂(u_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalLrvCurve {
    pub grid: Vec<f64>,
    pub omega: Vec<DMatrix<f64>>,
    pub sigma: Vec<DMatrix<f64>>,
    pub q_hat: Option<Vec<DMatrix<f64>>>,
    /// Absent for curves read back from CSV.
    pub settings: Option<CurveSettings>,
}

impl LocalLrvCurve {
    /// A curve from given `Ω` values (PSD-projected).
    pub fn from_omega(grid: Vec<f64>, omega: Vec<DMatrix<f64>>) -> Result<Self> {
        if grid.is_empty() || grid.len() != omega.len() {
            return Err(Error::InvalidArgument(
                "grid and values must be nonempty and of equal length".into(),
            ));
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) || grid[0] < 0.0 || grid[grid.len() - 1] > 1.0 {
            return Err(Error::InvalidArgument(
                "grid must be increasing inside [0, 1]".into(),
            ));
        }
        let omega: Vec<_> = omega.iter().map(psd_project).collect();
        let sigma = omega.iter().map(psd_sqrt).collect();
        Ok(Self {
            grid,
            omega,
            sigma,
            q_hat: None,
            settings: None,
        })
    }

    pub fn p(&self) -> usize {
        self.omega[0].nrows()
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// Index of the grid point whose cell contains `u` (nearest grid point).
    pub fn cell(&self, u: f64) -> usize {
        let idx = self.grid.partition_point(|g| *g < u);
        if idx == 0 {
            0
        } else if idx == self.grid.len() || u - self.grid[idx - 1] <= self.grid[idx] - u {
            idx - 1
        } else {
            idx
        }
    }

    pub fn sigma_at(&self, u: f64) -> &DMatrix<f64> {
        &self.sigma[self.cell(u)]
    }

    pub fn q_at(&self, u: f64) -> Option<&DMatrix<f64>> {
        self.q_hat.as_ref().map(|q| &q[self.cell(u)])
    }

    fn header(&self) -> Vec<String> {
        let p = self.p();
        let names = |base: &str| -> Vec<String> {
            if p == 1 {
                vec![base.to_string()]
            } else {
                (0..p)
                    .flat_map(|i| (0..p).map(move |j| (i, j)))
                    .map(|(i, j)| format!("{base}_{}_{}", i + 1, j + 1))
                    .collect()
            }
        };
        let mut h = vec!["u".to_string()];
        h.extend(names("omega_hat"));
        h.extend(names("sigma_hat"));
        if self.q_hat.is_some() {
            h.extend(names("q_hat"));
        }
        h
    }

    /// CSV with columns `u,omega_hat,sigma_hat[,q_hat]` (entries suffixed `_i_j` when `p > 1`).
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(self.header())?;
        let flat = |m: &DMatrix<f64>| -> Vec<String> {
            (0..m.nrows())
                .flat_map(|i| (0..m.ncols()).map(move |j| (i, j)))
                .map(|(i, j)| m[(i, j)].to_string())
                .collect()
        };
        for i in 0..self.len() {
            let mut rec = vec![self.grid[i].to_string()];
            rec.extend(flat(&self.omega[i]));
            rec.extend(flat(&self.sigma[i]));
            if let Some(q) = &self.q_hat {
                rec.extend(flat(&q[i]));
            }
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers()?.clone();
        let n_omega = header.iter().filter(|h| h.starts_with("omega_hat")).count();
        let p = (n_omega as f64).sqrt().round() as usize;
        if p == 0 || p * p != n_omega || header.get(0) != Some("u") {
            return Err(Error::InvalidArgument(
                "expected header u,omega_hat,sigma_hat[,q_hat]".into(),
            ));
        }
        let has_q = header.iter().any(|h| h.starts_with("q_hat"));
        let (mut grid, mut omega, mut sigma, mut q) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for rec in rd.records() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::InvalidArgument(format!("bad number `{s}`: {e}")))
                })
                .collect::<Result<_>>()?;
            let block =
                |i: usize| DMatrix::from_row_slice(p, p, &vals[1 + i * p * p..1 + (i + 1) * p * p]);
            grid.push(vals[0]);
            omega.push(block(0));
            sigma.push(block(1));
            if has_q {
                q.push(block(2));
            }
        }
        if grid.is_empty() {
            return Err(Error::InvalidArgument("curve file has no rows".into()));
        }
        Ok(Self {
            grid,
            omega,
            sigma,
            q_hat: has_q.then_some(q),
            settings: None,
        })
    }

    pub fn to_csv_file(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn from_csv_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// `Ω̂(u_i) = Σ_k K₁(h₁ k) ĉ(u_i, k)` on `grid`, PSD-projected, with `Σ̂(u_i)`
/// the symmetric square root.
pub fn local_lrv_curve_on(
    fit: &OlsFit,
    grid: &[f64],
    h1: f64,
    h2: f64,
    k1: LagKernel,
    k2: TimeKernel,
) -> Result<LocalLrvCurve> {
    if !(h1 > 0.0 && h1 <= 1.0) || !(h2 > 0.0 && h2 <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "bandwidths h1 = {h1}, h2 = {h2} outside (0, 1]"
        )));
    }
    let t = fit.len() as f64;
    if t * h1 * h2 < 20.0 {
        warn!(
            "T h1 h2 = {:.2} is below 20; local estimates will be noisy",
            t * h1 * h2
        );
    }
    let raw: Vec<DMatrix<f64>> = grid
        .par_iter()
        .map(|&u| local_lrv_at(fit, u, h1, h2, k1, k2))
        .collect::<Result<_>>()?;
    let mut curve = LocalLrvCurve::from_omega(grid.to_vec(), raw)?;
    curve.settings = Some(CurveSettings {
        h1,
        h2,
        lag_kernel: k1,
        time_kernel: k2,
    });
    Ok(curve)
}

/// [`local_lrv_curve_on`] over the midpoint grid with `n_u` points.
pub fn local_lrv_curve(
    fit: &OlsFit,
    n_u: usize,
    h1: f64,
    h2: f64,
    k1: LagKernel,
    k2: TimeKernel,
) -> Result<LocalLrvCurve> {
    if n_u == 0 {
        return Err(Error::InvalidArgument(
            "grid needs at least one point".into(),
        ));
    }
    local_lrv_curve_on(fit, &midpoint_grid(n_u), h1, h2, k1, k2)
}

/// Kernel-weighted local second moment `Q̂(u)` of the regressors.
pub fn local_regressor_moment(
    sample: &SamplePath,
    u: f64,
    h2: f64,
    k2: TimeKernel,
) -> Result<DMatrix<f64>> {
    let t_len = sample.len();
    check_local_args(t_len, u, h2)?;
    let (first, w) = time_window(t_len, u, 0, h2, k2);
    let effective = w.iter().filter(|x| **x > 0.0).count();
    if effective < MIN_WINDOW {
        return Err(Error::DegenerateBandwidth(effective));
    }
    let total: f64 = w.iter().sum();
    Ok(weighted_lag_product(&sample.x, 0, first, &w) / total)
}

/// Attach `Q̂(u_i)` to a curve, evaluated on the curve's own grid.
pub fn attach_regressor_moment(
    curve: &mut LocalLrvCurve,
    sample: &SamplePath,
    h2: f64,
    k2: TimeKernel,
) -> Result<()> {
    let q = curve
        .grid
        .iter()
        .map(|&u| local_regressor_moment(sample, u, h2, k2))
        .collect::<Result<Vec<_>>>()?;
    curve.q_hat = Some(q);
    Ok(())
}
