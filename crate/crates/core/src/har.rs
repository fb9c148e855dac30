//! t and F statistics and the reject/accept decision.
//!
//! A statistic is paired with one of three critical-value sources: the
//! standard normal / chi-square tables, simulated stationary fixed-b limits,
//! or simulated limits with estimated nuisance curves plugged in.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::estimators::{fixed_b_estimate, hac_lrv, LocalLrvCurve, OlsFit};
use crate::kernels::{BandwidthedKernel, LagKernel};
use crate::limitdist::{plug_in_limit_distribution, GridSpec, LimitDrawSet, Statistic};

/// Condition-number ceiling for the middle matrix of F statistics.
pub const MAX_CONDITION: f64 = 1e12;

/// `H₀: R β = r`.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisSpec {
    pub r_mat: DMatrix<f64>,
    pub r_vec: DVector<f64>,
}

impl HypothesisSpec {
    pub fn new(r_mat: DMatrix<f64>, r_vec: DVector<f64>) -> Result<Self> {
        let q = r_mat.nrows();
        if q == 0 || r_vec.len() != q || q > r_mat.ncols() {
            return Err(Error::InvalidArgument(format!(
                "R is {}×{} and r has length {}",
                q,
                r_mat.ncols(),
                r_vec.len()
            )));
        }
        let sv = r_mat.clone().svd(false, false).singular_values;
        let max = sv.max();
        if !(sv.min() > 1e-10 * max) {
            return Err(Error::RankDeficient { min_sv: sv.min() });
        }
        Ok(Self { r_mat, r_vec })
    }

    /// `β_j = value` for coefficient `j` of `p`.
    pub fn single(p: usize, j: usize, value: f64) -> Result<Self> {
        if j >= p {
            return Err(Error::InvalidArgument(format!(
                "coefficient {j} out of range for p = {p}"
            )));
        }
        let mut r = DMatrix::zeros(1, p);
        r[(0, j)] = 1.0;
        Self::new(r, DVector::from_element(1, value))
    }

    pub fn q(&self) -> usize {
        self.r_mat.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatKind {
    TFixedB,
    FFixedB,
    THac,
}

impl StatKind {
    pub fn limit_statistic(self) -> Statistic {
        match self {
            StatKind::FFixedB => Statistic::F,
            _ => Statistic::T,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CvSource {
    /// Standard normal for t, chi-square(q)/q for F.
    Standard,
    /// Simulated fixed-b limit with constant nuisance paths.
    StationarySimulated,
    /// Simulated limit with estimated `Σ̂(u)`, `Q̂(u)`.
    PlugInSimulated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub stat: f64,
    pub kind: StatKind,
    pub cv_source: CvSource,
    pub level: f64,
    pub cv: f64,
    pub cv_se: Option<f64>,
    pub reject: bool,
    pub pvalue: f64,
}

impl TestResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("serializable")
    }
}

/// Numerator `√T (Rβ̂ − r)` and middle matrix `R Q̂⁻¹ Ω̂ Q̂⁻¹ R′`.
fn pieces(
    fit: &OlsFit,
    hyp: &HypothesisSpec,
    omega: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>, f64)> {
    if hyp.r_mat.ncols() != fit.p() {
        return Err(Error::InvalidArgument(format!(
            "hypothesis has {} columns, model has p = {}",
            hyp.r_mat.ncols(),
            fit.p()
        )));
    }
    let q_inv = fit
        .q_hat
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidArgument("Q̂ is singular".into()))?;
    let rq = &hyp.r_mat * q_inv;
    let num = (&hyp.r_mat * &fit.beta_hat - &hyp.r_vec) * (fit.len() as f64).sqrt();
    let mid = &rq * omega * rq.transpose();
    let mid = (&mid + mid.transpose()) * 0.5;
    // Reference size of the denominator, from the data rather than the residuals,
    // so that a perfect fit counts as degenerate.
    let y2 = fit.residuals.norm_squared() / fit.len() as f64
        + fit.beta_hat.dot(&(&fit.q_hat * &fit.beta_hat));
    let scale = (&rq * &fit.q_hat * rq.transpose()).trace().abs() * y2;
    Ok((num, mid, scale))
}

/// `t = √T (Rβ̂ − r) / √(R Q̂⁻¹ Ω̂ Q̂⁻¹ R′)` for a given `Ω̂`.
pub fn t_stat_with_lrv(fit: &OlsFit, hyp: &HypothesisSpec, omega: &DMatrix<f64>) -> Result<f64> {
    if hyp.q() != 1 {
        return Err(Error::InvalidArgument(
            "t statistics take a single restriction".into(),
        ));
    }
    let (num, mid, scale) = pieces(fit, hyp, omega)?;
    let v = mid[(0, 0)];
    if !(v > 1e-14 * scale) {
        return Err(Error::DegenerateVariance(v));
    }
    Ok(num[0] / v.sqrt())
}

/// `F = (Rβ̂ − r)′ [R Q̂⁻¹ Ω̂ Q̂⁻¹ R′]⁻¹ (Rβ̂ − r) T / q`, solved rather than inverted.
pub fn f_stat_with_lrv(fit: &OlsFit, hyp: &HypothesisSpec, omega: &DMatrix<f64>) -> Result<f64> {
    let (num, mid, scale) = pieces(fit, hyp, omega)?;
    let eig = SymmetricEigen::new(mid.clone()).eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    let cond = if lo > 0.0 && hi > 1e-14 * scale {
        hi / lo
    } else {
        f64::INFINITY
    };
    if !(cond <= MAX_CONDITION) {
        return Err(Error::SingularMiddleMatrix(cond));
    }
    let sol = mid
        .lu()
        .solve(&num)
        .ok_or(Error::SingularMiddleMatrix(cond))?;
    Ok(num.dot(&sol) / hyp.q() as f64)
}

pub fn t_stat_fixed_b(
    fit: &OlsFit,
    hyp: &HypothesisSpec,
    kernel: LagKernel,
    b: f64,
) -> Result<f64> {
    t_stat_with_lrv(fit, hyp, &fixed_b_estimate(fit, kernel, b)?.value)
}

pub fn f_stat_fixed_b(
    fit: &OlsFit,
    hyp: &HypothesisSpec,
    kernel: LagKernel,
    b: f64,
) -> Result<f64> {
    f_stat_with_lrv(fit, hyp, &fixed_b_estimate(fit, kernel, b)?.value)
}

pub fn t_stat_hac(fit: &OlsFit, hyp: &HypothesisSpec, kernel: LagKernel, b_t: f64) -> Result<f64> {
    t_stat_with_lrv(fit, hyp, &hac_lrv(fit, kernel, b_t)?.value)
}

/// Inputs for simulating plug-in critical values on the fly.
#[derive(Debug, Clone, Copy)]
pub struct PlugInRequest<'a> {
    pub curve: &'a LocalLrvCurve,
    pub kernel: BandwidthedKernel,
    pub r_mat: &'a DMatrix<f64>,
    pub grid: GridSpec,
    pub draws: usize,
    pub seed: u64,
}

/// What a simulated source needs: a ready draw set, or curves to build one.
#[derive(Debug, Clone, Copy, Default)]
pub struct DecisionContext<'a> {
    pub draws: Option<&'a LimitDrawSet>,
    pub plug_in: Option<PlugInRequest<'a>>,
    /// Restriction count, needed for F with the standard source.
    pub q: Option<usize>,
}

/// Combine a statistic with a critical-value source. At `level = 1` every
/// statistic rejects.
pub fn decide(
    stat: f64,
    kind: StatKind,
    cv_source: CvSource,
    level: f64,
    ctx: &DecisionContext,
) -> Result<TestResult> {
    if !(level > 0.0 && level <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "level {level} outside (0, 1]"
        )));
    }
    let (cv, cv_se, pvalue) = match cv_source {
        CvSource::Standard => standard_cv(stat, kind, level, ctx)?,
        CvSource::StationarySimulated | CvSource::PlugInSimulated => {
            let built;
            let set = match (ctx.draws, ctx.plug_in, cv_source) {
                (Some(set), _, _) => set,
                (None, Some(req), CvSource::PlugInSimulated) => {
                    built = plug_in_limit_distribution(
                        req.curve,
                        req.kernel,
                        req.r_mat,
                        kind.limit_statistic(),
                        req.grid,
                        req.draws,
                        req.seed,
                    )?;
                    &built
                }
                _ => return Err(Error::MissingContext),
            };
            if set.meta.statistic != kind.limit_statistic() {
                return Err(Error::InvalidArgument(format!(
                    "draw set holds {:?} draws, statistic is {kind:?}",
                    set.meta.statistic
                )));
            }
            let (cv, se) = set.critical_value(level)?;
            (cv, Some(se), set.p_value(stat))
        }
    };
    let exceeds = match kind {
        StatKind::FFixedB => stat > cv,
        _ => stat.abs() > cv,
    };
    Ok(TestResult {
        stat,
        kind,
        cv_source,
        level,
        cv,
        cv_se,
        reject: level >= 1.0 || exceeds,
        pvalue,
    })
}

fn standard_cv(
    stat: f64,
    kind: StatKind,
    level: f64,
    ctx: &DecisionContext,
) -> Result<(f64, Option<f64>, f64)> {
    match kind {
        StatKind::FFixedB => {
            let q = ctx.q.ok_or(Error::MissingContext)?;
            let chi =
                ChiSquared::new(q as f64).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            let cv = if level >= 1.0 {
                0.0
            } else {
                chi.inverse_cdf(1.0 - level) / q as f64
            };
            Ok((cv, None, 1.0 - chi.cdf(stat * q as f64)))
        }
        _ => {
            let n = Normal::standard();
            let cv = n.inverse_cdf(1.0 - 0.5 * level);
            Ok((cv, None, 2.0 * (1.0 - n.cdf(stat.abs()))))
        }
    }
}

/// Draw sets shared across decisions, keyed by their metadata.
#[derive(Debug, Default)]
pub struct DrawSetCache {
    inner: Mutex<HashMap<String, Arc<LimitDrawSet>>>,
}

impl DrawSetCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_build(
        &self,
        key: &str,
        build: impl FnOnce() -> Result<LimitDrawSet>,
    ) -> Result<Arc<LimitDrawSet>> {
        if let Some(set) = self.inner.lock().expect("cache lock").get(key) {
            return Ok(set.clone());
        }
        let set = Arc::new(build()?);
        self.inner
            .lock()
            .expect("cache lock")
            .insert(key.to_string(), set.clone());
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::SamplePath;
    use crate::estimators::ols_fit;

    fn alternating() -> OlsFit {
        ols_fit(&SamplePath::location(vec![1.0, -1.0, 1.0, -1.0]).unwrap()).unwrap()
    }

    #[test]
    fn hand_values_t4() {
        // β̂ = 0, Ω̂_fixed-b (Bartlett, b = 1) = 1/4, so t = √4 (0 − r) / √(1/4).
        let fit = alternating();
        let hyp = HypothesisSpec::single(1, 0, -0.5).unwrap();
        let t = t_stat_fixed_b(&fit, &hyp, LagKernel::Bartlett, 1.0).unwrap();
        assert!((t - 2.0).abs() < 1e-12, "{t}");
        // HAC with b_T = 1/3 gives 1/3.
        let t = t_stat_hac(&fit, &hyp, LagKernel::Bartlett, 1.0 / 3.0).unwrap();
        assert!((t - 1.0 / (1.0f64 / 3.0).sqrt()).abs() < 1e-12, "{t}");
        let zero = HypothesisSpec::single(1, 0, fit.beta_hat[0]).unwrap();
        assert_eq!(
            t_stat_fixed_b(&fit, &zero, LagKernel::Bartlett, 1.0).unwrap(),
            0.0
        );
    }

    #[test]
    fn degenerate_and_rank_checks() {
        let fit = ols_fit(&SamplePath::location(vec![2.0; 20]).unwrap()).unwrap();
        let hyp = HypothesisSpec::single(1, 0, 0.0).unwrap();
        assert!(matches!(
            t_stat_fixed_b(&fit, &hyp, LagKernel::Bartlett, 1.0),
            Err(Error::DegenerateVariance(_))
        ));
        assert!(HypothesisSpec::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]),
            DVector::zeros(2)
        )
        .is_err());
    }

    #[test]
    fn standard_decisions() {
        let r = decide(
            0.0,
            StatKind::THac,
            CvSource::Standard,
            0.05,
            &DecisionContext::default(),
        )
        .unwrap();
        assert!((r.cv - 1.959_963_984_540_054).abs() < 1e-9);
        assert!(!r.reject);
        for level in [0.01, 0.5, 0.99] {
            assert!(
                !decide(
                    0.0,
                    StatKind::TFixedB,
                    CvSource::Standard,
                    level,
                    &DecisionContext::default()
                )
                .unwrap()
                .reject
            );
        }
        assert!(
            decide(
                0.0,
                StatKind::THac,
                CvSource::Standard,
                1.0,
                &DecisionContext::default()
            )
            .unwrap()
            .reject
        );
        let ctx = DecisionContext {
            q: Some(1),
            ..Default::default()
        };
        let f = decide(3.0, StatKind::FFixedB, CvSource::Standard, 0.05, &ctx).unwrap();
        assert!((f.cv - 3.841_458_820_694_124).abs() < 1e-9);
        assert!(matches!(
            decide(
                1.0,
                StatKind::TFixedB,
                CvSource::StationarySimulated,
                0.05,
                &DecisionContext::default()
            ),
            Err(Error::MissingContext)
        ));
    }

    #[test]
    fn json_shape() {
        let r = decide(
            2.5,
            StatKind::TFixedB,
            CvSource::Standard,
            0.05,
            &DecisionContext::default(),
        )
        .unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        for key in [
            "stat",
            "kind",
            "cv_source",
            "level",
            "cv",
            "cv_se",
            "reject",
            "pvalue",
        ] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["kind"], "t_fixed_b");
    }
}
