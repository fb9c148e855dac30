//! Python bindings for the nsfixedb library.

use nalgebra::{DMatrix, DVector};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

use nsfixedb::dgp::{self, DgpSpec};
use nsfixedb::estimators;
use nsfixedb::har::{self, CvSource, DecisionContext, HypothesisSpec, StatKind};
use nsfixedb::harness::{self, ExperimentSpec};
use nsfixedb::kernels::{BandwidthedKernel, LagKernel, TimeKernel};
use nsfixedb::limitdist::{self, GridSpec, Statistic};

create_exception!(nsfixedb_py, NsfixedbError, PyException);
create_exception!(nsfixedb_py, NumericalError, NsfixedbError);

fn to_py(e: nsfixedb::Error) -> PyErr {
    let msg = format!("{}: {e}", e.kind());
    if e.exit_code() == 3 {
        NumericalError::new_err(msg)
    } else {
        NsfixedbError::new_err(msg)
    }
}

fn lag_kernel(name: &str) -> PyResult<LagKernel> {
    name.parse().map_err(to_py)
}

fn time_kernel(name: &str) -> PyResult<TimeKernel> {
    name.parse().map_err(to_py)
}

fn bandwidthed(kernel: &str, b: f64) -> PyResult<BandwidthedKernel> {
    BandwidthedKernel::new(lag_kernel(kernel)?, b).map_err(to_py)
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

fn from_rows(r: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let n = r.len();
    let p = r.first().map_or(0, Vec::len);
    if n == 0 || p == 0 || r.iter().any(|row| row.len() != p) {
        return Err(PyValueError::new_err(
            "expected a nonempty rectangular list of rows",
        ));
    }
    Ok(DMatrix::from_fn(n, p, |i, j| r[i][j]))
}

/// Data generating process specification.
#[pyclass(name = "DgpSpec", module = "nsfixedb_py", skip_from_py_object)]
#[derive(Clone)]
struct PyDgpSpec {
    inner: DgpSpec,
}

#[pymethods]
impl PyDgpSpec {
    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        Ok(Self {
            inner: DgpSpec::from_json_str(s).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn stationary_ar1(rho: f64, sigma2: f64) -> Self {
        Self {
            inner: DgpSpec::stationary_ar1(rho, sigma2),
        }
    }

    #[staticmethod]
    fn variance_break(s1: f64, s2: f64, at: f64) -> Self {
        Self {
            inner: DgpSpec::variance_break(s1, s2, at),
        }
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn p(&self) -> usize {
        self.inner.p()
    }

    /// True local long-run variance `Ω(u)`.
    fn omega(&self, u: f64) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&dgp::true_local_lrv(&self.inner, u).map_err(to_py)?))
    }

    /// `∫₀¹ Ω(u) du`.
    fn integrated_omega(&self) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&dgp::true_integrated_lrv(&self.inner).map_err(to_py)?))
    }

    fn simulate(&self, t: usize, seed: u64) -> PyResult<PySample> {
        Ok(PySample {
            inner: dgp::simulate(&self.inner, t, seed).map_err(to_py)?,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "DgpSpec({})",
            self.inner.name.as_deref().unwrap_or("unnamed")
        )
    }
}

/// A sample `(y_t, x_t)`.
#[pyclass(name = "Sample", module = "nsfixedb_py", skip_from_py_object)]
#[derive(Clone)]
struct PySample {
    inner: dgp::SamplePath,
}

#[pymethods]
impl PySample {
    #[new]
    #[pyo3(signature = (y, x=None))]
    fn new(y: Vec<f64>, x: Option<Vec<Vec<f64>>>) -> PyResult<Self> {
        let inner = match x {
            None => dgp::SamplePath::location(y),
            Some(x) => dgp::SamplePath::new(DVector::from_vec(y), from_rows(&x)?),
        }
        .map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_csv(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: dgp::SamplePath::from_csv_file(path).map_err(to_py)?,
        })
    }

    fn to_csv(&self, path: &str) -> PyResult<()> {
        self.inner.to_csv_file(path).map_err(to_py)
    }

    #[getter]
    fn y(&self) -> Vec<f64> {
        self.inner.y.iter().copied().collect()
    }

    #[getter]
    fn x(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.x)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn fit(&self) -> PyResult<PyOlsFit> {
        Ok(PyOlsFit {
            inner: estimators::ols_fit(&self.inner).map_err(to_py)?,
        })
    }
}

/// OLS fit with scores and partial sums.
#[pyclass(name = "OlsFit", module = "nsfixedb_py", skip_from_py_object)]
#[derive(Clone)]
struct PyOlsFit {
    inner: estimators::OlsFit,
}

#[pymethods]
impl PyOlsFit {
    #[getter]
    fn beta_hat(&self) -> Vec<f64> {
        self.inner.beta_hat.iter().copied().collect()
    }

    #[getter]
    fn residuals(&self) -> Vec<f64> {
        self.inner.residuals.iter().copied().collect()
    }

    #[getter]
    fn q_hat(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.q_hat)
    }

    fn autocov(&self, k: i64) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(
            &estimators::sample_autocov(&self.inner, k).map_err(to_py)?,
        ))
    }

    fn hac_lrv(&self, kernel: &str, b_t: f64) -> PyResult<PyLrvEstimate> {
        Ok(PyLrvEstimate {
            inner: estimators::hac_lrv(&self.inner, lag_kernel(kernel)?, b_t).map_err(to_py)?,
        })
    }

    fn fixed_b_lrv(&self, kernel: &str, b: f64) -> PyResult<PyLrvEstimate> {
        Ok(PyLrvEstimate {
            inner: estimators::fixed_b_lrv(&self.inner, lag_kernel(kernel)?, b).map_err(to_py)?,
        })
    }

    fn bartlett_partial_sums(&self) -> PyLrvEstimate {
        PyLrvEstimate {
            inner: estimators::fixed_b_lrv_bartlett_partial_sums(&self.inner),
        }
    }

    #[pyo3(signature = (n_u=40, h1=None, h2=None, lag_kernel="bartlett", time_kernel="quartic"))]
    fn local_lrv_curve(
        &self,
        n_u: usize,
        h1: Option<f64>,
        h2: Option<f64>,
        lag_kernel: &str,
        time_kernel: &str,
    ) -> PyResult<PyCurve> {
        let (d1, d2) = estimators::default_bandwidths(self.inner.len());
        let curve = estimators::local_lrv_curve(
            &self.inner,
            n_u,
            h1.unwrap_or(d1),
            h2.unwrap_or(d2),
            self::lag_kernel(lag_kernel)?,
            self::time_kernel(time_kernel)?,
        )
        .map_err(to_py)?;
        Ok(PyCurve { inner: curve })
    }

    /// t statistic for `β_coef = value`.
    #[pyo3(signature = (kind, kernel, bandwidth, coef=None, value=0.0))]
    fn t_stat(
        &self,
        kind: &str,
        kernel: &str,
        bandwidth: f64,
        coef: Option<usize>,
        value: f64,
    ) -> PyResult<f64> {
        let p = self.inner.p();
        let hyp = HypothesisSpec::single(p, coef.unwrap_or(p - 1), value).map_err(to_py)?;
        let k = lag_kernel(kernel)?;
        match kind {
            "fixed-b" => har::t_stat_fixed_b(&self.inner, &hyp, k, bandwidth),
            "hac" => har::t_stat_hac(&self.inner, &hyp, k, bandwidth),
            other => {
                return Err(PyValueError::new_err(format!(
                    "kind must be 'fixed-b' or 'hac', got {other:?}"
                )))
            }
        }
        .map_err(to_py)
    }

    /// Fixed-b F statistic for `R β = r`.
    fn f_stat(&self, r_mat: Vec<Vec<f64>>, r_vec: Vec<f64>, kernel: &str, b: f64) -> PyResult<f64> {
        let hyp =
            HypothesisSpec::new(from_rows(&r_mat)?, DVector::from_vec(r_vec)).map_err(to_py)?;
        har::f_stat_fixed_b(&self.inner, &hyp, lag_kernel(kernel)?, b).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(name = "LrvEstimate", module = "nsfixedb_py", skip_from_py_object)]
#[derive(Clone)]
struct PyLrvEstimate {
    inner: estimators::LrvEstimate,
}

#[pymethods]
impl PyLrvEstimate {
    #[getter]
    fn value(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.value)
    }

    fn scalar(&self) -> f64 {
        self.inner.scalar()
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }
}

/// Estimated local long-run variance curve.
#[pyclass(name = "LocalLrvCurve", module = "nsfixedb_py", skip_from_py_object)]
#[derive(Clone)]
struct PyCurve {
    inner: estimators::LocalLrvCurve,
}

#[pymethods]
impl PyCurve {
    #[staticmethod]
    fn from_csv(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: estimators::LocalLrvCurve::from_csv_file(path).map_err(to_py)?,
        })
    }

    fn to_csv(&self, path: &str) -> PyResult<()> {
        self.inner.to_csv_file(path).map_err(to_py)
    }

    #[getter]
    fn grid(&self) -> Vec<f64> {
        self.inner.grid.clone()
    }

    /// `Ω̂(u_i)(1,1)` for scalar curves.
    #[getter]
    fn omega(&self) -> Vec<f64> {
        self.inner.omega.iter().map(|m| m[(0, 0)]).collect()
    }

    /// Plug-in limit draws for a test of the last coefficient.
    #[pyo3(signature = (kernel, b, draws=10000, seed=0, grid_n=1000, statistic="t"))]
    fn plug_in_draws(
        &self,
        kernel: &str,
        b: f64,
        draws: usize,
        seed: u64,
        grid_n: usize,
        statistic: &str,
    ) -> PyResult<PyDrawSet> {
        let p = self.inner.p();
        let r = DMatrix::from_fn(1, p, |_, j| if j == p - 1 { 1.0 } else { 0.0 });
        let set = limitdist::plug_in_limit_distribution(
            &self.inner,
            bandwidthed(kernel, b)?,
            &r,
            parse_statistic(statistic)?,
            GridSpec::new(grid_n).map_err(to_py)?,
            draws,
            seed,
        )
        .map_err(to_py)?;
        Ok(PyDrawSet { inner: set })
    }
}

fn parse_statistic(s: &str) -> PyResult<Statistic> {
    match s {
        "t" => Ok(Statistic::T),
        "f" | "F" => Ok(Statistic::F),
        other => Err(PyValueError::new_err(format!(
            "statistic must be 't' or 'f', got {other:?}"
        ))),
    }
}

/// Monte Carlo draws of a limit statistic.
#[pyclass(name = "LimitDrawSet", module = "nsfixedb_py", skip_from_py_object)]
#[derive(Clone)]
struct PyDrawSet {
    inner: limitdist::LimitDrawSet,
}

#[pymethods]
impl PyDrawSet {
    #[getter]
    fn draws(&self) -> Vec<f64> {
        self.inner.draws.clone()
    }

    /// `(cv, se)` for a test at `level`.
    fn critical_value(&self, level: f64) -> PyResult<(f64, f64)> {
        self.inner.critical_value(level).map_err(to_py)
    }

    /// Rows `(level, quantile, se)`.
    fn quantiles(&self, levels: Vec<f64>) -> PyResult<Vec<(f64, f64, f64)>> {
        Ok(limitdist::critical_values(&self.inner, &levels)
            .map_err(to_py)?
            .into_iter()
            .map(|r| (r.level, r.value, r.se))
            .collect())
    }

    fn p_value(&self, stat: f64) -> f64 {
        self.inner.p_value(stat)
    }

    /// Decision for a fixed-b statistic against these draws.
    fn decide(&self, stat: f64, level: f64) -> PyResult<String> {
        let kind = match self.inner.meta.statistic {
            Statistic::F => StatKind::FFixedB,
            _ => StatKind::TFixedB,
        };
        let ctx = DecisionContext {
            draws: Some(&self.inner),
            ..Default::default()
        };
        Ok(
            har::decide(stat, kind, CvSource::StationarySimulated, level, &ctx)
                .map_err(to_py)?
                .to_json(),
        )
    }

    fn save(&self, dir: &str, stem: &str) -> PyResult<()> {
        self.inner.save(dir, stem).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.draws.len()
    }
}

/// Stationary (pivotal) limit draws.
#[pyfunction]
#[pyo3(signature = (kernel, b, draws=10000, seed=0, grid_n=1000, statistic="t"))]
fn stationary_draws(
    kernel: &str,
    b: f64,
    draws: usize,
    seed: u64,
    grid_n: usize,
    statistic: &str,
) -> PyResult<PyDrawSet> {
    let set = limitdist::stationary_draw_set(
        bandwidthed(kernel, b)?,
        1,
        parse_statistic(statistic)?,
        GridSpec::new(grid_n).map_err(to_py)?,
        draws,
        seed,
    )
    .map_err(to_py)?;
    Ok(PyDrawSet { inner: set })
}

/// Limit draws with the true `Σ(u)`, `Q(u)` of a DGP.
#[pyfunction]
#[pyo3(signature = (spec, kernel, b, draws=10000, seed=0, grid_n=1000))]
fn oracle_t_draws(
    spec: &PyDgpSpec,
    kernel: &str,
    b: f64,
    draws: usize,
    seed: u64,
    grid_n: usize,
) -> PyResult<PyDrawSet> {
    let grid = GridSpec::new(grid_n).map_err(to_py)?;
    let s = &spec.inner;
    let engine = limitdist::LimitEngine::new(&s.variance_path(), &s.regressor_moment_path(), grid)
        .map_err(to_py)?;
    let p = s.p();
    let r = DMatrix::from_fn(1, p, |_, j| if j == p - 1 { 1.0 } else { 0.0 });
    let set = limitdist::LimitDrawSet::simulate(
        &engine,
        bandwidthed(kernel, b)?,
        &r,
        Statistic::T,
        draws,
        seed,
        limitdist::PathSource::Oracle,
        limitdist::PathSource::Oracle,
    )
    .map_err(to_py)?;
    Ok(PyDrawSet { inner: set })
}

/// `μ_b` for a scalar DGP's long-run variance path.
#[pyfunction]
fn mean_g_b(spec: &PyDgpSpec, kernel: &str, b: f64) -> PyResult<f64> {
    limitdist::mean_g_b(bandwidthed(kernel, b)?, &spec.inner.variance_path()).map_err(to_py)
}

/// `(κ₂, κ₃, κ₄)` of the normalized fixed-b limit.
#[pyfunction]
fn cumulants(spec: &PyDgpSpec, kernel: &str, b: f64) -> PyResult<(f64, f64, f64)> {
    let k = limitdist::cumulants_asymptotic_nodes(
        bandwidthed(kernel, b)?,
        &spec.inner.variance_path(),
        limitdist::CUMULANT_NODES,
    )
    .map_err(to_py)?;
    Ok((k[0], k[1], k[2]))
}

/// Chi-square expansion of `P(|t| ≤ z)`; the bandwidth bound is enforced.
#[pyfunction]
#[pyo3(signature = (spec, kernel, b, z, m_max=3))]
fn expansion(spec: &PyDgpSpec, kernel: &str, b: f64, z: f64, m_max: usize) -> PyResult<f64> {
    limitdist::expansion_rejection_approx(
        bandwidthed(kernel, b)?,
        &spec.inner.variance_path(),
        z,
        m_max,
    )
    .map_err(to_py)
}

/// Run an experiment spec (JSON) and return the rejection table as CSV text.
#[pyfunction]
fn run_experiment(py: Python<'_>, spec_json: &str) -> PyResult<String> {
    let spec = ExperimentSpec::from_json_str(spec_json).map_err(to_py)?;
    let table = py
        .detach(|| harness::run_power_experiment(&spec))
        .map_err(to_py)?;
    let mut buf = Vec::new();
    table.write_csv(&mut buf).map_err(to_py)?;
    Ok(String::from_utf8(buf).expect("csv is utf8"))
}

/// Run the command-line interface with the given arguments; returns the exit code.
#[pyfunction]
fn cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let mut argv = vec!["nsfixedb".to_string()];
    argv.extend(args);
    py.detach(|| harness::cli_main(argv))
}

#[pymodule]
fn nsfixedb_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("NsfixedbError", m.py().get_type::<NsfixedbError>())?;
    m.add("NumericalError", m.py().get_type::<NumericalError>())?;
    m.add_class::<PyDgpSpec>()?;
    m.add_class::<PySample>()?;
    m.add_class::<PyOlsFit>()?;
    m.add_class::<PyLrvEstimate>()?;
    m.add_class::<PyCurve>()?;
    m.add_class::<PyDrawSet>()?;
    m.add_function(wrap_pyfunction!(stationary_draws, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_t_draws, m)?)?;
    m.add_function(wrap_pyfunction!(mean_g_b, m)?)?;
    m.add_function(wrap_pyfunction!(cumulants, m)?)?;
    m.add_function(wrap_pyfunction!(expansion, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    Ok(())
}
