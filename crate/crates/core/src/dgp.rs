//! Nonstationary Gaussian data-generating processes with known nuisance curves.
//!
//! Errors follow a time-varying AR(1) `e_t = ρ(t/T) e_{t-1} + σ(t/T) ε_t`
//! whose parameters are piecewise constant or piecewise linear in rescaled
//! time. The regression model adds independent stationary AR(1) regressors
//! next to an all-ones column. Paths are right-continuous at breaks.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quad;

/// Largest `T` for dense `T × T` computations.
pub const DENSE_CAP: usize = 5000;

const PATH_QUAD_TOL: f64 = 1e-10;

type MatrixFn = Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;

#[derive(Clone)]
struct Piece {
    u_start: f64,
    u_end: f64,
    eval: MatrixFn,
    constant: bool,
}

/// A piecewise-continuous `p × p` matrix function on `[0, 1]`.
#[derive(Clone)]
pub struct MatrixPath {
    dim: usize,
    pieces: Vec<Piece>,
}

impl fmt::Debug for MatrixPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let spans: Vec<(f64, f64, bool)> = self
            .pieces
            .iter()
            .map(|p| (p.u_start, p.u_end, p.constant))
            .collect();
        f.debug_struct("MatrixPath")
            .field("dim", &self.dim)
            .field("pieces", &spans)
            .finish()
    }
}

impl MatrixPath {
    pub fn constant(value: DMatrix<f64>) -> Self {
        Self::piecewise_constant(&[], vec![value]).expect("single piece is valid")
    }

    pub fn scalar(value: f64) -> Self {
        Self::constant(DMatrix::from_element(1, 1, value))
    }

    /// Constant on each of the intervals cut out by `breaks` (sorted, interior).
    pub fn piecewise_constant(breaks: &[f64], values: Vec<DMatrix<f64>>) -> Result<Self> {
        if values.len() != breaks.len() + 1 {
            return Err(Error::InvalidSpec(format!(
                "{} values for {} break points",
                values.len(),
                breaks.len()
            )));
        }
        let mut pieces = Vec::with_capacity(values.len());
        for (i, v) in values.into_iter().enumerate() {
            let u_start = if i == 0 { 0.0 } else { breaks[i - 1] };
            let u_end = if i == breaks.len() { 1.0 } else { breaks[i] };
            pieces.push(Piece {
                u_start,
                u_end,
                eval: Arc::new(move |_| v.clone()),
                constant: true,
            });
        }
        Self::from_pieces(pieces)
    }

    /// Piecewise scalar path from `(u_start, u_end, f)` triples.
    pub fn scalar_pieces<F>(pieces: Vec<(f64, f64, F)>) -> Result<Self>
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        let pieces = pieces
            .into_iter()
            .map(|(a, b, f)| Piece {
                u_start: a,
                u_end: b,
                eval: Arc::new(move |u| DMatrix::from_element(1, 1, f(u))),
                constant: false,
            })
            .collect();
        Self::from_pieces(pieces)
    }

    fn from_pieces(pieces: Vec<Piece>) -> Result<Self> {
        if pieces.is_empty() {
            return Err(Error::InvalidSpec("path has no pieces".into()));
        }
        let mut expect = 0.0;
        for p in &pieces {
            if (p.u_start - expect).abs() > 1e-12 || !(p.u_end > p.u_start) {
                return Err(Error::InvalidSpec(format!(
                    "pieces must tile [0, 1] in order; got [{}, {})",
                    p.u_start, p.u_end
                )));
            }
            expect = p.u_end;
        }
        if (expect - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidSpec(format!("pieces end at {expect}, not 1")));
        }
        let dim = (pieces[0].eval)(pieces[0].u_start).nrows();
        Ok(Self { dim, pieces })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn piece_index(&self, u: f64) -> usize {
        self.pieces
            .iter()
            .position(|p| u < p.u_end)
            .unwrap_or(self.pieces.len() - 1)
    }

    /// Right-continuous evaluation; `u` is clamped to `[0, 1]`.
    pub fn eval(&self, u: f64) -> DMatrix<f64> {
        let u = u.clamp(0.0, 1.0);
        let p = &self.pieces[self.piece_index(u)];
        (p.eval)(u)
    }

    /// Interior piece boundaries.
    pub fn breaks(&self) -> Vec<f64> {
        self.pieces[1..].iter().map(|p| p.u_start).collect()
    }

    /// True when `u` is an interior boundary where the left and right limits differ.
    pub fn is_discontinuity(&self, u: f64) -> bool {
        self.pieces.windows(2).any(|w| {
            let b = w[1].u_start;
            if (u - b).abs() > 1e-14 {
                return false;
            }
            let left = (w[0].eval)(b);
            let right = (w[1].eval)(b);
            (left - right).amax() > 1e-12
        })
    }

    pub fn is_piecewise_constant(&self) -> bool {
        self.pieces.iter().all(|p| p.constant)
    }

    /// `∫_a^b M(u) du` for `0 ≤ a ≤ b ≤ 1`.
    pub fn integral(&self, a: f64, b: f64) -> DMatrix<f64> {
        let mut acc = DMatrix::zeros(self.dim, self.dim);
        for p in &self.pieces {
            let lo = a.max(p.u_start);
            let hi = b.min(p.u_end);
            if hi <= lo {
                continue;
            }
            if p.constant {
                acc += (p.eval)(lo) * (hi - lo);
            } else {
                for i in 0..self.dim {
                    for j in 0..self.dim {
                        acc[(i, j)] +=
                            quad::integrate(|u| (p.eval)(u)[(i, j)], lo, hi, PATH_QUAD_TOL);
                    }
                }
            }
        }
        acc
    }

    /// `(b − a)⁻¹ ∫_a^b M(u) du`, returned verbatim when `[a, b]` lies in a constant piece.
    pub fn cell_average(&self, a: f64, b: f64) -> DMatrix<f64> {
        let i = self.piece_index(a);
        let p = &self.pieces[i];
        if p.constant && b <= p.u_end {
            return (p.eval)(a);
        }
        self.integral(a, b) / (b - a)
    }

    /// `sup_u ‖M(u)‖₂`, exact for constant pieces and sampled otherwise.
    pub fn sup_norm(&self) -> f64 {
        let norm = |m: DMatrix<f64>| -> f64 {
            if m.nrows() == 1 {
                m[(0, 0)].abs()
            } else {
                SymmetricEigen::new(m).eigenvalues.amax()
            }
        };
        let mut best: f64 = 0.0;
        for p in &self.pieces {
            if p.constant {
                best = best.max(norm((p.eval)(p.u_start)));
            } else {
                for i in 0..=200 {
                    let u = p.u_start + (p.u_end - p.u_start) * i as f64 / 200.0;
                    best = best.max(norm((p.eval)(u)));
                }
            }
        }
        best
    }

    /// Multiply every value by a scalar.
    pub fn scaled(&self, c: f64) -> Self {
        let pieces = self
            .pieces
            .iter()
            .map(|p| {
                let f = p.eval.clone();
                Piece {
                    u_start: p.u_start,
                    u_end: p.u_end,
                    eval: Arc::new(move |u| f(u) * c),
                    constant: p.constant,
                }
            })
            .collect();
        Self {
            dim: self.dim,
            pieces,
        }
    }
}

/// Symmetric PSD square root by eigenvalue clipping.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.nrows() == 1 {
        return DMatrix::from_element(1, 1, m[(0, 0)].max(0.0).sqrt());
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// The local long-run variance `Ω(u) = Σ(u)Σ(u)′`.
#[derive(Debug, Clone)]
pub struct VariancePath(pub MatrixPath);

impl VariancePath {
    pub fn constant(omega: f64) -> Self {
        Self(MatrixPath::scalar(omega))
    }

    /// Scalar Ω stepping through `values` at the interior `breaks`.
    pub fn steps(breaks: &[f64], values: &[f64]) -> Result<Self> {
        let vals = values
            .iter()
            .map(|&v| DMatrix::from_element(1, 1, v))
            .collect();
        Ok(Self(MatrixPath::piecewise_constant(breaks, vals)?))
    }

    pub fn dim(&self) -> usize {
        self.0.dim()
    }

    pub fn omega(&self, u: f64) -> DMatrix<f64> {
        self.0.eval(u)
    }

    /// Lower Cholesky factor of `Ω(u)` (PSD square root when singular).
    pub fn sigma(&self, u: f64) -> DMatrix<f64> {
        let m = self.omega(u);
        if m.nrows() == 1 {
            return psd_sqrt(&m);
        }
        match m.clone().cholesky() {
            Some(c) => c.l(),
            None => psd_sqrt(&m),
        }
    }

    /// `Ω = ∫₀¹ Ω(u) du`.
    pub fn integrated(&self) -> DMatrix<f64> {
        self.0.integral(0.0, 1.0)
    }

    /// Scalar `∫₀¹ Ω(u) du` for `p = 1`.
    pub fn integrated_scalar(&self) -> f64 {
        self.integrated()[(0, 0)]
    }

    /// `C_Ω = sup_u Ω(u)`.
    pub fn sup(&self) -> f64 {
        self.0.sup_norm()
    }
}

/// The regressor second-moment path `Q(u)` together with `Q̄ = ∫₀¹ Q`.
#[derive(Debug, Clone)]
pub struct RegressorMomentPath {
    path: MatrixPath,
    q_bar: DMatrix<f64>,
}

impl RegressorMomentPath {
    pub fn new(path: MatrixPath) -> Result<Self> {
        let q_bar = path.integral(0.0, 1.0);
        let eig = SymmetricEigen::new(q_bar.clone()).eigenvalues;
        if eig.min() <= 0.0 {
            return Err(Error::InvalidSpec(
                "integrated regressor moment is not positive definite".into(),
            ));
        }
        Ok(Self { path, q_bar })
    }

    pub fn constant(q: DMatrix<f64>) -> Result<Self> {
        Self::new(MatrixPath::constant(q))
    }

    /// `Q(u) ≡ I_p`.
    pub fn identity(p: usize) -> Self {
        Self::constant(DMatrix::identity(p, p)).expect("identity is positive definite")
    }

    pub fn dim(&self) -> usize {
        self.path.dim()
    }

    pub fn q(&self, u: f64) -> DMatrix<f64> {
        self.path.eval(u)
    }

    pub fn q_bar(&self) -> &DMatrix<f64> {
        &self.q_bar
    }

    /// `∫₀^r Q(u) du`.
    pub fn cumulative(&self, r: f64) -> DMatrix<f64> {
        self.path.integral(0.0, r.clamp(0.0, 1.0))
    }

    pub fn path(&self) -> &MatrixPath {
        &self.path
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Model {
    #[default]
    Location,
    #[serde(alias = "linear-regression")]
    Regression,
}

/// One segment of the error process; `*_end` values turn it into a linear ramp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub u_start: f64,
    pub u_end: f64,
    pub rho: f64,
    pub sigma2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_end: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma2_end: Option<f64>,
}

impl Segment {
    fn is_constant(&self) -> bool {
        self.rho_end.is_none() && self.sigma2_end.is_none()
    }

    fn weight(&self, u: f64) -> f64 {
        ((u - self.u_start) / (self.u_end - self.u_start)).clamp(0.0, 1.0)
    }

    fn rho_at(&self, u: f64) -> f64 {
        let w = self.weight(u);
        self.rho + w * (self.rho_end.unwrap_or(self.rho) - self.rho)
    }

    fn sigma2_at(&self, u: f64) -> f64 {
        let w = self.weight(u);
        self.sigma2 + w * (self.sigma2_end.unwrap_or(self.sigma2) - self.sigma2)
    }
}

/// Stationary AR(1) regressor `x_t = mean + z_t`, `z_t = rho z_{t-1} + sqrt(sigma2) ε_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorSpec {
    pub mean: f64,
    #[serde(default)]
    pub rho: f64,
    #[serde(default = "one")]
    pub sigma2: f64,
}

fn one() -> f64 {
    1.0
}

impl RegressorSpec {
    fn variance(&self) -> f64 {
        self.sigma2 / (1.0 - self.rho * self.rho)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default)]
    pub model: Model,
    pub segments: Vec<Segment>,
    #[serde(default)]
    pub regressors: Vec<RegressorSpec>,
    /// True coefficients; defaults to zeros.
    #[serde(default)]
    pub beta: Vec<f64>,
    /// Local-alternative offset added to the last coefficient as `d / √T`.
    #[serde(default)]
    pub d: f64,
}

impl DgpSpec {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let spec: DgpSpec = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    /// Location model with a single constant segment.
    pub fn stationary_ar1(rho: f64, sigma2: f64) -> Self {
        Self::location(vec![Segment {
            u_start: 0.0,
            u_end: 1.0,
            rho,
            sigma2,
            rho_end: None,
            sigma2_end: None,
        }])
    }

    /// Location model, `ρ ≡ 0`, innovation variance stepping from `s1` to `s2` at `at`.
    pub fn variance_break(s1: f64, s2: f64, at: f64) -> Self {
        Self::location(vec![
            Segment {
                u_start: 0.0,
                u_end: at,
                rho: 0.0,
                sigma2: s1,
                rho_end: None,
                sigma2_end: None,
            },
            Segment {
                u_start: at,
                u_end: 1.0,
                rho: 0.0,
                sigma2: s2,
                rho_end: None,
                sigma2_end: None,
            },
        ])
    }

    pub fn location(segments: Vec<Segment>) -> Self {
        Self {
            name: None,
            model: Model::Location,
            segments,
            regressors: Vec::new(),
            beta: Vec::new(),
            d: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::InvalidSpec("no error segments".into()));
        }
        let mut expect = 0.0;
        for s in &self.segments {
            if (s.u_start - expect).abs() > 1e-12 || !(s.u_end > s.u_start) {
                return Err(Error::InvalidSpec(format!(
                    "segments must tile [0, 1] in order; got [{}, {})",
                    s.u_start, s.u_end
                )));
            }
            expect = s.u_end;
            for rho in [Some(s.rho), s.rho_end].into_iter().flatten() {
                if !(rho.abs() < 1.0) {
                    return Err(Error::InvalidSpec(format!(
                        "|rho| = {} must be below 1",
                        rho.abs()
                    )));
                }
            }
            for s2 in [Some(s.sigma2), s.sigma2_end].into_iter().flatten() {
                if !(s2 > 0.0) {
                    return Err(Error::InvalidSpec(format!(
                        "sigma2 = {s2} must be positive"
                    )));
                }
            }
        }
        if (expect - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidSpec(format!(
                "segments end at {expect}, not 1"
            )));
        }
        match self.model {
            Model::Location if !self.regressors.is_empty() => {
                return Err(Error::InvalidSpec(
                    "location model takes no regressors".into(),
                ))
            }
            Model::Regression if self.regressors.is_empty() => {
                return Err(Error::InvalidSpec(
                    "regression model needs at least one regressor".into(),
                ))
            }
            _ => {}
        }
        for r in &self.regressors {
            if !(r.rho.abs() < 1.0) || !(r.sigma2 > 0.0) {
                return Err(Error::InvalidSpec(format!("invalid regressor {r:?}")));
            }
        }
        if !self.beta.is_empty() && self.beta.len() != self.p() {
            return Err(Error::InvalidSpec(format!(
                "beta has {} entries, model has {} coefficients",
                self.beta.len(),
                self.p()
            )));
        }
        Ok(())
    }

    /// Number of coefficients (all-ones column included).
    pub fn p(&self) -> usize {
        1 + self.regressors.len()
    }

    pub fn beta0(&self) -> DVector<f64> {
        if self.beta.is_empty() {
            DVector::zeros(self.p())
        } else {
            DVector::from_column_slice(&self.beta)
        }
    }

    fn segment_at(&self, u: f64) -> &Segment {
        let u = u.clamp(0.0, 1.0);
        self.segments
            .iter()
            .find(|s| u < s.u_end)
            .unwrap_or_else(|| self.segments.last().expect("validated"))
    }

    pub fn rho_at(&self, u: f64) -> f64 {
        self.segment_at(u).rho_at(u)
    }

    pub fn sigma2_at(&self, u: f64) -> f64 {
        self.segment_at(u).sigma2_at(u)
    }

    pub fn rho_max(&self) -> f64 {
        self.segments
            .iter()
            .flat_map(|s| [Some(s.rho), s.rho_end])
            .flatten()
            .map(f64::abs)
            .fold(0.0, f64::max)
    }

    pub fn burn_in(&self) -> usize {
        5 * (1.0 / (1.0 - self.rho_max())).ceil() as usize
    }

    fn error_lrv(rho: f64, sigma2: f64) -> f64 {
        sigma2 / ((1.0 - rho) * (1.0 - rho))
    }

    fn lrv_matrix(&self, rho: f64, sigma2: f64) -> DMatrix<f64> {
        let p = self.p();
        let oe = Self::error_lrv(rho, sigma2);
        let ge = sigma2 / (1.0 - rho * rho);
        let mut means = vec![1.0];
        means.extend(self.regressors.iter().map(|r| r.mean));
        let mut m = DMatrix::from_fn(p, p, |i, j| means[i] * means[j] * oe);
        for (i, r) in self.regressors.iter().enumerate() {
            // Σ_k γ_x(k) γ_e(k) for two independent AR(1) processes.
            let cross = r.variance() * ge * (1.0 + r.rho * rho) / (1.0 - r.rho * rho);
            m[(i + 1, i + 1)] += cross;
        }
        m
    }

    /// Ω(u) as a path (right-continuous at segment boundaries).
    pub fn variance_path(&self) -> VariancePath {
        let pieces = self
            .segments
            .iter()
            .map(|s| {
                let seg = s.clone();
                let me = self.clone();
                Piece {
                    u_start: s.u_start,
                    u_end: s.u_end,
                    eval: Arc::new(move |u| me.lrv_matrix(seg.rho_at(u), seg.sigma2_at(u))),
                    constant: s.is_constant(),
                }
            })
            .collect();
        VariancePath(MatrixPath::from_pieces(pieces).expect("validated segments"))
    }

    /// `E[x_t x_t′]`; regressors are stationary so `Q(u) ≡ Q̄`.
    pub fn regressor_moment(&self) -> DMatrix<f64> {
        let p = self.p();
        let mut means = vec![1.0];
        means.extend(self.regressors.iter().map(|r| r.mean));
        let mut q = DMatrix::from_fn(p, p, |i, j| means[i] * means[j]);
        for (i, r) in self.regressors.iter().enumerate() {
            q[(i + 1, i + 1)] += r.variance();
        }
        q
    }

    pub fn regressor_moment_path(&self) -> RegressorMomentPath {
        RegressorMomentPath::constant(self.regressor_moment())
            .expect("moment matrix is positive definite")
    }

    /// Exact covariance recursion of the error process over `t = 1..T`:
    /// returns the variances `v_t` and the AR coefficients `ρ_t`.
    fn error_moments(&self, t_len: usize) -> (Vec<f64>, Vec<f64>) {
        let tf = t_len as f64;
        let (r0, s0) = (self.rho_at(0.0), self.sigma2_at(0.0));
        let mut v = s0 / (1.0 - r0 * r0);
        let mut vs = Vec::with_capacity(t_len);
        let mut rhos = Vec::with_capacity(t_len);
        for t in 1..=t_len {
            let u = t as f64 / tf;
            let rho = self.rho_at(u);
            v = rho * rho * v + self.sigma2_at(u);
            vs.push(v);
            rhos.push(rho);
        }
        (vs, rhos)
    }

    /// Dense `T × T` autocovariance matrix of the errors `e_t`.
    pub fn error_autocov_matrix(&self, t_len: usize) -> Result<DMatrix<f64>> {
        if t_len > DENSE_CAP {
            return Err(Error::TooLarge {
                got: t_len,
                cap: DENSE_CAP,
            });
        }
        let (vs, rhos) = self.error_moments(t_len);
        let mut m = DMatrix::zeros(t_len, t_len);
        for s in 0..t_len {
            let mut c = vs[s];
            m[(s, s)] = c;
            for t in (s + 1)..t_len {
                c *= rhos[t];
                m[(t, s)] = c;
                m[(s, t)] = c;
            }
        }
        Ok(m)
    }
}

/// Simulated or ingested data `(y_t, x_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePath {
    pub y: DVector<f64>,
    /// `T × p` regressor matrix.
    pub x: DMatrix<f64>,
    pub seed: Option<u64>,
}

impl SamplePath {
    pub fn new(y: DVector<f64>, x: DMatrix<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::InvalidArgument(format!(
                "y has {} rows, x has {}",
                y.len(),
                x.nrows()
            )));
        }
        if y.len() < x.ncols() + 2 {
            return Err(Error::InvalidArgument(format!(
                "T = {} too short for p = {}",
                y.len(),
                x.ncols()
            )));
        }
        if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite value in sample".into()));
        }
        Ok(Self { y, x, seed: None })
    }

    /// Location model: `x_t ≡ 1`.
    pub fn location(y: Vec<f64>) -> Result<Self> {
        let t = y.len();
        Self::new(DVector::from_vec(y), DMatrix::from_element(t, 1, 1.0))
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Shift `y_t` by `x_{t,j} · delta`.
    pub fn shifted(&self, j: usize, delta: f64) -> Self {
        let mut out = self.clone();
        out.y += self.x.column(j) * delta;
        out
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string(), "y".to_string()];
        header.extend((1..=self.p()).map(|j| format!("x{j}")));
        wr.write_record(&header)?;
        for t in 0..self.len() {
            let mut rec = vec![(t + 1).to_string(), self.y[t].to_string()];
            rec.extend((0..self.p()).map(|j| self.x[(t, j)].to_string()));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers()?.clone();
        if header.len() < 3 || &header[0] != "t" || &header[1] != "y" {
            return Err(Error::InvalidArgument("expected header t,y,x1..xp".into()));
        }
        let p = header.len() - 2;
        let mut ys = Vec::new();
        let mut xs = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidArgument(format!("bad number `{s}`: {e}")))
            };
            ys.push(parse(&rec[1])?);
            for j in 0..p {
                xs.push(parse(&rec[2 + j])?);
            }
        }
        let t = ys.len();
        Self::new(DVector::from_vec(ys), DMatrix::from_row_slice(t, p, &xs))
    }

    pub fn to_csv_file(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn from_csv_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Draw a sample of length `T`; bit-identical for identical `(spec, T, seed)`.
pub fn simulate(spec: &DgpSpec, t_len: usize, seed: u64) -> Result<SamplePath> {
    spec.validate()?;
    if t_len < 10 {
        return Err(Error::InvalidArgument(format!(
            "T = {t_len} must be at least 10"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tf = t_len as f64;
    let burn = spec.burn_in();

    let (r0, s0) = (spec.rho_at(0.0), spec.sigma2_at(0.0));
    let mut e = (s0 / (1.0 - r0 * r0)).sqrt() * normal(&mut rng);
    for _ in 0..burn {
        e = r0 * e + s0.sqrt() * normal(&mut rng);
    }
    let mut errors = Vec::with_capacity(t_len);
    for t in 1..=t_len {
        let u = t as f64 / tf;
        e = spec.rho_at(u) * e + spec.sigma2_at(u).sqrt() * normal(&mut rng);
        errors.push(e);
    }

    let p = spec.p();
    let mut x = DMatrix::from_element(t_len, p, 1.0);
    for (j, r) in spec.regressors.iter().enumerate() {
        let mut z = r.variance().sqrt() * normal(&mut rng);
        for _ in 0..burn {
            z = r.rho * z + r.sigma2.sqrt() * normal(&mut rng);
        }
        for t in 0..t_len {
            z = r.rho * z + r.sigma2.sqrt() * normal(&mut rng);
            x[(t, j + 1)] = r.mean + z;
        }
    }

    let mut beta = spec.beta0();
    beta[p - 1] += spec.d / tf.sqrt();
    let y = &x * beta + DVector::from_vec(errors);
    let mut sample = SamplePath::new(y, x)?;
    sample.seed = Some(seed);
    Ok(sample)
}

/// `Ω(u)` of the score process `V_t = x_t e_t`.
pub fn true_local_lrv(spec: &DgpSpec, u: f64) -> Result<DMatrix<f64>> {
    spec.validate()?;
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::InvalidArgument(format!("u = {u} outside [0, 1]")));
    }
    let path = spec.variance_path();
    if path.0.is_discontinuity(u) {
        return Err(Error::BreakPoint(u));
    }
    Ok(path.omega(u))
}

/// `Ω = ∫₀¹ Ω(u) du`.
pub fn true_integrated_lrv(spec: &DgpSpec) -> Result<DMatrix<f64>> {
    spec.validate()?;
    Ok(spec.variance_path().integrated())
}

/// `Var(T^{-1/2} Σ_t V_t)` computed exactly from the covariance recursion.
pub fn exact_scaled_sum_variance(spec: &DgpSpec, t_len: usize) -> Result<DMatrix<f64>> {
    spec.validate()?;
    if t_len > DENSE_CAP {
        return Err(Error::TooLarge {
            got: t_len,
            cap: DENSE_CAP,
        });
    }
    let (vs, rhos) = spec.error_moments(t_len);
    let k = spec.regressors.len();
    // total = Σ_{t,s} Cov(e_t, e_s); lagged[i] = Σ_{t,s} Cov(e_t, e_s) ρ_i^{|t−s|}
    let mut total = 0.0;
    let mut lagged = vec![0.0; k];
    for (s, &v) in vs.iter().enumerate().take(t_len) {
        let mut c = v;
        total += c;
        for (i, _) in spec.regressors.iter().enumerate() {
            lagged[i] += c;
        }
        let mut pw: Vec<f64> = vec![1.0; k];
        for &rho in &rhos[s + 1..t_len] {
            c *= rho;
            if c == 0.0 && k == 0 {
                break;
            }
            total += 2.0 * c;
            for (i, r) in spec.regressors.iter().enumerate() {
                pw[i] *= r.rho;
                lagged[i] += 2.0 * c * pw[i];
            }
        }
    }
    let tf = t_len as f64;
    let p = spec.p();
    let mut means = vec![1.0];
    means.extend(spec.regressors.iter().map(|r| r.mean));
    let mut m = DMatrix::from_fn(p, p, |i, j| means[i] * means[j] * total / tf);
    for (i, r) in spec.regressors.iter().enumerate() {
        m[(i + 1, i + 1)] += r.variance() * lagged[i] / tf;
    }
    Ok(m)
}
