//! Lag kernels, time-smoothing kernels, and the doubly demeaned kernel.
//!
//! Lag kernels weight sample autocovariances (`K(0) = 1`, symmetric, bounded
//! by one in absolute value). Time kernels are densities on `[0, 1]`,
//! symmetric about `1/2`, used to localize autocovariances in rescaled time.
//! All kernel objects are plain `Copy` values and safe to share across threads.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quad;

const QUAD_TOL: f64 = 1e-10;

/// QS kernel argument scale: `K_QS(x) = k(a x)` with `a = 6π/5`.
const QS_SCALE: f64 = 6.0 * PI / 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LagKernel {
    Bartlett,
    Parzen,
    #[serde(rename = "qs", alias = "quadratic-spectral")]
    QuadraticSpectral,
    TukeyHanning,
    Truncated,
}

impl LagKernel {
    pub const ALL: [LagKernel; 5] = [
        LagKernel::Bartlett,
        LagKernel::Parzen,
        LagKernel::QuadraticSpectral,
        LagKernel::TukeyHanning,
        LagKernel::Truncated,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LagKernel::Bartlett => "bartlett",
            LagKernel::Parzen => "parzen",
            LagKernel::QuadraticSpectral => "qs",
            LagKernel::TukeyHanning => "tukey-hanning",
            LagKernel::Truncated => "truncated",
        }
    }

    /// Positive semidefinite on the real line (usable for fixed-b estimation).
    pub fn psd(self) -> bool {
        matches!(
            self,
            LagKernel::Bartlett | LagKernel::Parzen | LagKernel::QuadraticSpectral
        )
    }

    /// `K''` exists and is continuous on `[-1, 1]`.
    pub fn twice_differentiable(self) -> bool {
        matches!(
            self,
            LagKernel::Parzen | LagKernel::QuadraticSpectral | LagKernel::TukeyHanning
        )
    }

    /// Half-width of the support, `None` for infinite support.
    pub fn support(self) -> Option<f64> {
        match self {
            LagKernel::QuadraticSpectral => None,
            _ => Some(1.0),
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        let ax = x.abs();
        match self {
            LagKernel::Bartlett => {
                if ax <= 1.0 {
                    1.0 - ax
                } else {
                    0.0
                }
            }
            LagKernel::Parzen => {
                if ax <= 0.5 {
                    1.0 - 6.0 * ax * ax + 6.0 * ax * ax * ax
                } else if ax <= 1.0 {
                    2.0 * (1.0 - ax).powi(3)
                } else {
                    0.0
                }
            }
            LagKernel::QuadraticSpectral => qs_value(QS_SCALE * ax),
            LagKernel::TukeyHanning => {
                if ax <= 1.0 {
                    0.5 * (1.0 + (PI * ax).cos())
                } else {
                    0.0
                }
            }
            LagKernel::Truncated => {
                if ax < 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Analytic second derivative.
    ///
    /// Tukey-Hanning uses the limit from inside the support at `|x| = 1`.
    pub fn eval_dd(self, x: f64) -> Result<f64> {
        let ax = x.abs();
        match self {
            LagKernel::Bartlett | LagKernel::Truncated => {
                Err(Error::UnsupportedKernel(self.name()))
            }
            LagKernel::Parzen => Ok(if ax <= 0.5 {
                -12.0 + 36.0 * ax
            } else if ax <= 1.0 {
                12.0 * (1.0 - ax)
            } else {
                0.0
            }),
            LagKernel::QuadraticSpectral => Ok(QS_SCALE * QS_SCALE * qs_second(QS_SCALE * ax)),
            LagKernel::TukeyHanning => Ok(if ax <= 1.0 {
                -0.5 * PI * PI * (PI * ax).cos()
            } else {
                0.0
            }),
        }
    }

    /// Parzen characteristic exponent `q0`; `None` for the truncated kernel,
    /// where `1 - K(x)` vanishes identically near the origin.
    pub fn parzen_exponent(self) -> Option<u32> {
        match self {
            LagKernel::Bartlett => Some(1),
            LagKernel::Parzen | LagKernel::QuadraticSpectral | LagKernel::TukeyHanning => Some(2),
            LagKernel::Truncated => None,
        }
    }

    /// `∫_{-∞}^{∞} |K(x)| dx`.
    pub fn abs_integral(self) -> f64 {
        match self {
            LagKernel::Bartlett => 1.0,
            LagKernel::Parzen => 0.75,
            LagKernel::TukeyHanning => 1.0,
            LagKernel::Truncated => 2.0,
            LagKernel::QuadraticSpectral => {
                static QS_ABS: OnceLock<f64> = OnceLock::new();
                *QS_ABS.get_or_init(qs_abs_integral)
            }
        }
    }

    /// Points in `x >= 0` where the kernel or one of its low derivatives is
    /// not smooth (used to seed quadrature panels).
    fn kinks(self) -> &'static [f64] {
        match self {
            LagKernel::Bartlett | LagKernel::TukeyHanning | LagKernel::Truncated => &[0.0, 1.0],
            LagKernel::Parzen => &[0.0, 0.5, 1.0],
            LagKernel::QuadraticSpectral => &[0.0],
        }
    }
}

impl fmt::Display for LagKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LagKernel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bartlett" => Ok(LagKernel::Bartlett),
            "parzen" => Ok(LagKernel::Parzen),
            "qs" | "quadratic-spectral" => Ok(LagKernel::QuadraticSpectral),
            "tukey-hanning" => Ok(LagKernel::TukeyHanning),
            "truncated" => Ok(LagKernel::Truncated),
            _ => Err(Error::UnknownKernel(s.to_string())),
        }
    }
}

pub fn eval_lag_kernel(k: LagKernel, x: f64) -> f64 {
    k.eval(x)
}

pub fn eval_lag_kernel_dd(k: LagKernel, x: f64) -> Result<f64> {
    k.eval_dd(x)
}

pub fn parzen_exponent(k: LagKernel) -> Option<u32> {
    k.parzen_exponent()
}

/// `T²[(K((m+1)/T) − K(m/T)) − (K(m/T) − K((m−1)/T))]` with `m = ⌊Tr⌋`.
pub fn discrete_second_difference(k: LagKernel, t: usize, r: f64) -> Result<f64> {
    if !k.twice_differentiable() {
        return Err(Error::UnsupportedKernel(k.name()));
    }
    if t < 3 {
        return Err(Error::InvalidArgument(format!(
            "T = {t} must be at least 3"
        )));
    }
    let tf = t as f64;
    let m = (tf * r).floor();
    let at = |j: f64| k.eval(j / tf);
    Ok(tf * tf * ((at(m + 1.0) - at(m)) - (at(m) - at(m - 1.0))))
}

// QS in the scaled variable z = a x: k(z) = 3 (sin z − z cos z) / z³.
fn qs_series_coef(j: usize) -> f64 {
    // 3 (−1)^j 2(j+1) / (2j+3)!
    let mut fact = 1.0;
    for i in 2..=(2 * j + 3) {
        fact *= i as f64;
    }
    let sign = if j.is_multiple_of(2) { 1.0 } else { -1.0 };
    3.0 * sign * 2.0 * (j as f64 + 1.0) / fact
}

fn qs_value(z: f64) -> f64 {
    if z < 0.5 {
        let z2 = z * z;
        let mut acc = 0.0;
        let mut pow = 1.0;
        for j in 0..10 {
            acc += qs_series_coef(j) * pow;
            pow *= z2;
        }
        acc
    } else {
        3.0 * (z.sin() - z * z.cos()) / (z * z * z)
    }
}

fn qs_second(z: f64) -> f64 {
    if z < 1.0 {
        let z2 = z * z;
        let mut acc = 0.0;
        let mut pow = 1.0;
        for j in 1..12 {
            let jf = j as f64;
            acc += qs_series_coef(j) * 2.0 * jf * (2.0 * jf - 1.0) * pow;
            pow *= z2;
        }
        acc
    } else {
        let (s, c) = z.sin_cos();
        let z3 = z * z * z;
        let z5 = z3 * z * z;
        3.0 * ((s + z * c) / z3 - 6.0 * s / z3 + 12.0 * (s - z * c) / z5)
    }
}

fn qs_abs_integral() -> f64 {
    // Integrate |k(z)| between consecutive zeros (roots of tan z = z), then add
    // the asymptotic tail 3 (2/π) / Z of |3 cos z / z²|.
    let mut zeros = vec![0.0];
    for j in 1..=2000 {
        let mut z = (j as f64 + 0.5) * PI - 1.0 / ((j as f64 + 0.5) * PI);
        for _ in 0..50 {
            let f = z.sin() - z * z.cos();
            let df = z * z.sin();
            let step = f / df;
            z -= step;
            if step.abs() < 1e-15 * z {
                break;
            }
        }
        zeros.push(z);
    }
    let mut total = 0.0;
    for w in zeros.windows(2) {
        total += quad::integrate(|z| qs_value(z).abs(), w[0], w[1], 1e-13);
    }
    let zmax = *zeros.last().expect("nonempty");
    total += 6.0 / (PI * zmax);
    2.0 * total / QS_SCALE
}

/// A lag kernel rescaled to bandwidth `b ∈ (0, 1]`: `K_b(x) = K(x / b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandwidthedKernel {
    pub base: LagKernel,
    pub b: f64,
}

impl BandwidthedKernel {
    pub fn new(base: LagKernel, b: f64) -> Result<Self> {
        if !(b > 0.0 && b <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "bandwidth b = {b} outside (0, 1]"
            )));
        }
        Ok(Self { base, b })
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.base.eval(x / self.b)
    }

    pub fn eval_dd(&self, x: f64) -> Result<f64> {
        Ok(self.base.eval_dd(x / self.b)? / (self.b * self.b))
    }

    /// Quadrature breakpoints for `x ↦ K_b(x)` restricted to `[lo, hi]`:
    /// kernel kinks plus panels of width `b/2` to tame QS oscillation.
    fn breakpoints(&self, lo: f64, hi: f64) -> Vec<f64> {
        let mut pts: Vec<f64> = Vec::new();
        for &k in self.base.kinks() {
            pts.push(k * self.b);
            pts.push(-k * self.b);
        }
        let step = 0.5 * self.b;
        let mut x = step;
        while x < hi.abs().max(lo.abs()) {
            pts.push(x);
            pts.push(-x);
            x += step;
        }
        pts.retain(|p| *p > lo && *p < hi);
        pts
    }

    /// `∫₀¹ K_b(r − t) dt`.
    pub fn row_integral(&self, r: f64) -> f64 {
        if self.base == LagKernel::Bartlett {
            let b = self.b;
            let g = |a: f64| {
                if a >= b {
                    0.5 * b
                } else {
                    a - a * a / (2.0 * b)
                }
            };
            return g(r) + g(1.0 - r);
        }
        // Substitute x = r − t ∈ [r − 1, r].
        let (lo, hi) = (r - 1.0, r);
        let br = self.breakpoints(lo, hi);
        quad::integrate_with_breaks(|x| self.eval(x), lo, hi, &br, QUAD_TOL)
    }

    /// `∫₀¹∫₀¹ K_b(t − τ) dt dτ = 2∫₀¹ (1 − x) K_b(x) dx`.
    pub fn double_integral(&self) -> f64 {
        if self.base == LagKernel::Bartlett {
            let b = self.b;
            return b - b * b / 3.0;
        }
        let br = self.breakpoints(0.0, 1.0);
        2.0 * quad::integrate_with_breaks(|x| (1.0 - x) * self.eval(x), 0.0, 1.0, &br, QUAD_TOL)
    }
}

/// The doubly demeaned kernel
/// `K_b*(r, s) = K_b(r − s) − ∫K_b(r − t)dt − ∫K_b(τ − s)dτ + ∫∫K_b(t − τ)dtdτ`
/// with the double integral computed once at construction.
#[derive(Debug, Clone, Copy)]
pub struct DemeanedKernel {
    kernel: BandwidthedKernel,
    double_integral: f64,
}

impl DemeanedKernel {
    pub fn new(kernel: BandwidthedKernel) -> Self {
        Self {
            kernel,
            double_integral: kernel.double_integral(),
        }
    }

    pub fn kernel(&self) -> BandwidthedKernel {
        self.kernel
    }

    pub fn double_integral(&self) -> f64 {
        self.double_integral
    }

    pub fn row_integral(&self, r: f64) -> f64 {
        self.kernel.row_integral(r)
    }

    pub fn eval(&self, r: f64, s: f64) -> f64 {
        self.kernel.eval(r - s) - self.kernel.row_integral(r) - self.kernel.row_integral(s)
            + self.double_integral
    }

    /// Evaluate with precomputed row integrals (hot loops over grids).
    #[inline]
    pub fn eval_with_rows(&self, r: f64, s: f64, row_r: f64, row_s: f64) -> f64 {
        self.kernel.eval(r - s) - row_r - row_s + self.double_integral
    }

    /// `K_b*(s, s)`.
    pub fn diagonal(&self, s: f64) -> f64 {
        1.0 - 2.0 * self.kernel.row_integral(s) + self.double_integral
    }
}

pub fn demeaned_kernel(k: BandwidthedKernel, r: f64, s: f64) -> f64 {
    DemeanedKernel::new(k).eval(r, s)
}

/// Time-smoothing kernels: densities on `[0, 1]` symmetric about `1/2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeKernel {
    Uniform,
    Triangular,
    /// Biweight (squared Epanechnikov) shape.
    Quartic,
}

impl TimeKernel {
    pub const ALL: [TimeKernel; 3] = [
        TimeKernel::Uniform,
        TimeKernel::Triangular,
        TimeKernel::Quartic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TimeKernel::Uniform => "uniform",
            TimeKernel::Triangular => "triangular",
            TimeKernel::Quartic => "quartic",
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        if !(0.0..=1.0).contains(&x) {
            return 0.0;
        }
        match self {
            TimeKernel::Uniform => 1.0,
            TimeKernel::Triangular => {
                if x <= 0.5 {
                    4.0 * x
                } else {
                    4.0 * (1.0 - x)
                }
            }
            TimeKernel::Quartic => {
                let z = 2.0 * x - 1.0;
                let w = 1.0 - z * z;
                1.875 * w * w
            }
        }
    }
}

impl fmt::Display for TimeKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TimeKernel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" => Ok(TimeKernel::Uniform),
            "triangular" => Ok(TimeKernel::Triangular),
            "quartic" => Ok(TimeKernel::Quartic),
            _ => Err(Error::UnknownKernel(s.to_string())),
        }
    }
}
