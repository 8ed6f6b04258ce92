//! Gaussian volatility model specifications.
//!
//! The asset follows `dS = r S dt + |X_t| S dW_t` where `X` is a Gaussian
//! process with mean `m(t)` and covariance `Q(t, s)`, independent of `W`.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::{rising_exp_integral_scaled, upper_gamma_scaled};

/// Mean function of the volatility process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum MeanFunction {
    Constant { level: f64 },
    /// `m(t) = e^{-qt} m0 + (1 - e^{-qt}) m`.
    OuRelaxation { m0: f64, m: f64, q: f64 },
    /// Piecewise linear interpolation of `values` on `grid`.
    Tabulated { grid: Vec<f64>, values: Vec<f64> },
}

impl MeanFunction {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            MeanFunction::Constant { level } => *level,
            MeanFunction::OuRelaxation { m0, m, q } => {
                let e = (-q * t).exp();
                e * m0 + (1.0 - e) * m
            }
            MeanFunction::Tabulated { grid, values } => interp1(grid, values, t),
        }
    }

    /// True when the mean vanishes identically.
    pub fn is_zero(&self) -> bool {
        match self {
            MeanFunction::Constant { level } => *level == 0.0,
            MeanFunction::OuRelaxation { m0, m, .. } => *m0 == 0.0 && *m == 0.0,
            MeanFunction::Tabulated { values, .. } => values.iter().all(|v| *v == 0.0),
        }
    }

    fn validate(&self, horizon: f64) -> Result<()> {
        match self {
            MeanFunction::Constant { level } => finite("mean level", *level),
            MeanFunction::OuRelaxation { m0, m, q } => {
                finite("m0", *m0)?;
                finite("m", *m)?;
                positive("mean reversion q", *q)
            }
            MeanFunction::Tabulated { grid, values } => {
                if grid.len() != values.len() {
                    return Err(Error::Validation(
                        "tabulated mean: grid and values differ in length".into(),
                    ));
                }
                check_grid(grid, horizon)?;
                values.iter().try_for_each(|v| finite("tabulated mean value", *v))
            }
        }
    }
}

/// Covariance kernel of the volatility process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum CovarianceKernel {
    /// `scale^2 min(t, s)`.
    BrownianMotion { scale: f64 },
    /// `scale^2 (min(t, s) - t s / T)`.
    BrownianBridge { scale: f64 },
    /// OU process started at a deterministic point.
    OuDeterministicStart { q: f64, sigma: f64 },
    /// OU process whose initial value has standard deviation `sigma0`.
    OuRandomStart { q: f64, sigma: f64, sigma0: f64 },
    /// Stationary OU process.
    OuStationary { q: f64, sigma: f64 },
    /// Stationary OU process driven by fractional Brownian motion.
    FouStationary {
        q: f64,
        sigma: f64,
        #[serde(rename = "H", alias = "hurst")]
        hurst: f64,
    },
    /// Bilinear interpolation of `matrix[i][j] = Q(grid[i], grid[j])`.
    Tabulated { grid: Vec<f64>, matrix: Vec<Vec<f64>> },
}

impl CovarianceKernel {
    /// Evaluates `Q(t, s)` without range checks. `horizon` is only used by the bridge.
    pub fn eval(&self, t: f64, s: f64, horizon: f64) -> f64 {
        match self {
            CovarianceKernel::BrownianMotion { scale } => scale * scale * t.min(s),
            CovarianceKernel::BrownianBridge { scale } => {
                scale * scale * (t.min(s) - t * s / horizon)
            }
            CovarianceKernel::OuDeterministicStart { q, sigma } => {
                ou_random_start_cov(*q, *sigma, 0.0, t, s)
            }
            CovarianceKernel::OuRandomStart { q, sigma, sigma0 } => {
                ou_random_start_cov(*q, *sigma, *sigma0, t, s)
            }
            CovarianceKernel::OuStationary { q, sigma } => {
                sigma * sigma / (2.0 * q) * (-q * (t - s).abs()).exp()
            }
            CovarianceKernel::FouStationary { q, sigma, hurst } => {
                fou_autocovariance(*q, *sigma, *hurst, (t - s).abs())
            }
            CovarianceKernel::Tabulated { grid, matrix } => interp2(grid, matrix, t, s),
        }
    }

    /// Autocovariance as a function of lag, for stationary kernels.
    pub fn stationary_lag(&self) -> Option<Box<dyn Fn(f64) -> f64 + Send + Sync>> {
        match *self {
            CovarianceKernel::OuStationary { q, sigma } => {
                Some(Box::new(move |h: f64| sigma * sigma / (2.0 * q) * (-q * h.abs()).exp()))
            }
            CovarianceKernel::FouStationary { q, sigma, hurst } => {
                Some(Box::new(move |h: f64| fou_autocovariance(q, sigma, hurst, h.abs())))
            }
            _ => None,
        }
    }

    fn validate(&self, horizon: f64) -> Result<()> {
        match self {
            CovarianceKernel::BrownianMotion { scale } | CovarianceKernel::BrownianBridge { scale } => {
                non_negative("scale", *scale)
            }
            CovarianceKernel::OuDeterministicStart { q, sigma }
            | CovarianceKernel::OuStationary { q, sigma } => {
                positive("q", *q)?;
                non_negative("sigma", *sigma)
            }
            CovarianceKernel::OuRandomStart { q, sigma, sigma0 } => {
                positive("q", *q)?;
                non_negative("sigma", *sigma)?;
                if !(sigma0.is_finite() && *sigma0 >= 0.0) {
                    return Err(Error::Validation(format!("sigma0 must be >= 0, got {sigma0}")));
                }
                Ok(())
            }
            CovarianceKernel::FouStationary { q, sigma, hurst } => {
                positive("q", *q)?;
                non_negative("sigma", *sigma)?;
                if !(*hurst > 0.5 && *hurst < 1.0) {
                    return Err(Error::Validation(format!(
                        "Hurst parameter must lie in (0.5, 1), got {hurst}"
                    )));
                }
                Ok(())
            }
            CovarianceKernel::Tabulated { grid, matrix } => {
                check_grid(grid, horizon)?;
                let n = grid.len();
                if matrix.len() != n || matrix.iter().any(|row| row.len() != n) {
                    return Err(Error::Validation("tabulated kernel matrix must be square".into()));
                }
                let m = DMatrix::from_fn(n, n, |i, j| matrix[i][j]);
                if m.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Validation("tabulated kernel has non-finite entries".into()));
                }
                let scale = m.amax();
                for i in 0..n {
                    for j in 0..i {
                        if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * scale.max(1e-300) {
                            return Err(Error::Validation("tabulated kernel is not symmetric".into()));
                        }
                    }
                }
                let eig = SymmetricEigen::new(m);
                let min = eig.eigenvalues.min();
                let max = eig.eigenvalues.max();
                if min < -1e-10 * max.max(0.0) {
                    return Err(Error::Validation(format!(
                        "tabulated kernel is not positive semidefinite (eigenvalue {min:e})"
                    )));
                }
                Ok(())
            }
        }
    }
}

/// A Gaussian volatility model with maturity, rate and spot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub mean: MeanFunction,
    pub kernel: CovarianceKernel,
    #[serde(rename = "T", alias = "maturity")]
    pub maturity: f64,
    #[serde(default)]
    pub r: f64,
    #[serde(default = "unit_spot")]
    pub s0: f64,
}

fn unit_spot() -> f64 {
    1.0
}

impl ModelSpec {
    /// Stein-Stein model with a stationary OU volatility of mean `m`.
    pub fn stein_stein(m: f64, q: f64, sigma: f64, maturity: f64) -> ModelSpec {
        ModelSpec {
            mean: MeanFunction::Constant { level: m },
            kernel: CovarianceKernel::OuStationary { q, sigma },
            maturity,
            r: 0.0,
            s0: 1.0,
        }
    }

    /// Stationary fractional OU volatility of mean `m`.
    pub fn fractional_ou(m: f64, q: f64, sigma: f64, hurst: f64, maturity: f64) -> ModelSpec {
        let kernel = if hurst == 0.5 {
            CovarianceKernel::OuStationary { q, sigma }
        } else {
            CovarianceKernel::FouStationary { q, sigma, hurst }
        };
        ModelSpec {
            mean: MeanFunction::Constant { level: m },
            kernel,
            maturity,
            r: 0.0,
            s0: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        positive("maturity T", self.maturity)?;
        positive("spot s0", self.s0)?;
        finite("rate r", self.r)?;
        self.mean.validate(self.maturity)?;
        self.kernel.validate(self.maturity)?;
        if let (
            CovarianceKernel::OuStationary { .. } | CovarianceKernel::FouStationary { .. },
            MeanFunction::OuRelaxation { m0, m, .. },
        ) = (&self.kernel, &self.mean)
        {
            if m0 != m {
                return Err(Error::Validation(
                    "a stationary kernel requires a constant mean (m0 = m)".into(),
                ));
            }
        }
        Ok(())
    }

    /// `Q(t, s)` for `0 <= t, s <= T`.
    pub fn evaluate_kernel(&self, t: f64, s: f64) -> Result<f64> {
        let in_range = |x: f64| (0.0..=self.maturity).contains(&x);
        if !in_range(t) || !in_range(s) {
            return Err(Error::Domain(format!(
                "kernel evaluated at ({t}, {s}) outside [0, {}]",
                self.maturity
            )));
        }
        Ok(self.kernel.eval(t, s, self.maturity))
    }

    /// `1 / (2 max_t Q(t, t))`; exponential moments of integrated variance below
    /// this level are finite, which makes the discounted price a martingale.
    pub fn martingale_delta_bound(&self) -> Result<f64> {
        let n = 1001;
        let mut max = 0.0_f64;
        for i in 0..n {
            let t = self.maturity * i as f64 / (n - 1) as f64;
            let v = self.kernel.eval(t, t, self.maturity);
            if !v.is_finite() {
                return Err(Error::Validation(format!("kernel variance not finite at t = {t}")));
            }
            max = max.max(v);
        }
        if max <= 0.0 {
            return Err(Error::Validation("kernel variance vanishes on [0, T]".into()));
        }
        Ok(1.0 / (2.0 * max))
    }

    /// `m(t)`.
    pub fn mean_at(&self, t: f64) -> f64 {
        self.mean.eval(t)
    }
}

/// OU covariance with initial standard deviation `sigma0`:
/// `e^{-q(t+s)} (sigma0^2 + sigma^2/(2q) (e^{2q min(t,s)} - 1))`.
pub fn ou_random_start_cov(q: f64, sigma: f64, sigma0: f64, t: f64, s: f64) -> f64 {
    let lo = t.min(s);
    let hi = t.max(s);
    // rewritten to avoid overflow of e^{2q min}
    let a = (-q * (t + s)).exp() * sigma0 * sigma0;
    let b = sigma * sigma / (2.0 * q) * ((-q * (hi - lo)).exp() - (-q * (t + s)).exp());
    a + b
}

/// Autocovariance at lag `h` of the stationary fractional OU process
/// `X_t = sigma integral_{-inf}^t e^{-q(t-u)} dB^H_u`.
pub fn fou_autocovariance(q: f64, sigma: f64, hurst: f64, h: f64) -> f64 {
    let h = h.abs();
    if (hurst - 0.5).abs() < 1e-12 {
        return sigma * sigma / (2.0 * q) * (-q * h).exp();
    }
    let a = 2.0 * hurst - 1.0;
    let g = libm::tgamma(2.0 * hurst);
    let pref = 0.5 * sigma * sigma * hurst * q.powf(-2.0 * hurst);
    let x = q * h;
    if x == 0.0 {
        return 2.0 * pref * g;
    }
    let lower = (-x).exp() * g + a * rising_exp_integral_scaled(a, x);
    // e^x Gamma(2H) Q(a, x) = a e^x Gamma(a, x)
    let upper = a * upper_gamma_scaled(a, x);
    pref * (lower + upper)
}

/// `Cov(X_0, B^H_b - B^H_a)` for the stationary fractional OU process and `0 <= a <= b`:
/// `sigma H (F(b) - F(a))` with `F(x) = integral_0^inf e^{-qw} (x + w)^{2H-1} dw
/// = q^{-2H} e^{qx} Gamma(2H, qx)`. Zero when `H = 1/2`.
pub fn fou_start_increment_cov(q: f64, sigma: f64, hurst: f64, a: f64, b: f64) -> f64 {
    if (hurst - 0.5).abs() < 1e-12 {
        return 0.0;
    }
    let f = |x: f64| q.powf(-2.0 * hurst) * upper_gamma_scaled(2.0 * hurst, q * x);
    sigma * hurst * (f(b) - f(a))
}

/// Stationary variance of the fractional OU process, `sigma^2 H Gamma(2H) q^{-2H}`.
pub fn fou_variance(q: f64, sigma: f64, hurst: f64) -> f64 {
    sigma * sigma * hurst * libm::tgamma(2.0 * hurst) * q.powf(-2.0 * hurst)
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Validation(format!("{name} must be positive and finite, got {v}")))
    }
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::Validation(format!("{name} must be non-negative and finite, got {v}")))
    }
}

fn finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Validation(format!("{name} must be finite, got {v}")))
    }
}

fn check_grid(grid: &[f64], horizon: f64) -> Result<()> {
    if grid.len() < 2 {
        return Err(Error::Validation("tabulated grid needs at least two points".into()));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Validation("tabulated grid must be strictly increasing".into()));
    }
    let tol = 1e-12 * horizon;
    if grid[0] > tol || grid[grid.len() - 1] < horizon - tol {
        return Err(Error::Validation(format!("tabulated grid must cover [0, {horizon}]")));
    }
    Ok(())
}

/// Index `i` and weight `w` such that `x` lies between `grid[i]` and `grid[i+1]`.
fn bracket(grid: &[f64], x: f64) -> (usize, f64) {
    let n = grid.len();
    let i = match grid.partition_point(|g| *g <= x) {
        0 => 0,
        p if p >= n => n - 2,
        p => p - 1,
    };
    let w = ((x - grid[i]) / (grid[i + 1] - grid[i])).clamp(0.0, 1.0);
    (i, w)
}

fn interp1(grid: &[f64], values: &[f64], x: f64) -> f64 {
    let (i, w) = bracket(grid, x);
    (1.0 - w) * values[i] + w * values[i + 1]
}

fn interp2(grid: &[f64], m: &[Vec<f64>], t: f64, s: f64) -> f64 {
    let (i, a) = bracket(grid, t);
    let (j, b) = bracket(grid, s);
    (1.0 - a) * ((1.0 - b) * m[i][j] + b * m[i][j + 1])
        + a * ((1.0 - b) * m[i + 1][j] + b * m[i + 1][j + 1])
}
