//! Wing calibration: least-squares fit of the small-strike smile, inversion to the
//! leading spectral data, and recovery of the volatility-of-volatility or Hurst index.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bs::bs_implied_vol;
use crate::error::{Error, Result};
use crate::model::{CovarianceKernel, MeanFunction};
use crate::scalar::Real;
use crate::spectrum::{nystrom_spectrum, ou_frequencies, DEFAULT_GRIDS};

/// Default window length in log-moneyness.
pub const WINDOW_LENGTH: f64 = 0.15;

/// Windows whose right end lies above this level get a regime warning.
pub const REGIME_EDGE: f64 = -0.7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlicePoint {
    pub k: f64,
    pub iv: f64,
}

/// Implied volatilities at a single maturity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IvSlice {
    #[serde(rename = "T")]
    pub maturity: f64,
    pub s0: f64,
    pub r: f64,
    pub points: Vec<SlicePoint>,
    #[serde(default)]
    pub source: String,
}

impl IvSlice {
    pub fn new(maturity: f64, s0: f64, r: f64, mut points: Vec<SlicePoint>, source: impl Into<String>) -> Result<IvSlice> {
        if !(maturity > 0.0 && s0 > 0.0 && r.is_finite()) {
            return Err(Error::Validation("slice needs T > 0, s0 > 0 and a finite rate".into()));
        }
        if let Some(p) = points.iter().find(|p| !(p.iv > 0.0 && p.iv.is_finite() && p.k.is_finite())) {
            return Err(Error::Validation(format!("invalid slice point k={}, iv={}", p.k, p.iv)));
        }
        points.sort_by(|a, b| a.k.total_cmp(&b.k));
        if points.windows(2).any(|w| w[0].k == w[1].k) {
            return Err(Error::Validation("slice log-moneyness values must be distinct".into()));
        }
        Ok(IvSlice { maturity, s0, r, points, source: source.into() })
    }

    /// Parses a CSV with header `k,iv` or `strike,price`. Prices are inverted to
    /// implied volatilities; points where inversion fails are dropped and counted in
    /// `source`.
    pub fn from_csv(text: &str, maturity: f64, s0: f64, r: f64, source: &str) -> Result<IvSlice> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let headers: Vec<String> = reader
            .headers()
            .map_err(|e| Error::Validation(format!("slice CSV: {e}")))?
            .iter()
            .map(|h| h.to_ascii_lowercase())
            .collect();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let (a, b, prices) = match (col("k"), col("iv"), col("strike"), col("price")) {
            (Some(a), Some(b), _, _) => (a, b, false),
            (_, _, Some(a), Some(b)) => (a, b, true),
            _ => return Err(Error::Validation("slice CSV needs columns k,iv or strike,price".into())),
        };
        let mut points = Vec::new();
        let mut dropped = 0usize;
        for (line, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::Validation(format!("slice CSV: {e}")))?;
            let field = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.parse::<f64>().ok())
                    .ok_or_else(|| Error::Validation(format!("slice CSV row {}: bad number", line + 2)))
            };
            // priced output leaves iv empty where it is undefined
            if !prices && rec.get(b).is_some_and(str::is_empty) {
                dropped += 1;
                continue;
            }
            let (x, y) = (field(a)?, field(b)?);
            if prices {
                let k = (x / s0).ln() - r * maturity;
                match bs_implied_vol(y, s0, x, maturity, r) {
                    Ok(iv) if iv > 0.0 => points.push(SlicePoint { k, iv }),
                    _ => dropped += 1,
                }
            } else {
                points.push(SlicePoint { k: x, iv: y });
            }
        }
        let source = if dropped > 0 {
            format!("{source} ({dropped} points without an implied volatility dropped)")
        } else {
            source.to_string()
        };
        IvSlice::new(maturity, s0, r, points, source)
    }

    fn in_window(&self, w: &FitWindow) -> Vec<SlicePoint> {
        self.points.iter().copied().filter(|p| p.k >= w.k_lo && p.k <= w.k_hi).collect()
    }
}

/// Closed log-moneyness interval in the small-strike wing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitWindow {
    pub k_lo: f64,
    pub k_hi: f64,
}

impl FitWindow {
    pub fn new(k_lo: f64, k_hi: f64) -> Result<FitWindow> {
        if !(k_lo < k_hi && k_hi < 0.0) {
            return Err(Error::Validation(format!("window needs k_lo < k_hi < 0, got [{k_lo}, {k_hi}]")));
        }
        Ok(FitWindow { k_lo, k_hi })
    }

    /// Window of the default length ending at `k_hi`.
    pub fn ending_at(k_hi: f64) -> Result<FitWindow> {
        FitWindow::new(k_hi - WINDOW_LENGTH, k_hi)
    }
}

/// Least-squares wing coefficients `iv ~ L sqrt(-k) + M`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WingFit {
    #[serde(rename = "L")]
    pub l: f64,
    #[serde(rename = "M")]
    pub m: f64,
    /// Root-mean-square residual.
    pub residual: f64,
    pub n_points: usize,
    pub warnings: Vec<String>,
}

pub fn fit_wing(slice: &IvSlice, window: &FitWindow) -> Result<WingFit> {
    let pts = slice.in_window(window);
    if pts.len() < 4 {
        return Err(Error::InsufficientData(format!(
            "{} points in [{}, {}], need at least 4",
            pts.len(),
            window.k_lo,
            window.k_hi
        )));
    }
    // centred normal equations for a two-term basis
    let n = pts.len() as f64;
    let xs: Vec<f64> = pts.iter().map(|p| (-p.k).sqrt()).collect();
    let xbar = xs.iter().sum::<f64>() / n;
    let ybar = pts.iter().map(|p| p.iv).sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - xbar).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&pts).map(|(x, p)| (x - xbar) * (p.iv - ybar)).sum();
    if sxx <= 0.0 {
        return Err(Error::InsufficientData("window points are degenerate".into()));
    }
    let l = sxy / sxx;
    let m = ybar - l * xbar;
    let residual = (xs.iter().zip(&pts).map(|(x, p)| (p.iv - l * x - m).powi(2)).sum::<f64>() / n).sqrt();
    let mut warnings = Vec::new();
    if l <= 0.0 {
        warnings.push(format!("degenerate fit: L = {l} is not positive"));
    }
    Ok(WingFit { l, m, residual, n_points: pts.len(), warnings })
}

/// `(lambda_1, delta_1)` from the wing coefficients; inverse of
/// [`crate::smile::corollary_coefficients`].
pub fn invert_wing<F: Real>(l: F, m: F, t: F) -> Result<(F, F)> {
    let four = F::lit(4.0);
    if !(l > F::zero()) || !(t > F::zero()) {
        return Err(Error::OutOfDomain(format!("need L > 0 and T > 0, got L = {l}, T = {t}")));
    }
    let u = t * t * l.powi(4);
    if !(u < four) {
        return Err(Error::OutOfDomain(format!(
            "T^2 L^4 = {u} must be below 4; no Gaussian model matches this wing"
        )));
    }
    let lambda1 = F::lit(64.0) * u / ((four - u) * (four - u));
    let delta1 = four * (F::lit(2.0) * t).sqrt() * m * (four + u).sqrt() / (four - u);
    Ok((lambda1, delta1))
}

/// Initial condition assumed for the Stein-Stein volatility.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SigmaStart {
    #[default]
    Stationary,
    Deterministic,
}

/// Leading OU frequency; with the initial variance tied to `sigma` it does not depend
/// on `sigma`, so a unit value is used.
pub fn leading_frequency(q: f64, t: f64, start: SigmaStart) -> Result<f64> {
    let sigma0 = match start {
        SigmaStart::Stationary => (0.5 / q).sqrt(),
        SigmaStart::Deterministic => 0.0,
    };
    Ok(ou_frequencies(q, 1.0, sigma0, t, 1)?.w[0])
}

/// `sigma = sqrt(lambda_1 (w_1^2 + q^2))`.
pub fn recover_sigma(lambda1: f64, q: f64, t: f64, start: SigmaStart) -> Result<f64> {
    if !(lambda1 > 0.0 && q > 0.0 && t > 0.0) {
        return Err(Error::Validation(format!("need lambda1, q, T > 0; got {lambda1}, {q}, {t}")));
    }
    let w = leading_frequency(q, t, start)?;
    Ok((lambda1 * (w * w + q * q)).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HurstRow {
    #[serde(rename = "H")]
    pub hurst: f64,
    pub lambda1: f64,
}

/// Leading eigenvalue of the stationary fractional OU kernel against `H`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HurstTable {
    pub q: f64,
    pub sigma: f64,
    #[serde(rename = "T")]
    pub maturity: f64,
    pub rows: Vec<HurstRow>,
}

impl HurstTable {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Numerical(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<HurstTable> {
        let t: HurstTable = serde_json::from_str(text).map_err(|e| Error::Validation(e.to_string()))?;
        if t.rows.is_empty() {
            return Err(Error::Validation("Hurst table has no rows".into()));
        }
        Ok(t)
    }
}

/// `H = 0.50, 0.51, ..., 0.99`.
pub fn default_hurst_grid() -> Vec<f64> {
    (50..100).map(|i| i as f64 / 100.0).collect()
}

pub fn build_hurst_table(q: f64, sigma: f64, t: f64, grid: &[f64]) -> Result<HurstTable> {
    if grid.is_empty() || grid.iter().any(|h| !(0.5..1.0).contains(h)) {
        return Err(Error::Validation("Hurst grid must be non-empty and inside [0.5, 1)".into()));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Validation("Hurst grid must be increasing".into()));
    }
    let mean = MeanFunction::Constant { level: 0.0 };
    let rows = grid
        .par_iter()
        .map(|&hurst| {
            let kernel = if hurst == 0.5 {
                CovarianceKernel::OuStationary { q, sigma }
            } else {
                CovarianceKernel::FouStationary { q, sigma, hurst }
            };
            let sp = nystrom_spectrum(&kernel, &mean, t, &DEFAULT_GRIDS, Some(1))?;
            Ok(HurstRow { hurst, lambda1: sp.eigenvalues[0] })
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(w) = rows.windows(2).find(|w| w[1].lambda1 >= w[0].lambda1) {
        return Err(Error::Numerical(format!(
            "Hurst table not decreasing between H = {} and H = {}",
            w[0].hurst, w[1].hurst
        )));
    }
    Ok(HurstTable { q, sigma, maturity: t, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HurstMatch {
    #[serde(rename = "H")]
    pub hurst: f64,
    pub table_lambda1: f64,
    pub warning: Option<String>,
}

/// Nearest table row; ties go to the smaller `H`.
pub fn recover_hurst(lambda1: f64, table: &HurstTable) -> Result<HurstMatch> {
    let mut best: Option<&HurstRow> = None;
    for row in &table.rows {
        let d = (row.lambda1 - lambda1).abs();
        best = match best {
            Some(b) => {
                let db = (b.lambda1 - lambda1).abs();
                if d < db || (d == db && row.hurst < b.hurst) {
                    Some(row)
                } else {
                    Some(b)
                }
            }
            None => Some(row),
        };
    }
    let row = best.ok_or_else(|| Error::Validation("Hurst table has no rows".into()))?;
    let lo = table.rows.iter().map(|r| r.lambda1).fold(f64::INFINITY, f64::min);
    let hi = table.rows.iter().map(|r| r.lambda1).fold(f64::NEG_INFINITY, f64::max);
    let warning = if lambda1 < 0.8 * lo || lambda1 > 1.2 * hi {
        Some(format!("lambda1 = {lambda1} is more than 20% outside the table range [{lo}, {hi}]"))
    } else {
        None
    };
    Ok(HurstMatch { hurst: row.hurst, table_lambda1: row.lambda1, warning })
}

/// `[iv(k) - (L sqrt(-k) + M)] sqrt(-k)` at each slice point inside the window.
pub fn bias_diagnostic(slice: &IvSlice, window: &FitWindow, l: f64, m: f64) -> Vec<(f64, f64)> {
    slice
        .in_window(window)
        .iter()
        .map(|p| {
            let r = (-p.k).sqrt();
            (p.k, (p.iv - (l * r + m)) * r)
        })
        .collect()
}

/// Which parameter to recover after inversion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CalibrationMode {
    SteinStein {
        q: f64,
        #[serde(default)]
        start: SigmaStart,
    },
    Fou {
        q: f64,
        sigma: f64,
        /// Built on demand when absent.
        #[serde(default)]
        table: Option<HurstTable>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recovered {
    pub parameter: String,
    pub value: f64,
    pub method: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub fit: WingFit,
    pub lambda1: f64,
    pub delta1: f64,
    pub recovered: Recovered,
    pub window: FitWindow,
    /// Pairs `(k, [iv - (L sqrt(-k) + M)] sqrt(-k))` against the fitted coefficients.
    pub bias: Vec<(f64, f64)>,
    pub warnings: Vec<String>,
}

pub fn calibrate_end_to_end(slice: &IvSlice, window: &FitWindow, mode: &CalibrationMode) -> Result<CalibrationReport> {
    let t = slice.maturity;
    let fit = fit_wing(slice, window).map_err(|e| e.at("fit_wing"))?;
    let (lambda1, delta1) = invert_wing(fit.l, fit.m, t).map_err(|e| e.at("invert_wing"))?;
    let mut warnings = fit.warnings.clone();
    if window.k_hi > REGIME_EDGE {
        warnings.push(format!(
            "window right end {} lies above {REGIME_EDGE}; the wing expansion may not be accurate there",
            window.k_hi
        ));
    }
    let recovered = match mode {
        CalibrationMode::SteinStein { q, start } => {
            let sigma = recover_sigma(lambda1, *q, t, *start).map_err(|e| e.at("recover_sigma"))?;
            Recovered {
                parameter: "sigma".into(),
                value: sigma,
                method: format!("sigma^2 = lambda1 (w1^2 + q^2), {start:?} start, q = {q}"),
            }
        }
        CalibrationMode::Fou { q, sigma, table } => {
            let built;
            let table = match table {
                Some(tb) => tb,
                None => {
                    built = build_hurst_table(*q, *sigma, t, &default_hurst_grid())
                        .map_err(|e| e.at("build_hurst_table"))?;
                    &built
                }
            };
            let hit = recover_hurst(lambda1, table).map_err(|e| e.at("recover_hurst"))?;
            if let Some(w) = &hit.warning {
                warnings.push(w.clone());
            }
            Recovered {
                parameter: "H".into(),
                value: hit.hurst,
                method: format!("nearest row of the lambda1 table (row lambda1 = {})", hit.table_lambda1),
            }
        }
    };
    let bias = bias_diagnostic(slice, window, fit.l, fit.m);
    Ok(CalibrationReport { fit, lambda1, delta1, recovered, window: *window, bias, warnings })
}

/// Leftmost window of the default length with at least four points, no point above
/// `k_max`, and no convexity flag. A window is flagged when a second divided
/// difference of `iv` in `k` exceeds three times the median absolute second divided
/// difference over the slice's negative-`k` points.
pub fn auto_window(slice: &IvSlice, k_max: f64) -> Result<FitWindow> {
    let neg: Vec<SlicePoint> = slice.points.iter().copied().filter(|p| p.k < 0.0).collect();
    let dd2 = |p: &[SlicePoint]| -> Vec<f64> {
        p.windows(3)
            .map(|w| {
                let d1 = (w[1].iv - w[0].iv) / (w[1].k - w[0].k);
                let d2 = (w[2].iv - w[1].iv) / (w[2].k - w[1].k);
                2.0 * (d2 - d1) / (w[2].k - w[0].k)
            })
            .collect()
    };
    let mut all: Vec<f64> = dd2(&neg).iter().map(|d| d.abs()).collect();
    if all.is_empty() {
        return Err(Error::InsufficientData("too few small-strike points for window selection".into()));
    }
    all.sort_by(f64::total_cmp);
    let threshold = 3.0 * all[all.len() / 2];
    for start in &neg {
        let w = match FitWindow::new(start.k, start.k + WINDOW_LENGTH) {
            Ok(w) if w.k_hi <= k_max => w,
            _ => continue,
        };
        let pts = slice.in_window(&w);
        if pts.len() >= 4 && dd2(&pts).iter().all(|d| *d <= threshold) {
            return Ok(w);
        }
    }
    Err(Error::InsufficientData("no admissible window in the small-strike wing".into()))
}
