//! Extreme-strike implied volatility expansions.
//!
//! For `|k| -> inf`, `I(k) = L sqrt|k| + M + c log|k| / sqrt|k| + O(|k|^{-1/2})` with
//! `c = (1 - n_1)/4`. Uncorrelated models are symmetric, `I(k) = I(-k)`, so the same
//! coefficients serve both wings.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::chaos::ChaosConstants;
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `K -> inf`, `k -> +inf`.
    LargeStrike,
    /// `K -> 0`, `k -> -inf`.
    SmallStrike,
}

/// Coefficients of the three-term wing expansion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Serialize + DeserializeOwned")]
pub struct WingExpansion<F> {
    #[serde(rename = "L")]
    pub l: F,
    #[serde(rename = "M")]
    pub m: F,
    pub loglog_coeff: F,
    pub direction: Direction,
    #[serde(rename = "T")]
    pub horizon: F,
    pub lambda1: F,
    pub n1: usize,
    pub delta: F,
    #[serde(rename = "B_tilde")]
    pub b_tilde: F,
    #[serde(rename = "C_tilde")]
    pub c_tilde: F,
}

/// `(L, M)` from `B_tilde`, `C_tilde` and `T`.
pub fn wing_coefficients<F: Real>(b_tilde: F, c_tilde: F, t: F) -> (F, F) {
    let root = (F::lit(8.0) * c_tilde + t).sqrt();
    let rt = t.sqrt();
    let plus = (root + rt).sqrt();
    let minus = (root - rt).sqrt();
    let l = (plus - minus) / t.powf(F::lit(0.75));
    let m = F::SQRT_2() * b_tilde / (rt * root.sqrt()) * (one_over(minus) - one_over(plus));
    (l, m)
}

fn one_over<F: Real>(x: F) -> F {
    F::one() / x
}

/// Wing expansion for the given tail constants.
pub fn wing_expansion<F: Real>(k: &ChaosConstants, horizon: F, direction: Direction) -> Result<WingExpansion<F>> {
    if !(horizon > F::zero()) {
        return Err(Error::Domain(format!("maturity must be positive, got {horizon}")));
    }
    let lambda1 = F::lit(k.lambda1);
    let delta = F::lit(k.delta);
    let c_tilde = horizon / (F::lit(2.0) * lambda1);
    let b_tilde = (delta * horizon / lambda1).sqrt();
    let (l, m) = wing_coefficients(b_tilde, c_tilde, horizon);
    Ok(WingExpansion {
        l,
        m,
        loglog_coeff: (F::one() - F::lit(k.n1 as f64)) / F::lit(4.0),
        direction,
        horizon,
        lambda1,
        n1: k.n1,
        delta,
        b_tilde,
        c_tilde,
    })
}

impl<F: Real> WingExpansion<F> {
    /// The same coefficients for the opposite wing.
    pub fn mirror(&self) -> WingExpansion<F> {
        let direction = match self.direction {
            Direction::LargeStrike => Direction::SmallStrike,
            Direction::SmallStrike => Direction::LargeStrike,
        };
        WingExpansion { direction, ..*self }
    }

    /// A note when `k` lies outside the asymptotic regime of this wing.
    pub fn validity_warning(&self, k: F) -> Option<String> {
        let one = F::one();
        match self.direction {
            Direction::LargeStrike if k <= one => {
                Some(format!("k = {k} is outside the large-strike regime k > 1"))
            }
            Direction::SmallStrike if k >= -one => {
                Some(format!("k = {k} is outside the small-strike regime k < -1"))
            }
            _ => None,
        }
    }
}

/// `L sqrt|k| + M + loglog_coeff log|k| / sqrt|k|`.
pub fn evaluate_wing<F: Real>(e: &WingExpansion<F>, k: F) -> Result<F> {
    let a = k.abs();
    if !(a > F::zero()) {
        return Err(Error::Domain("log-moneyness must be nonzero".into()));
    }
    let r = a.sqrt();
    Ok(e.l * r + e.m + e.loglog_coeff * a.ln() / r)
}

/// Closed-form `(L, M)` for a simple top eigenvalue.
pub fn corollary_coefficients<F: Real>(lambda1: F, delta1: F, t: F) -> (F, F) {
    let four = F::lit(4.0);
    let q = (four + lambda1).sqrt();
    let rl = lambda1.sqrt();
    let s = (q + rl).sqrt() + (q - rl).sqrt();
    let rt = t.sqrt();
    let l = F::lit(2.0) * lambda1.powf(F::lit(0.25)) / (rt * s);
    let m = F::SQRT_2() * delta1 / (rt * (four + lambda1).powf(F::lit(0.25)) * s);
    (l, m)
}

/// Tail exponent of the asset-price density, `-(3/2 + sqrt(8 C_tilde + T) / (2 sqrt T))`.
pub fn density_tail_exponent<F: Real>(c_tilde: F, t: F) -> F {
    -(F::lit(1.5) + (F::lit(8.0) * c_tilde + t).sqrt() / (F::lit(2.0) * t.sqrt()))
}

/// Log of the slowly varying factor of the asset-price density at log-moneyness `k > 0`:
/// `(n_1 - 3)/4 log k + B_tilde sqrt 2 / (T^{1/4} (8 C_tilde + T)^{1/4}) sqrt k`.
pub fn density_log_slowly_varying<F: Real>(e: &WingExpansion<F>, k: F) -> F {
    let n1 = F::lit(e.n1 as f64);
    let t = e.horizon;
    let coef = e.b_tilde * F::SQRT_2()
        / (t.powf(F::lit(0.25)) * (F::lit(8.0) * e.c_tilde + t).powf(F::lit(0.25)));
    (n1 - F::lit(3.0)) / F::lit(4.0) * k.ln() + coef * k.sqrt()
}

/// Implied volatility implied by a density tail `x^alpha h(x)`:
/// `sqrt(2/T) [ sqrt(k + u - log(u)/2) - sqrt(u - log(u)/2) ]` with
/// `u = -(alpha + 2) k - log h` and `k = log(K / (s0 e^{rT}))`.
pub fn folal_transfer<F: Real>(alpha: F, log_h: F, strike: F, t: F, s0: F, r: F) -> Result<F> {
    let k = (strike / (s0 * (r * t).exp())).ln();
    folal_transfer_log(alpha, log_h, k, t)
}

/// [`folal_transfer`] in terms of the log-moneyness `k`, usable where `K` itself overflows.
pub fn folal_transfer_log<F: Real>(alpha: F, log_h: F, k: F, t: F) -> Result<F> {
    let two = F::lit(2.0);
    if !(alpha < -two) {
        return Err(Error::Domain(format!("tail exponent must be below -2, got {alpha}")));
    }
    if !(k > F::zero()) {
        return Err(Error::Domain("strike must exceed the forward".into()));
    }
    let u = -(alpha + two) * k - log_h;
    if !(u > F::one()) {
        return Err(Error::Domain(format!("strike too close to the money for the transfer (u = {u})")));
    }
    let half_log_u = F::lit(0.5) * u.ln();
    let pref = (two / t).sqrt();
    Ok(pref * ((k + u - half_log_u).sqrt() - (u - half_log_u).sqrt()))
}

/// Leading coefficient `sqrt(2/T) (sqrt(-alpha - 1) - sqrt(-alpha - 2))` for a pure power tail.
pub fn power_tail_slope<F: Real>(alpha: F, t: F) -> F {
    (F::lit(2.0) / t).sqrt() * ((-alpha - F::one()).sqrt() - (-alpha - F::lit(2.0)).sqrt())
}

/// Least-squares fit of `(L, M)` to the transfer formula over `log K` in `[k_lo, k_hi]`,
/// with `log k / sqrt k` fixed at the expansion's coefficient and a free `1/sqrt k` term.
pub fn fit_transfer_coefficients(e: &WingExpansion<f64>, k_lo: f64, k_hi: f64, points: usize) -> Result<(f64, f64)> {
    let alpha = density_tail_exponent(e.c_tilde, e.horizon);
    let mut rows = Vec::with_capacity(points);
    let mut rhs = Vec::with_capacity(points);
    for i in 0..points {
        // geometric spacing in k
        let k = k_lo * (k_hi / k_lo).powf(i as f64 / (points - 1) as f64);
        let log_h = density_log_slowly_varying(e, k);
        let iv = folal_transfer_log(alpha, log_h, k, e.horizon)?;
        rows.push([k.sqrt(), 1.0, 1.0 / k.sqrt()]);
        rhs.push(iv - e.loglog_coeff * k.ln() / k.sqrt());
    }
    let a = nalgebra::DMatrix::from_fn(points, 3, |i, j| rows[i][j]);
    let b = nalgebra::DVector::from_vec(rhs);
    let sol = a
        .svd(true, true)
        .solve(&b, 1e-14)
        .map_err(|e| Error::Numerical(e.to_string()))?;
    Ok((sol[0], sol[1]))
}

/// One row of an asymptotic smile curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub k: f64,
    pub iv_asymptotic: f64,
}

/// Evaluates the wing on `ks`, skipping points where it is undefined.
pub fn wing_curve(e: &WingExpansion<f64>, ks: &[f64]) -> Vec<CurvePoint> {
    ks.iter()
        .filter_map(|&k| evaluate_wing(e, k).ok().map(|iv| CurvePoint { k, iv_asymptotic: iv }))
        .collect()
}

pub fn curve_to_csv(points: &[CurvePoint]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in points {
        w.serialize(p).map_err(|e| Error::Validation(format!("curve CSV: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Validation(format!("curve CSV: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Validation(format!("curve CSV: {e}")))
}

pub fn curve_from_csv(text: &str) -> Result<Vec<CurvePoint>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(|e| Error::Validation(format!("curve CSV: {e}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const T1: f64 = 1.0 / 12.0;

    fn inverse(l: f64, m: f64, t: f64) -> (f64, f64) {
        let u = t * t * l.powi(4);
        (64.0 * u / (4.0 - u).powi(2), 4.0 * (2.0 * t).sqrt() * m * (4.0 + u).sqrt() / (4.0 - u))
    }

    #[test]
    fn one_month_anchor() {
        let k = ChaosConstants::single_mode(0.00713, 0.0, T1).unwrap();
        let e: WingExpansion<f64> = wing_expansion(&k, T1, Direction::SmallStrike).unwrap();
        assert!((e.l - 0.71).abs() < 0.01, "{}", e.l);
        assert_eq!(e.m, 0.0);
        assert_eq!(e.loglog_coeff, 0.0);
        let (l1, _) = inverse(e.l, e.m, T1);
        assert_relative_eq!(l1, 0.00713, max_relative = 1e-10);
        // one-mode moment formula: L = sqrt(2/T) (sqrt(p) - sqrt(p - 1)), p = 1/2 + sqrt(1/4 + 1/lambda)
        let p = 0.5 + (0.25 + 1.0 / 0.00713_f64).sqrt();
        assert_relative_eq!(e.l, (2.0 / T1).sqrt() * (p.sqrt() - (p - 1.0).sqrt()), max_relative = 1e-12);
    }

    #[test]
    fn corollary_matches_general_formula() {
        let mut s = 99u64;
        let mut uni = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..50 {
            let l1 = 10f64.powf(-4.0 + 3.0 * uni());
            let d1 = 0.2 * uni();
            let t = 0.05 + uni();
            let k = ChaosConstants::single_mode(l1, d1, t).unwrap();
            let e: WingExpansion<f64> = wing_expansion(&k, t, Direction::LargeStrike).unwrap();
            let (l, m) = corollary_coefficients(l1, d1, t);
            assert_relative_eq!(l, e.l, max_relative = 1e-12);
            if d1 > 0.0 {
                assert_relative_eq!(m, e.m, max_relative = 1e-12);
            }
        }
        assert_eq!(corollary_coefficients(0.01, 0.0, 0.5).1, 0.0);
    }

    #[test]
    fn loglog_term_for_degenerate_top() {
        let mut k = ChaosConstants::single_mode(0.01, 0.0, 1.0).unwrap();
        k.n1 = 3;
        let e: WingExpansion<f64> = wing_expansion(&k, 1.0, Direction::LargeStrike).unwrap();
        assert_eq!(e.loglog_coeff, -0.5);
        let v = evaluate_wing(&e, 4.0).unwrap();
        assert_relative_eq!(v, e.l * 2.0 + e.m - 0.5 * 4f64.ln() / 2.0, max_relative = 1e-14);
        assert!(evaluate_wing(&e, 0.0).is_err());
    }

    #[test]
    fn mirrored_wings_agree() {
        let k = ChaosConstants::single_mode(0.005, 0.03, T1).unwrap();
        let e: WingExpansion<f64> = wing_expansion(&k, T1, Direction::LargeStrike).unwrap();
        let s = e.mirror();
        assert_eq!((e.l, e.m, e.loglog_coeff), (s.l, s.m, s.loglog_coeff));
        for kk in [1.5, 3.0, 10.0] {
            assert_eq!(evaluate_wing(&e, kk).unwrap(), evaluate_wing(&s, -kk).unwrap());
        }
        assert!(s.validity_warning(-0.8).is_some());
        assert!(s.validity_warning(-1.2).is_none());
    }

    #[test]
    fn generic_in_single_precision() {
        let (l, m) = corollary_coefficients(0.00713_f32, 0.01, 1.0 / 12.0);
        let (l64, m64) = corollary_coefficients(0.00713_f64, 0.01, T1);
        assert!((l as f64 - l64).abs() < 1e-5 && (m as f64 - m64).abs() < 1e-5);
    }

    #[test]
    fn pure_power_tail() {
        let alpha = -12.0_f64;
        let t = 0.5;
        let k: f64 = 1e6;
        let iv = folal_transfer_log(alpha, 0.0, k, t).unwrap();
        let lead = power_tail_slope(alpha, t) * k.sqrt();
        assert!((iv - lead).abs() / lead < 1e-4);
        assert!(folal_transfer(-2.0, 0.0, 10.0, t, 1.0, 0.0).is_err());
        let slopes: Vec<f64> = [-3.0, -5.0, -9.0, -20.0].iter().map(|&a| power_tail_slope(a, t)).collect();
        assert!(slopes.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn transfer_reproduces_wing_coefficients() {
        let sp = crate::spectrum::ou_spectrum(7.0, 1.2, (1.44_f64 / 14.0).sqrt(), 0.2, 0.2, T1, 256).unwrap();
        let k = crate::chaos::chaos_constants(&sp, T1).unwrap();
        let e: WingExpansion<f64> = wing_expansion(&k, T1, Direction::LargeStrike).unwrap();
        let (l, m) = fit_transfer_coefficients(&e, 1e4, 1e6, 41).unwrap();
        assert_relative_eq!(l, e.l, max_relative = 1e-3);
        assert_relative_eq!(m, e.m, max_relative = 1e-2);
        // error bound of the transfer versus the expansion shrinks like (log K)^{-1/2}
        let alpha = density_tail_exponent(e.c_tilde, e.horizon);
        let scaled: Vec<f64> = [10.0_f64, 20.0, 40.0]
            .iter()
            .map(|&kk| {
                let f = folal_transfer(alpha, density_log_slowly_varying(&e, kk), kk.exp(), T1, 1.0, 0.0).unwrap();
                (f - evaluate_wing(&e, kk).unwrap()).abs() * kk.sqrt()
            })
            .collect();
        assert!(scaled.iter().all(|v| *v < 2.0), "{scaled:?}");
    }

    proptest! {
        #[test]
        fn l_increases_with_lambda(a in 1e-4..0.5f64, b in 1e-4..0.5f64, t in 0.05..1.0f64) {
            prop_assume!((a - b).abs() > 1e-9);
            let (la, _) = corollary_coefficients(a, 0.0, t);
            let (lb, _) = corollary_coefficients(b, 0.0, t);
            prop_assert_eq!(a < b, la < lb);
        }

        #[test]
        fn l_sqrt_t_depends_on_lambda_only(l1 in 1e-4..0.5f64, t in 0.05..2.0f64, c in 0.2..5.0f64) {
            let (la, _) = corollary_coefficients(l1, 0.0, t);
            let (lb, _) = corollary_coefficients(l1, 0.0, c * c * t);
            prop_assert!((la * t.sqrt() - lb * c * t.sqrt()).abs() < 1e-12 * la * t.sqrt());
        }
    }
}
