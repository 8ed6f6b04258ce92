//! Black-Scholes prices and implied volatility.

use crate::error::{Error, Result};
use crate::scalar::{norm_cdf, norm_pdf, Real};

/// Undiscounted out-of-the-money price per unit forward at log-moneyness `k` and
/// total volatility `v = sigma sqrt(T)`: the call for `k >= 0`, the put otherwise.
pub fn normalized_otm<F: Real>(k: F, v: F) -> F {
    let zero = F::zero();
    if v <= zero {
        return zero;
    }
    let half = F::lit(0.5);
    let d1 = -k / v + half * v;
    let d2 = d1 - v;
    if k >= zero {
        norm_cdf(d1) - k.exp() * norm_cdf(d2)
    } else {
        k.exp() * norm_cdf(-d2) - norm_cdf(-d1)
    }
}

/// European call price.
pub fn bs_call<F: Real>(s0: F, strike: F, sigma: F, t: F, r: F) -> F {
    let df = (-r * t).exp();
    let fwd = s0 / df;
    let k = (strike / fwd).ln();
    let v = sigma * t.sqrt();
    let otm = normalized_otm(k, v);
    let intrinsic = (s0 - strike * df).max(F::zero());
    if k >= F::zero() {
        df * fwd * otm
    } else {
        // put-call parity on the out-of-the-money put
        intrinsic + df * fwd * otm
    }
}

/// European put price.
pub fn bs_put<F: Real>(s0: F, strike: F, sigma: F, t: F, r: F) -> F {
    let df = (-r * t).exp();
    let fwd = s0 / df;
    let k = (strike / fwd).ln();
    let v = sigma * t.sqrt();
    let otm = normalized_otm(k, v);
    if k < F::zero() {
        df * fwd * otm
    } else {
        (strike * df - s0).max(F::zero()) + df * fwd * otm
    }
}

/// Sensitivity of the call price to `sigma`.
pub fn bs_vega<F: Real>(s0: F, strike: F, sigma: F, t: F, r: F) -> F {
    let df = (-r * t).exp();
    let fwd = s0 / df;
    let v = sigma * t.sqrt();
    let d1 = -(strike / fwd).ln() / v + F::lit(0.5) * v;
    s0 * norm_pdf(d1) * t.sqrt()
}

/// Total implied volatility `v` from a normalized out-of-the-money price.
///
/// Newton iteration on `log price` inside a shrinking bracket, with bisection when a
/// step leaves the bracket. The starting point is a Corrado-Miller style estimate.
pub fn implied_total_vol_otm<F: Real>(k: F, price: F) -> Result<F> {
    let zero = F::zero();
    let one = F::one();
    let upper = if k >= zero { one } else { k.exp() };
    if !(price > zero && price < upper) {
        return Err(Error::UndefinedIv(format!(
            "normalized price {price} outside (0, {upper}) at k = {k}"
        )));
    }
    let target = price.ln();
    let tol = F::epsilon() * F::lit(64.0);
    // call-equivalent price for the guess
    let call = if k >= zero { price } else { price + one - k.exp() };
    let x = k.exp();
    let a = call - (one - x) * F::lit(0.5);
    let disc = a * a - (one - x).powi(2) / F::PI();
    let two_pi_sqrt = (F::lit(2.0) * F::PI()).sqrt();
    let mut v = if disc > zero {
        two_pi_sqrt / (one + x) * (a + disc.sqrt())
    } else {
        (F::lit(2.0) * k.abs()).sqrt().max(F::lit(0.1))
    };
    let mut lo = zero;
    let mut hi = F::infinity();
    for _ in 0..200 {
        let p = normalized_otm(k, v);
        let g = if p > zero { p.ln() - target } else { F::neg_infinity() };
        if g.abs() <= tol {
            return Ok(v);
        }
        if g > zero {
            hi = v;
        } else {
            lo = v;
        }
        let d1 = -k / v + F::lit(0.5) * v;
        let slope = norm_pdf(d1) / p;
        let mut next = v - g / slope;
        if !(next.is_finite() && next > lo && next < hi) || p <= zero {
            next = if hi.is_finite() {
                F::lit(0.5) * (lo + hi)
            } else {
                F::lit(2.0) * v.max(F::lit(1e-3))
            };
        }
        if hi.is_finite() && (hi - lo) <= tol * hi {
            return Ok(F::lit(0.5) * (lo + hi));
        }
        v = next;
    }
    Err(Error::UndefinedIv(format!("no convergence at k = {k}, price = {price}")))
}

/// Implied volatility of a call price.
pub fn bs_implied_vol<F: Real>(price: F, s0: F, strike: F, t: F, r: F) -> Result<F> {
    if !(t > F::zero() && s0 > F::zero() && strike > F::zero()) {
        return Err(Error::Domain("need positive spot, strike and maturity".into()));
    }
    let df = (-r * t).exp();
    let fwd = s0 / df;
    let k = (strike / fwd).ln();
    let intrinsic = (s0 - strike * df).max(F::zero());
    if !(price > intrinsic && price < s0) {
        return Err(Error::UndefinedIv(format!(
            "call price {price} outside the no-arbitrage band ({intrinsic}, {s0})"
        )));
    }
    let otm = if k >= F::zero() { price } else { price - intrinsic };
    let v = implied_total_vol_otm(k, otm / (df * fwd))?;
    Ok(v / t.sqrt())
}
