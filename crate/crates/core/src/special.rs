//! Special functions and quadrature rules.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};

/// Natural log of the modified Bessel function of the first kind, `ln I_nu(x)`.
///
/// Power series below `x = 30`, Hankel asymptotic expansion above.
/// Valid for `nu >= -1/2` and `x > 0`.
pub fn ln_bessel_i(nu: f64, x: f64) -> f64 {
    assert!(x > 0.0 && nu >= -0.5);
    if x <= 30.0 {
        let h = 0.5 * x;
        let ln_h = h.ln();
        let ln_t0 = nu * ln_h - libm::lgamma(nu + 1.0);
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut k = 0.0;
        loop {
            k += 1.0;
            term *= h * h / (k * (k + nu));
            sum += term;
            if term < 1e-17 * sum {
                break;
            }
        }
        ln_t0 + sum.ln()
    } else {
        let mu = 4.0 * nu * nu;
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut prev = f64::INFINITY;
        for k in 1..60 {
            let j = (2 * k - 1) as f64;
            term *= -(mu - j * j) / (k as f64 * 8.0 * x);
            if term.abs() > prev || term == 0.0 {
                break;
            }
            sum += term;
            prev = term.abs();
            if prev < 1e-17 {
                break;
            }
        }
        x - 0.5 * (2.0 * PI * x).ln() + sum.ln()
    }
}

/// `e^x * Gamma(a, x)`, the scaled upper incomplete gamma function, for `a > 0`, `x >= 0`.
pub fn upper_gamma_scaled(a: f64, x: f64) -> f64 {
    assert!(a > 0.0 && x >= 0.0);
    if x == 0.0 {
        return libm::tgamma(a);
    }
    if x < a + 1.0 {
        // Gamma(a) - gamma(a, x), with gamma(a, x) = e^{-x} x^a sum x^n / (a (a+1) ... (a+n))
        let mut ap = a;
        let mut del = 1.0 / a;
        let mut sum = del;
        for _ in 0..500 {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if del.abs() < sum.abs() * 1e-17 {
                break;
            }
        }
        x.exp() * libm::tgamma(a) - x.powf(a) * sum
    } else {
        // Modified Lentz continued fraction.
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..500 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < 1e-16 {
                break;
            }
        }
        x.powf(a) * h
    }
}

/// `e^{-x} * integral_0^x t^{a-1} e^t dt` for `a > 0`, `x >= 0`.
pub fn rising_exp_integral_scaled(a: f64, x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let ln_x = x.ln();
    let mut sum = 0.0;
    let mut k = 0u32;
    loop {
        let kf = k as f64;
        let ln_term = (kf + a) * ln_x - libm::lgamma(kf + 1.0) - (kf + a).ln() - x;
        let term = ln_term.exp();
        sum += term;
        if kf > x && term < 1e-17 * sum {
            break;
        }
        k += 1;
        if k > 100_000 {
            break;
        }
    }
    sum
}

/// Inverse of the standard normal CDF.
pub fn norm_inv_cdf(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "probability must lie in (0, 1)");
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    let lo = 0.02425;
    let x = if p < lo {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - lo {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    // One Halley step against the exact CDF.
    let e = 0.5 * libm::erfc(-x / std::f64::consts::SQRT_2) - p;
    let u = e * (2.0 * PI).sqrt() * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}

/// Gauss-Hermite rule for the weight `e^{-x^2}`, with weights in log form.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub ln_weights: Vec<f64>,
}

impl GaussHermite {
    /// Builds the `n`-point rule: Jacobi-matrix eigenvalues as starting points,
    /// polished by Newton iteration on the orthonormal Hermite recurrence.
    pub fn new(n: usize) -> GaussHermite {
        assert!(n >= 1);
        let nf = n as f64;
        let pim4 = PI.powf(-0.25);
        let jacobi = DMatrix::from_fn(n, n, |i, j| {
            if i + 1 == j || j + 1 == i {
                (0.5 * i.max(j) as f64).sqrt()
            } else {
                0.0
            }
        });
        let mut guesses: Vec<f64> = SymmetricEigen::new(jacobi).eigenvalues.iter().copied().collect();
        guesses.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let mut nodes = vec![0.0; n];
        let mut ln_weights = vec![0.0; n];
        for i in 0..n.div_ceil(2) {
            let mut z = if n % 2 == 1 && i == n / 2 { 0.0 } else { guesses[i] };
            for _ in 0..50 {
                let (p_n, p_nm1, _) = hermite_pair(n, z, pim4);
                let dz = p_n / ((2.0 * nf).sqrt() * p_nm1);
                z -= dz;
                if dz.abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            let (_, p_nm1, ln_scale) = hermite_pair(n, z, pim4);
            let lw = -nf.ln() - 2.0 * (p_nm1.abs().ln() + ln_scale);
            nodes[i] = z;
            nodes[n - 1 - i] = -z;
            ln_weights[i] = lw;
            ln_weights[n - 1 - i] = lw;
        }
        GaussHermite { nodes, ln_weights }
    }
}

/// Orthonormal Hermite polynomials (weight e^{-x^2}) of degrees n and n-1 at x,
/// returned with a common log-scale factor to avoid overflow.
fn hermite_pair(n: usize, x: f64, pim4: f64) -> (f64, f64, f64) {
    let mut p1 = pim4;
    let mut p2 = 0.0;
    let mut ln_scale = 0.0;
    for j in 1..=n {
        let jf = j as f64;
        let p3 = p2;
        p2 = p1;
        p1 = x * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
        if p1.abs() > 1e150 {
            p1 *= 1e-150;
            p2 *= 1e-150;
            ln_scale += 150.0 * std::f64::consts::LN_10;
        }
    }
    (p1, p2, ln_scale)
}

/// Adaptive Simpson quadrature of `f` over `[a, b]`.
pub fn adaptive_simpson<G: Fn(f64) -> f64>(f: &G, a: f64, b: f64, tol: f64) -> f64 {
    fn rec<G: Fn(f64) -> f64>(
        f: &G,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
                + rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
        }
    }
    let fa = f(a);
    let fb = f(b);
    let fm = f(0.5 * (a + b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, tol, 50)
}

/// Composite trapezoid weights for `n` uniform points on an interval of length `len`.
pub fn trapezoid_weights(n: usize, len: f64) -> Vec<f64> {
    assert!(n >= 2);
    let h = len / (n - 1) as f64;
    let mut w = vec![h; n];
    w[0] = 0.5 * h;
    w[n - 1] = 0.5 * h;
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn bessel_half_order_closed_forms() {
        for &x in &[0.1_f64, 1.0, 5.0, 29.0, 31.0, 80.0, 400.0] {
            let ln_minus = 0.5 * (2.0 / (PI * x)).ln() + x.cosh().ln();
            let ln_plus = 0.5 * (2.0 / (PI * x)).ln() + x.sinh().ln();
            assert_relative_eq!(ln_bessel_i(-0.5, x), ln_minus, max_relative = 1e-12);
            assert_relative_eq!(ln_bessel_i(0.5, x), ln_plus, max_relative = 1e-12);
        }
    }

    #[test]
    fn bessel_integer_order_reference() {
        // I_0(1), I_1(2), I_0(30), I_0(31)
        assert_relative_eq!(ln_bessel_i(0.0, 1.0).exp(), 1.266_065_877_752_008_4, max_relative = 1e-13);
        assert_relative_eq!(ln_bessel_i(1.0, 2.0).exp(), 1.590_636_854_637_329, max_relative = 1e-13);
        let series = ln_bessel_i(0.0, 30.0);
        let asym_side = ln_bessel_i(0.0, 30.000001);
        assert!((series - asym_side).abs() < 1e-5);
    }

    #[test]
    fn upper_gamma_matches_exponential_integral() {
        // a = 1: e^x Gamma(1, x) = 1
        for &x in &[0.0_f64, 0.3, 2.0, 10.0, 50.0] {
            assert_relative_eq!(upper_gamma_scaled(1.0, x), 1.0, max_relative = 1e-13);
        }
        // a = 1/2: e^x Gamma(1/2, x) = sqrt(pi) e^x erfc(sqrt x)
        for &x in &[0.1_f64, 1.0, 1.6, 4.0, 20.0] {
            let want = PI.sqrt() * x.exp() * libm::erfc(x.sqrt());
            assert_relative_eq!(upper_gamma_scaled(0.5, x), want, max_relative = 1e-12);
        }
    }

    #[test]
    fn rising_integral_against_quadrature() {
        for &(a, x) in &[(0.4_f64, 0.7_f64), (0.98, 3.0), (0.02, 0.5), (0.6, 12.0)] {
            let g = |u: f64| {
                // substitution t = u^{1/a} removes the endpoint singularity
                let t = u.powf(1.0 / a);
                (t - x).exp() / a
            };
            let want = adaptive_simpson(&g, 0.0, x.powf(a), 1e-14);
            assert_relative_eq!(rising_exp_integral_scaled(a, x), want, max_relative = 1e-9);
        }
    }

    #[test]
    fn inverse_normal_round_trip() {
        for &p in &[1e-12, 1e-5, 0.01, 0.3, 0.5, 0.77, 0.999, 1.0 - 1e-9] {
            let x = norm_inv_cdf(p);
            let back = 0.5 * libm::erfc(-x / std::f64::consts::SQRT_2);
            assert_relative_eq!(back, p, max_relative = 1e-9);
        }
    }

    #[test]
    fn gauss_hermite_moments() {
        for &n in &[1usize, 2, 5, 20, 200, 1024] {
            let gh = GaussHermite::new(n);
            let total: f64 = gh.ln_weights.iter().map(|w| w.exp()).sum();
            assert_relative_eq!(total, PI.sqrt(), max_relative = 1e-12);
            let second: f64 = gh
                .nodes
                .iter()
                .zip(&gh.ln_weights)
                .map(|(x, w)| x * x * w.exp())
                .sum();
            if n >= 2 {
                assert_relative_eq!(second, 0.5 * PI.sqrt(), max_relative = 1e-12);
            }
            for w in gh.nodes.windows(2) {
                assert!(w[0] > w[1]);
            }
        }
    }

    #[test]
    fn gauss_hermite_small_rule_nodes() {
        let gh = GaussHermite::new(3);
        assert_relative_eq!(gh.nodes[0], (1.5_f64).sqrt(), max_relative = 1e-14);
        assert!(gh.nodes[1].abs() < 1e-14);
        assert_relative_eq!(gh.ln_weights[1].exp(), 2.0 * PI.sqrt() / 3.0, max_relative = 1e-13);
    }
}
