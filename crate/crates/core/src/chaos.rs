//! Second-chaos representation of the integrated variance `Gamma_T = integral_0^T X_t^2 dt`
//! and its tail constants.
//!
//! `Gamma_T = sum_n lambda_n (Z_n + delta_n / sqrt(lambda_n))^2 + tau` with i.i.d. standard
//! normals `Z_n`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::{adaptive_simpson, ln_bessel_i};
use crate::spectrum::Spectrum;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Tail constants of the integrated-variance density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChaosConstants {
    pub horizon: f64,
    pub lambda1: f64,
    pub n1: usize,
    /// Noncentrality ratio `sum_{top group} delta_n^2 / lambda_1`.
    pub delta: f64,
    /// Sum of `delta_n^2` over the top eigenspace.
    pub top_delta_sq: f64,
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "C")]
    pub c: f64,
    pub tau: f64,
    pub s: f64,
    #[serde(rename = "B_tilde")]
    pub b_tilde: f64,
    #[serde(rename = "C_tilde")]
    pub c_tilde: f64,
    /// All mean projections vanish.
    pub centered: bool,
    /// Log of the factor applied to `A` for modes beyond the truncation.
    pub ln_a_tail: f64,
}

/// Which asymptotic form applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityBranch {
    /// Nonzero projection of the mean on the top eigenspace.
    Noncentral,
    /// Zero projection on the top eigenspace.
    Central,
}

impl ChaosConstants {
    pub fn branch(&self) -> DensityBranch {
        if self.delta > 0.0 {
            DensityBranch::Noncentral
        } else {
            DensityBranch::Central
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Validation(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<ChaosConstants> {
        serde_json::from_str(text).map_err(|e| Error::Validation(format!("chaos JSON: {e}")))
    }

    /// Constants of a single top mode `lambda_1` with projection `delta1` and nothing else.
    pub fn single_mode(lambda1: f64, delta1: f64, horizon: f64) -> Result<ChaosConstants> {
        let spec = Spectrum::from_values(horizon, vec![lambda1], vec![delta1], delta1 * delta1, lambda1)?;
        chaos_constants(&spec, horizon)
    }
}

/// Tail constants from a truncated spectrum.
///
/// `A = prod_{k>=2} (lambda_1/(lambda_1 - rho_k))^{n_k/2} exp(1/2 sum_{k>=2} D_k/(lambda_1 - rho_k))`
/// where `D_k` sums `delta_n^2` over group `k`. Modes beyond the truncation enter through
/// `exp(tail_trace / (2 lambda_1))`, their first-order contribution.
pub fn chaos_constants(spec: &Spectrum, horizon: f64) -> Result<ChaosConstants> {
    if !(horizon > 0.0) {
        return Err(Error::Domain(format!("horizon must be positive, got {horizon}")));
    }
    if spec.distinct_values.is_empty() {
        return Err(Error::Validation("empty spectrum".into()));
    }
    let lambda1 = spec.distinct_values[0];
    if lambda1 <= 0.0 {
        return Err(Error::Validation("top eigenvalue must be positive".into()));
    }
    if spec.distinct_values.len() > 1 && spec.distinct_values[1] >= lambda1 {
        return Err(Error::Validation("top eigenvalue is not isolated".into()));
    }
    let n1 = spec.multiplicities[0];
    let top_delta_sq: f64 = spec.delta_coeffs[..n1].iter().map(|d| d * d).sum();
    let mut ln_a = 0.0;
    let mut start = n1;
    for (k, (&nk, &rho)) in spec.multiplicities.iter().zip(&spec.distinct_values).enumerate() {
        if k == 0 {
            continue;
        }
        let group: f64 = spec.delta_coeffs[start..start + nk].iter().map(|d| d * d).sum();
        ln_a += 0.5 * nk as f64 * (lambda1 / (lambda1 - rho)).ln() + 0.5 * group / (lambda1 - rho);
        start += nk;
    }
    let ln_a_tail = spec.tail_trace() / (2.0 * lambda1);
    ln_a += ln_a_tail;
    let a = ln_a.exp();
    let tau = spec.tau.max(0.0);
    let delta = top_delta_sq / lambda1;
    let centered = spec.delta_coeffs.iter().all(|d| *d == 0.0);
    let n1f = n1 as f64;
    let ln_c = if delta > 0.0 {
        ln_a - (2.0_f64).ln() - 0.5 * LN_2PI - 0.5 * lambda1.ln()
            - (n1f - 1.0) / 4.0 * top_delta_sq.ln()
            + (tau - top_delta_sq) / (2.0 * lambda1)
    } else {
        ln_a - 0.5 * n1f * (2.0_f64).ln() - libm::lgamma(0.5 * n1f) - 0.5 * n1f * lambda1.ln()
            + tau / (2.0 * lambda1)
    };
    Ok(ChaosConstants {
        horizon,
        lambda1,
        n1,
        delta,
        top_delta_sq,
        a,
        c: ln_c.exp(),
        tau,
        s: spec.s,
        b_tilde: (delta * horizon / lambda1).sqrt(),
        c_tilde: horizon / (2.0 * lambda1),
        centered,
        ln_a_tail,
    })
}

/// Density of the noncentral chi-square law with `n` degrees of freedom and noncentrality `lambda`.
pub fn noncentral_chi2_density(x: f64, n: usize, lambda: f64) -> Result<f64> {
    ln_noncentral_chi2_density(x, n, lambda).map(f64::exp)
}

/// Natural log of [`noncentral_chi2_density`].
pub fn ln_noncentral_chi2_density(x: f64, n: usize, lambda: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::Domain(format!("density argument must be positive, got {x}")));
    }
    if n == 0 || lambda < 0.0 {
        return Err(Error::Domain(format!("invalid chi-square parameters n={n}, lambda={lambda}")));
    }
    let nf = n as f64;
    let ln = if lambda == 0.0 {
        (0.5 * nf - 1.0) * x.ln() - 0.5 * x - 0.5 * nf * (2.0_f64).ln() - libm::lgamma(0.5 * nf)
    } else {
        -(2.0_f64).ln() + (nf / 4.0 - 0.5) * (x / lambda).ln() - 0.5 * (x + lambda)
            + ln_bessel_i(0.5 * nf - 1.0, (lambda * x).sqrt())
    };
    Ok(ln)
}

/// Large-`x` form `lambda^{-(n-1)/4} x^{(n-3)/4} e^{sqrt(lambda x)} e^{-(x+lambda)/2} / (2 sqrt(2 pi))`.
pub fn noncentral_chi2_density_asymptotic(x: f64, n: usize, lambda: f64) -> Result<f64> {
    ln_noncentral_chi2_density_asymptotic(x, n, lambda).map(f64::exp)
}

/// Natural log of [`noncentral_chi2_density_asymptotic`].
pub fn ln_noncentral_chi2_density_asymptotic(x: f64, n: usize, lambda: f64) -> Result<f64> {
    if lambda <= 0.0 {
        return Err(Error::Domain("asymptotic form needs positive noncentrality; use the central density".into()));
    }
    if !(x > 0.0) {
        return Err(Error::Domain(format!("density argument must be positive, got {x}")));
    }
    let nf = n as f64;
    let ln = -(nf - 1.0) / 4.0 * lambda.ln() + (nf - 3.0) / 4.0 * x.ln() + (lambda * x).sqrt()
        - 0.5 * (x + lambda)
        - (2.0_f64).ln()
        - 0.5 * LN_2PI;
    Ok(ln)
}

/// `|exact / asymptotic - 1|` for the noncentral chi-square density at `x`.
pub fn chi2_asymptotic_ratio_error(x: f64, n: usize, lambda: f64) -> Result<f64> {
    let d = ln_noncentral_chi2_density(x, n, lambda)? - ln_noncentral_chi2_density_asymptotic(x, n, lambda)?;
    Ok(d.exp_m1().abs())
}

/// Asymptotic density value with the branch that produced it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityValue {
    pub value: f64,
    pub ln_value: f64,
    pub branch: DensityBranch,
}

/// Leading-order density of `Gamma_T` at large `x`.
pub fn gamma_density_asymptotic(x: f64, k: &ChaosConstants) -> Result<DensityValue> {
    if !(x > 0.0) {
        return Err(Error::Domain(format!("density argument must be positive, got {x}")));
    }
    let n1 = k.n1 as f64;
    let branch = k.branch();
    let ln_value = match branch {
        DensityBranch::Noncentral => {
            k.c.ln() + (n1 - 3.0) / 4.0 * x.ln() + (k.delta / k.lambda1).sqrt() * x.sqrt()
                - x / (2.0 * k.lambda1)
        }
        DensityBranch::Central => k.c.ln() + (n1 - 2.0) / 2.0 * x.ln() - x / (2.0 * k.lambda1),
    };
    Ok(DensityValue {
        value: ln_value.exp(),
        ln_value,
        branch,
    })
}

/// Leading-order density of `sqrt(Gamma_t / t)` at large `y`.
pub fn mixing_density_asymptotic(y: f64, k: &ChaosConstants, t: f64) -> Result<f64> {
    if !(y > 0.0) || !(t > 0.0) {
        return Err(Error::Domain(format!("need y > 0 and t > 0, got y={y}, t={t}")));
    }
    let n1 = k.n1 as f64;
    let c_tilde = t / (2.0 * k.lambda1);
    let ln = match k.branch() {
        DensityBranch::Noncentral => {
            let b_tilde = (k.delta * t / k.lambda1).sqrt();
            (2.0 * k.c).ln() + (n1 + 1.0) / 4.0 * t.ln() + (n1 - 1.0) / 2.0 * y.ln() + b_tilde * y
                - c_tilde * y * y
        }
        DensityBranch::Central => {
            (2.0 * k.c).ln() + n1 / 2.0 * t.ln() + (n1 - 1.0) * y.ln() - c_tilde * y * y
        }
    };
    Ok(ln.exp())
}

/// Point beyond which the asymptotic mixing density is used: three scales into the tail.
pub fn mixing_crossover(spec: &Spectrum) -> f64 {
    let mean = spec.eigenvalues.iter().sum::<f64>() + spec.s;
    3.0 * (mean / spec.horizon).sqrt()
}

/// Block size for the counter-based sampling streams.
pub const SAMPLE_BLOCK: usize = 4096;

/// I.i.d. samples of `Gamma_T` from the truncated expansion. Sample block `b` uses ChaCha
/// stream `b` of the seed, so results do not depend on the thread count.
pub fn sample_integrated_variance(spec: &Spectrum, count: usize, seed: u64) -> Vec<f64> {
    let sqrt_l: Vec<f64> = spec.eigenvalues.iter().map(|l| l.sqrt()).collect();
    let shift: Vec<f64> = spec
        .delta_coeffs
        .iter()
        .zip(&sqrt_l)
        .map(|(d, s)| d / s)
        .collect();
    let tau = spec.tau.max(0.0);
    let mut out = vec![0.0; count];
    out.par_chunks_mut(SAMPLE_BLOCK)
        .enumerate()
        .for_each(|(block, chunk)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(block as u64);
            for v in chunk.iter_mut() {
                let mut acc = 0.0;
                for (l, m) in spec.eigenvalues.iter().zip(&shift) {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let y = z + m;
                    acc += l * y * y;
                }
                *v = acc + tau;
            }
        });
    out
}

/// Maximum-likelihood estimate of the exponential rate `beta` for a tail density
/// `proportional to x^a e^{b sqrt(x)} e^{-beta x}` on `[u, inf)`, where `a` and `b` are
/// fixed shape parameters. Returns `beta`.
pub fn tail_rate_mle(samples: &[f64], u: f64, a: f64, b: f64) -> Result<f64> {
    let tail: Vec<f64> = samples.iter().copied().filter(|x| *x > u).collect();
    if tail.len() < 10 {
        return Err(Error::InsufficientData(format!("only {} samples above the threshold", tail.len())));
    }
    let mean = tail.iter().sum::<f64>() / tail.len() as f64;
    // the score equation is E_beta[X | X > u] = sample mean; E_beta is decreasing in beta
    let model_mean = |beta: f64| {
        let ln_f = |x: f64| a * (x / u).ln() + b * (x.sqrt() - u.sqrt()) - beta * (x - u);
        let upper = u + 80.0 / beta;
        let z = adaptive_simpson(&|x: f64| ln_f(x).exp(), u, upper, 1e-12 / beta);
        let m = adaptive_simpson(&|x: f64| x * ln_f(x).exp(), u, upper, 1e-12 * u / beta);
        m / z
    };
    let excess = mean - u;
    let mut lo = 1e-3 / excess;
    let mut hi = 1e3 / excess;
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if model_mean(mid) > mean {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo - 1.0 < 1e-12 {
            break;
        }
    }
    Ok((lo * hi).sqrt())
}

/// Samples as consecutive little-endian `f64`.
pub fn samples_to_le_bytes(samples: &[f64]) -> Vec<u8> {
    samples.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn samples_from_le_bytes(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::Validation(format!("sample file length {} is not a multiple of 8", bytes.len())));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}
