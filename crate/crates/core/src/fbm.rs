//! Exact simulation of stationary Gaussian sequences, fractional Gaussian noise
//! among them, by circulant embedding.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Autocovariance of unit-step fractional Gaussian noise at lag `j`.
pub fn fgn_autocovariance(hurst: f64, j: usize) -> f64 {
    let j = j as f64;
    let h2 = 2.0 * hurst;
    0.5 * ((j + 1.0).powf(h2) + (j - 1.0).abs().powf(h2) - 2.0 * j.powf(h2))
}

/// Doublings of the embedding tried before giving up.
pub const MAX_EMBEDDING_DOUBLINGS: usize = 6;

/// Circulant-embedding sampler of a stationary Gaussian sequence of length `n`.
pub struct CirculantGenerator {
    n: usize,
    m: usize,
    /// `sqrt(eigenvalue / m)` of the embedding.
    amp: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl CirculantGenerator {
    /// `acf(j)` is the autocovariance at lag `j`. The embedding starts at the next
    /// power of two above `2(n - 1)` and doubles, up to `MAX_EMBEDDING_DOUBLINGS`
    /// times, while it has an eigenvalue below `-1e-10 max`; smaller negative
    /// eigenvalues are clipped to zero.
    pub fn new<A: Fn(usize) -> f64>(n: usize, acf: A) -> Result<CirculantGenerator> {
        if n < 2 {
            return Err(Error::Validation("need at least two points".into()));
        }
        let mut m = (2 * (n - 1)).next_power_of_two().max(2);
        let mut lags: Vec<f64> = Vec::new();
        let mut planner = FftPlanner::new();
        let mut worst = 0.0;
        for _ in 0..=MAX_EMBEDDING_DOUBLINGS {
            lags.extend((lags.len()..=m / 2).map(&acf));
            let mut row: Vec<Complex<f64>> = (0..m).map(|j| Complex::new(lags[j.min(m - j)], 0.0)).collect();
            let fft = planner.plan_fft_forward(m);
            fft.process(&mut row);
            let max = row.iter().map(|c| c.re).fold(0.0, f64::max);
            worst = row.iter().map(|c| c.re).fold(0.0, f64::min);
            if worst >= -1e-10 * max {
                let amp = row.iter().map(|c| (c.re.max(0.0) / m as f64).sqrt()).collect();
                return Ok(CirculantGenerator { n, m, amp, fft });
            }
            m *= 2;
        }
        Err(Error::EmbeddingFailure(worst))
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn embedding_size(&self) -> usize {
        self.m
    }

    /// Two independent sample paths from one transform. `scratch` must hold `m` entries.
    pub fn fill_pair<R: Rng>(&self, rng: &mut R, scratch: &mut [Complex<f64>], a: &mut [f64], b: &mut [f64]) {
        for (z, amp) in scratch.iter_mut().zip(&self.amp) {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            *z = Complex::new(re * amp, im * amp);
        }
        self.fft.process(scratch);
        for i in 0..self.n {
            a[i] = scratch[i].re;
            b[i] = scratch[i].im;
        }
    }
}

/// Generator of fBm increments on a uniform grid.
pub struct FbmGenerator {
    hurst: f64,
    inner: CirculantGenerator,
}

impl FbmGenerator {
    pub fn new(hurst: f64, n_steps: usize, horizon: f64) -> Result<FbmGenerator> {
        if !(0.5..1.0).contains(&hurst) {
            return Err(Error::Validation(format!("Hurst parameter must lie in [0.5, 1), got {hurst}")));
        }
        if n_steps < 2 || !(horizon > 0.0) {
            return Err(Error::Validation("need at least two steps and a positive horizon".into()));
        }
        let var = (horizon / n_steps as f64).powf(2.0 * hurst);
        let inner = CirculantGenerator::new(n_steps, |j| var * fgn_autocovariance(hurst, j))?;
        Ok(FbmGenerator { hurst, inner })
    }

    pub fn hurst(&self) -> f64 {
        self.hurst
    }

    pub fn embedding_size(&self) -> usize {
        self.inner.embedding_size()
    }

    /// Two independent increment paths from one transform. `scratch` must hold `m` entries.
    pub fn fill_pair<R: Rng>(&self, rng: &mut R, scratch: &mut [Complex<f64>], a: &mut [f64], b: &mut [f64]) {
        self.inner.fill_pair(rng, scratch, a, b)
    }
}

/// Solves `T x = b` for the symmetric positive definite Toeplitz matrix with first
/// column `col` by Levinson recursion, in `O(n^2)`.
pub fn toeplitz_solve(col: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let n = b.len();
    if n == 0 || col.len() < n || !(col[0] > 0.0) {
        return Err(Error::Validation("Toeplitz system needs a positive diagonal and n coefficients".into()));
    }
    let r: Vec<f64> = col[1..n].iter().map(|v| v / col[0]).collect();
    let rhs: Vec<f64> = b.iter().map(|v| v / col[0]).collect();
    let mut x = vec![0.0; n];
    let mut y = vec![0.0; n];
    x[0] = rhs[0];
    if n == 1 {
        return Ok(x);
    }
    y[0] = -r[0];
    let mut alpha = -r[0];
    let mut beta = 1.0;
    let mut tmp = vec![0.0; n];
    for k in 1..n {
        beta *= 1.0 - alpha * alpha;
        if !(beta > 0.0) {
            return Err(Error::Numerical("Toeplitz matrix is not positive definite".into()));
        }
        let mu = (rhs[k] - (0..k).map(|i| r[i] * x[k - 1 - i]).sum::<f64>()) / beta;
        for i in 0..k {
            x[i] += mu * y[k - 1 - i];
        }
        x[k] = mu;
        if k < n - 1 {
            alpha = -(r[k] + (0..k).map(|i| r[i] * y[k - 1 - i]).sum::<f64>()) / beta;
            tmp[..k].copy_from_slice(&y[..k]);
            for i in 0..k {
                y[i] = tmp[i] + alpha * tmp[k - 1 - i];
            }
            y[k] = alpha;
        }
    }
    Ok(x)
}

/// `n_paths` independent paths of `n_steps` fBm increments over `[0, T]`.
/// Path pair `j` uses ChaCha stream `j` of the seed.
pub fn simulate_fbm_increments(hurst: f64, n_steps: usize, horizon: f64, n_paths: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    let generator = FbmGenerator::new(hurst, n_steps, horizon)?;
    let mut scratch = vec![Complex::new(0.0, 0.0); generator.embedding_size()];
    let mut out = Vec::with_capacity(n_paths);
    let mut a = vec![0.0; n_steps];
    let mut b = vec![0.0; n_steps];
    for pair in 0..n_paths.div_ceil(2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(pair as u64);
        generator.fill_pair(&mut rng, &mut scratch, &mut a, &mut b);
        out.push(a.clone());
        if out.len() < n_paths {
            out.push(b.clone());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brownian_case_is_white_noise() {
        let paths = simulate_fbm_increments(0.5, 64, 1.0, 20_000, 1).unwrap();
        let h = 1.0 / 64.0;
        let n = paths.len() as f64;
        let var = paths.iter().map(|p| p[10] * p[10]).sum::<f64>() / n;
        let se = h * (2.0 / n).sqrt();
        assert!((var - h).abs() < 3.0 * se, "{var} vs {h}");
        let cov = paths.iter().map(|p| p[10] * p[11]).sum::<f64>() / n;
        assert!(cov.abs() < 3.0 * h / n.sqrt());
    }

    #[test]
    fn variogram_matches_fbm() {
        let hurst = 0.7;
        let n_steps = 128;
        let paths = simulate_fbm_increments(hurst, n_steps, 1.0, 100_000, 5).unwrap();
        let dt = 1.0 / n_steps as f64;
        for &lag in &[1usize, 3, 10, 40, 100] {
            let start = 7;
            let sq: Vec<f64> = paths
                .iter()
                .map(|p| {
                    let d: f64 = p[start..start + lag].iter().sum();
                    d * d
                })
                .collect();
            let n = sq.len() as f64;
            let mean = sq.iter().sum::<f64>() / n;
            let sd = (sq.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            let want = (lag as f64 * dt).powf(2.0 * hurst);
            assert!((mean - want).abs() < 3.0 * sd / n.sqrt(), "lag {lag}: {mean} vs {want}");
        }
    }

    #[test]
    fn seeded_output_is_reproducible() {
        let a = simulate_fbm_increments(0.8, 100, 0.5, 7, 11).unwrap();
        let b = simulate_fbm_increments(0.8, 100, 0.5, 7, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 7);
    }

    #[test]
    fn rejects_out_of_range_hurst() {
        assert!(FbmGenerator::new(1.0, 10, 1.0).is_err());
        assert!(FbmGenerator::new(0.4, 10, 1.0).is_err());
    }

    #[test]
    fn stationary_fou_samples_have_its_autocovariance() {
        use rand::SeedableRng;
        let (q, sigma, hurst, dt) = (7.0, 1.2, 0.7, 1.0 / 256.0);
        let acf = |j: usize| crate::model::fou_autocovariance(q, sigma, hurst, j as f64 * dt);
        let generator = CirculantGenerator::new(256, acf).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut scratch = vec![Complex::new(0.0, 0.0); generator.embedding_size()];
        let (mut a, mut b) = (vec![0.0; 256], vec![0.0; 256]);
        let mut prods = vec![Vec::new(); 3];
        for _ in 0..20_000 {
            generator.fill_pair(&mut rng, &mut scratch, &mut a, &mut b);
            for p in [&a, &b] {
                for (slot, lag) in prods.iter_mut().zip([0usize, 20, 200]) {
                    slot.push(p[30] * p[30 + lag.min(225)]);
                }
            }
        }
        for (xs, lag) in prods.iter().zip([0usize, 20, 200]) {
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            let want = acf(lag.min(225));
            assert!((mean - want).abs() < 3.5 * sd / n.sqrt(), "lag {lag}: {mean} vs {want}");
        }
    }

    #[test]
    fn toeplitz_solve_matches_dense() {
        let n = 40;
        let col: Vec<f64> = (0..n).map(|j| fgn_autocovariance(0.8, j)).collect();
        let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = toeplitz_solve(&col, &b).unwrap();
        let dense = nalgebra::DMatrix::from_fn(n, n, |i, j| col[i.abs_diff(j)]);
        let want = dense.lu().solve(&nalgebra::DVector::from_vec(b)).unwrap();
        for (a, w) in x.iter().zip(want.iter()) {
            assert!((a - w).abs() < 1e-10 * w.abs().max(1.0));
        }
    }
}
