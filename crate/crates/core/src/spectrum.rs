//! Karhunen-Loeve decomposition of the volatility covariance operator on `[0, T]`.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{CovarianceKernel, MeanFunction, ModelSpec};
use crate::special::trapezoid_weights;

/// Maximum number of retained modes under automatic truncation.
pub const MAX_MODES: usize = 512;
/// Eigenfunctions are sampled for at most this many leading modes.
pub const SAMPLED_MODES: usize = 32;
/// Default Nystrom grid sizes (number of intervals).
pub const DEFAULT_GRIDS: [usize; 2] = [512, 1024];
/// Grouping tolerance for analytic spectra.
pub const ANALYTIC_GROUP_TOL: f64 = 1e-8;
/// Grouping tolerance for Nystrom spectra.
pub const NUMERIC_GROUP_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumMeta {
    pub method: String,
    pub kernel_hash: String,
    pub grid_sizes: Vec<usize>,
}

/// Eigenvalues, eigenfunction samples and mean projections of a covariance operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub horizon: f64,
    /// Non-increasing eigenvalues of retained modes.
    pub eigenvalues: Vec<f64>,
    /// Sample points of the eigenfunctions.
    pub grid: Vec<f64>,
    /// `eigenfunctions[n][i] = e_n(grid[i])` for the leading modes.
    pub eigenfunctions: Vec<Vec<f64>>,
    pub multiplicities: Vec<usize>,
    pub distinct_values: Vec<f64>,
    /// `delta_n = integral of m(t) e_n(t)`.
    pub delta_coeffs: Vec<f64>,
    /// `integral of m(t)^2`.
    pub s: f64,
    /// `s - sum delta_n^2`.
    pub tau: f64,
    pub truncation_count: usize,
    /// `integral of Q(t, t)`.
    pub trace: f64,
    pub meta: SpectrumMeta,
}

impl Spectrum {
    /// Trace not captured by the retained modes.
    pub fn tail_trace(&self) -> f64 {
        (self.trace - self.eigenvalues.iter().sum::<f64>()).max(0.0)
    }

    /// Builds a spectrum directly from eigenvalues and mean projections (no eigenfunctions).
    pub fn from_values(
        horizon: f64,
        eigenvalues: Vec<f64>,
        delta_coeffs: Vec<f64>,
        s: f64,
        trace: f64,
    ) -> Result<Spectrum> {
        if eigenvalues.len() != delta_coeffs.len() {
            return Err(Error::Validation("eigenvalue and delta lists differ in length".into()));
        }
        if eigenvalues.windows(2).any(|w| w[1] > w[0]) || eigenvalues.iter().any(|l| *l <= 0.0) {
            return Err(Error::Validation("eigenvalues must be positive and non-increasing".into()));
        }
        let (multiplicities, distinct_values) =
            group_multiplicities(&eigenvalues, ANALYTIC_GROUP_TOL);
        let tau = clamp_tau(s, s - delta_coeffs.iter().map(|d| d * d).sum::<f64>());
        Ok(Spectrum {
            horizon,
            truncation_count: eigenvalues.len(),
            eigenvalues,
            grid: Vec::new(),
            eigenfunctions: Vec::new(),
            multiplicities,
            distinct_values,
            delta_coeffs,
            s,
            tau,
            trace,
            meta: SpectrumMeta {
                method: "explicit".into(),
                kernel_hash: String::new(),
                grid_sizes: Vec::new(),
            },
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Validation(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Spectrum> {
        serde_json::from_str(text).map_err(|e| Error::Validation(format!("spectrum JSON: {e}")))
    }
}

fn clamp_tau(s: f64, tau: f64) -> f64 {
    if tau < 0.0 && tau.abs() < 1e-10 * s.max(1e-300) {
        0.0
    } else {
        tau
    }
}

/// Positive roots of the OU frequency equation with their eigenfunction normalizers.
#[derive(Debug, Clone, PartialEq)]
pub struct OuRoots {
    pub q: f64,
    pub sigma: f64,
    pub sigma0: f64,
    pub horizon: f64,
    /// Ascending roots.
    pub w: Vec<f64>,
    /// Signed normalizers; the sign makes `integral of e_n >= 0`.
    pub normalizers: Vec<f64>,
}

impl OuRoots {
    pub fn random_start(&self) -> bool {
        self.sigma0 != 0.0
    }

    pub fn eigenvalue(&self, n: usize) -> f64 {
        self.sigma * self.sigma / (self.w[n] * self.w[n] + self.q * self.q)
    }

    /// `e_n(t)` (zero-based `n`).
    pub fn eigenfunction(&self, n: usize, t: f64) -> f64 {
        let w = self.w[n];
        let k = self.normalizers[n];
        if self.random_start() {
            let s0 = self.sigma0 * self.sigma0;
            k * (s0 * w * (w * t).cos() + (self.sigma * self.sigma - self.q * s0) * (w * t).sin())
        } else {
            k * (w * t).sin()
        }
    }
}

fn frequency_residual(q: f64, sigma: f64, sigma0: f64, horizon: f64, w: f64) -> (f64, f64) {
    let (s, c) = (w * horizon).sin_cos();
    if sigma0 == 0.0 {
        let f = w * c + q * s;
        let df = c - w * horizon * s + q * horizon * c;
        (f, df)
    } else {
        let s2 = sigma * sigma;
        let v = sigma0 * sigma0;
        let b = q * s2 - (w * w + q * q) * v;
        let f = s2 * w * c + b * s;
        let df = s2 * c - s2 * w * horizon * s - 2.0 * w * v * s + b * horizon * c;
        (f, df)
    }
}

/// First `count` positive roots of
/// `sigma^2 w cos(wT) + (q sigma^2 - (w^2 + q^2) sigma0^2) sin(wT) = 0`
/// (or `w cos(wT) + q sin(wT) = 0` when `sigma0 = 0`).
pub fn ou_frequencies(q: f64, sigma: f64, sigma0: f64, horizon: f64, count: usize) -> Result<OuRoots> {
    if !(q > 0.0 && sigma > 0.0 && sigma0 >= 0.0 && horizon > 0.0 && count >= 1) {
        return Err(Error::Validation(format!(
            "invalid OU parameters q={q}, sigma={sigma}, sigma0={sigma0}, T={horizon}, count={count}"
        )));
    }
    let f = |w: f64| frequency_residual(q, sigma, sigma0, horizon, w);
    let step = std::f64::consts::PI / horizon;
    let sub = 16;
    let mut roots = Vec::with_capacity(count);
    let mut interval = 0usize;
    while roots.len() < count {
        if interval > count + 64 {
            return Err(Error::Numerical(format!(
                "found only {} of {count} frequency roots",
                roots.len()
            )));
        }
        let lo = interval as f64 * step;
        let mut a = if interval == 0 { 1e-9 * step } else { lo };
        let mut fa = f(a).0;
        for j in 1..=sub {
            let b = lo + step * j as f64 / sub as f64;
            let fb = f(b).0;
            if fa == 0.0 {
                roots.push(a);
            } else if fa * fb < 0.0 {
                roots.push(refine_root(&f, a, b, fa));
            }
            a = b;
            fa = fb;
        }
        interval += 1;
    }
    roots.truncate(count);
    roots.dedup_by(|x, y| (*x - *y).abs() <= 1e-12 * y.abs());
    if roots.len() < count {
        return Err(Error::Numerical("duplicate frequency roots".into()));
    }
    let normalizers = roots
        .iter()
        .map(|&w| ou_normalizer(q, sigma, sigma0, horizon, w))
        .collect();
    Ok(OuRoots {
        q,
        sigma,
        sigma0,
        horizon,
        w: roots,
        normalizers,
    })
}

fn refine_root<G: Fn(f64) -> (f64, f64)>(f: &G, mut a: f64, mut b: f64, fa0: f64) -> f64 {
    let mut fa = fa0;
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if b - a <= 4.0 * f64::EPSILON * m {
            break;
        }
        let fm = f(m).0;
        if fm == 0.0 {
            return m;
        }
        if fa * fm < 0.0 {
            b = m;
        } else {
            a = m;
            fa = fm;
        }
    }
    let mut x = 0.5 * (a + b);
    for _ in 0..3 {
        let (fx, dfx) = f(x);
        if dfx == 0.0 {
            break;
        }
        let nx = x - fx / dfx;
        if nx < a || nx > b {
            break;
        }
        x = nx;
    }
    x
}

fn ou_normalizer(q: f64, sigma: f64, sigma0: f64, horizon: f64, w: f64) -> f64 {
    let t = horizon;
    if sigma0 == 0.0 {
        return 1.0 / (0.5 * t - (2.0 * w * t).sin() / (4.0 * w)).sqrt();
    }
    let v = sigma0 * sigma0;
    let a = v * w;
    let b = sigma * sigma - q * v;
    let s2 = (2.0 * w * t).sin();
    let c2 = (2.0 * w * t).cos();
    let inv_k2 = 0.5 * a * b / w * (1.0 - c2)
        + 0.5 * a * a * (t + s2 / (2.0 * w))
        + 0.5 * b * b * (t - s2 / (2.0 * w));
    let k = 1.0 / inv_k2.sqrt();
    let integral = v * (w * t).sin() + b * (1.0 - (w * t).cos()) / w;
    if integral < 0.0 {
        -k
    } else {
        k
    }
}

/// `delta_1 = integral of m(t) e_1(t)` for the OU mean `m(t) = e^{-qt} m0 + (1 - e^{-qt}) m`.
pub fn delta1_stein_stein(q: f64, sigma: f64, sigma0: f64, m: f64, m0: f64, horizon: f64) -> Result<f64> {
    let roots = ou_frequencies(q, sigma, sigma0, horizon, 1)?;
    Ok(ou_delta(&roots, 0, m, m0))
}

/// Closed-form projection of the OU mean on `e_n` (zero-based `n`).
fn ou_delta(roots: &OuRoots, n: usize, m: f64, m0: f64) -> f64 {
    let (q, t) = (roots.q, roots.horizon);
    let w = roots.w[n];
    let k = roots.normalizers[n];
    let (s, c) = (w * t).sin_cos();
    let e = (-q * t).exp();
    if roots.random_start() {
        let v = roots.sigma0 * roots.sigma0;
        let s2 = roots.sigma * roots.sigma;
        k * m * (s2 - q * v) * (1.0 - c) / w
            + k * v * s * ((m0 - m) * e + m)
            + k * s2 * (m0 - m) * (w * (1.0 - e * c) - q * e * s) / (q * q + w * w)
    } else {
        // k carries the normalization of sin(w t)
        k * (m * q * q * (1.0 - c) + w * w * (m0 - m * c)) / (w * (q * q + w * w))
    }
}

/// `integral_0^T m(t)^2 dt` for the OU mean.
fn ou_mean_square(q: f64, m: f64, m0: f64, horizon: f64) -> f64 {
    let d = m0 - m;
    m * m * horizon
        + 2.0 * m * d * (1.0 - (-q * horizon).exp()) / q
        + d * d * (1.0 - (-2.0 * q * horizon).exp()) / (2.0 * q)
}

/// `integral_0^T Q(t, t) dt` for the OU covariance with initial deviation `sigma0`.
fn ou_trace(q: f64, sigma: f64, sigma0: f64, horizon: f64) -> f64 {
    let g = (1.0 - (-2.0 * q * horizon).exp()) / (2.0 * q);
    sigma0 * sigma0 * g + sigma * sigma / (2.0 * q) * (horizon - g)
}

/// Analytic spectrum of the OU process; `sigma0^2 = sigma^2/(2q)` gives the stationary case.
pub fn ou_spectrum(
    q: f64,
    sigma: f64,
    sigma0: f64,
    m: f64,
    m0: f64,
    horizon: f64,
    count: usize,
) -> Result<Spectrum> {
    let roots = ou_frequencies(q, sigma, sigma0, horizon, count)?;
    let eigenvalues: Vec<f64> = (0..count).map(|n| roots.eigenvalue(n)).collect();
    let delta_coeffs: Vec<f64> = (0..count).map(|n| ou_delta(&roots, n, m, m0)).collect();
    let s = ou_mean_square(q, m, m0, horizon);
    let trace = ou_trace(q, sigma, sigma0, horizon);
    let grid = uniform_grid(1024, horizon);
    let eigenfunctions = (0..count.min(SAMPLED_MODES))
        .map(|n| grid.iter().map(|&t| roots.eigenfunction(n, t)).collect())
        .collect();
    let kernel = if sigma0 == 0.0 {
        CovarianceKernel::OuDeterministicStart { q, sigma }
    } else {
        CovarianceKernel::OuRandomStart { q, sigma, sigma0 }
    };
    let mut spec = Spectrum::from_values(horizon, eigenvalues, delta_coeffs, s, trace)?;
    spec.grid = grid;
    spec.eigenfunctions = eigenfunctions;
    spec.meta = SpectrumMeta {
        method: "ou_analytic".into(),
        kernel_hash: kernel_hash(&kernel),
        grid_sizes: Vec::new(),
    };
    Ok(spec)
}

/// Contiguous grouping of a non-increasing list where the relative gap is below `tol`.
/// Returns multiplicities and group means.
pub fn group_multiplicities(eigenvalues: &[f64], tol: f64) -> (Vec<usize>, Vec<f64>) {
    let mut mult = Vec::new();
    let mut values = Vec::new();
    let mut i = 0;
    while i < eigenvalues.len() {
        let mut j = i + 1;
        while j < eigenvalues.len()
            && (eigenvalues[j - 1] - eigenvalues[j]).abs() < tol * eigenvalues[j - 1].abs()
        {
            j += 1;
        }
        mult.push(j - i);
        values.push(eigenvalues[i..j].iter().sum::<f64>() / (j - i) as f64);
        i = j;
    }
    (mult, values)
}

fn uniform_grid(intervals: usize, horizon: f64) -> Vec<f64> {
    (0..=intervals)
        .map(|i| horizon * i as f64 / intervals as f64)
        .collect()
}

/// SHA-256 of the kernel's JSON form.
pub fn kernel_hash(kernel: &CovarianceKernel) -> String {
    let text = serde_json::to_string(kernel).unwrap_or_default();
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Number of modes kept by the automatic rule: stop when `lambda_n / lambda_1 < 1e-8`
/// or 99.99% of the trace is captured, with at most [`MAX_MODES`].
pub fn auto_truncation(eigenvalues: &[f64], trace: f64) -> usize {
    let mut acc = 0.0;
    for (n, &l) in eigenvalues.iter().enumerate() {
        if n >= MAX_MODES || l <= 0.0 || l < 1e-8 * eigenvalues[0] {
            return n.max(1);
        }
        acc += l;
        if acc >= 0.9999 * trace {
            return n + 1;
        }
    }
    eigenvalues.len().min(MAX_MODES)
}

/// Symmetrized Nystrom matrix `W^{1/2} Q W^{1/2}` with trapezoid weights `W`.
fn nystrom_matrix(kernel: &CovarianceKernel, horizon: f64, intervals: usize) -> (DMatrix<f64>, Vec<f64>) {
    let n = intervals + 1;
    let grid = uniform_grid(intervals, horizon);
    let w = trapezoid_weights(n, horizon);
    let sw: Vec<f64> = w.iter().map(|x| x.sqrt()).collect();
    let mut a = DMatrix::zeros(n, n);
    if let Some(lag) = kernel.stationary_lag() {
        let h = horizon / intervals as f64;
        let r: Vec<f64> = (0..n).map(|j| lag(j as f64 * h)).collect();
        for j in 0..n {
            for i in 0..n {
                a[(i, j)] = sw[i] * r[i.abs_diff(j)] * sw[j];
            }
        }
    } else {
        for j in 0..n {
            for i in 0..=j {
                let v = sw[i] * kernel.eval(grid[i], grid[j], horizon) * sw[j];
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
        }
    }
    (a, w)
}

/// Leading `k` eigenpairs of a symmetric PSD matrix.
fn top_eigenpairs(a: &DMatrix<f64>, k: usize) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.nrows();
    if k * 8 > n || n <= 64 {
        let eig = SymmetricEigen::new(a.clone());
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());
        let vals = idx[..k].iter().map(|&i| eig.eigenvalues[i]).collect();
        let vecs = DMatrix::from_fn(n, k, |r, c| eig.eigenvectors[(r, idx[c])]);
        return (vals, vecs);
    }
    subspace_iteration(a, k)
}

/// Block power iteration with Rayleigh-Ritz projection.
fn subspace_iteration(a: &DMatrix<f64>, k: usize) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let p = (k + 6).min(n);
    // deterministic start: low-frequency cosines plus a ramp
    let mut x = DMatrix::from_fn(n, p, |i, j| {
        let t = i as f64 / (n - 1) as f64;
        (std::f64::consts::PI * j as f64 * t).cos() + 0.01 * t * (j + 1) as f64
    });
    x = x.qr().q();
    let mut prev = vec![f64::INFINITY; k];
    for _ in 0..500 {
        let y = a * &x;
        let q = y.qr().q();
        let h = q.transpose() * a * &q;
        let eig = SymmetricEigen::new(h);
        let mut idx: Vec<usize> = (0..p).collect();
        idx.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());
        let rot = DMatrix::from_fn(p, p, |r, c| eig.eigenvectors[(r, idx[c])]);
        x = &q * rot;
        let vals: Vec<f64> = idx[..k].iter().map(|&i| eig.eigenvalues[i]).collect();
        let done = vals
            .iter()
            .zip(&prev)
            .all(|(v, p)| (v - p).abs() <= 1e-15 * vals[0].abs());
        prev = vals;
        if done {
            break;
        }
    }
    let vecs = x.columns(0, k).into_owned();
    (prev, vecs)
}

/// Richardson extrapolation of values computed on grids with `intervals`, assuming an
/// error expansion in even powers of the step.
pub fn richardson(intervals: &[usize], values: &[f64]) -> f64 {
    let mut table: Vec<f64> = values.to_vec();
    let h: Vec<f64> = intervals.iter().map(|&n| 1.0 / n as f64).collect();
    for level in 1..table.len() {
        let mut next = Vec::with_capacity(table.len() - 1);
        for i in 0..table.len() - 1 {
            let r = (h[i] / h[i + level]).powi(2);
            next.push(table[i + 1] + (table[i + 1] - table[i]) / (r - 1.0));
        }
        table = next;
    }
    table[0]
}

/// Nystrom discretization with trapezoid weights on each grid, Richardson-extrapolated
/// eigenvalues, and eigenfunctions from the finest grid. `count = None` applies
/// [`auto_truncation`].
pub fn nystrom_spectrum(
    kernel: &CovarianceKernel,
    mean: &MeanFunction,
    horizon: f64,
    grid_sizes: &[usize],
    count: Option<usize>,
) -> Result<Spectrum> {
    if grid_sizes.len() < 2 || grid_sizes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Validation("grid sizes must be strictly increasing, at least two".into()));
    }
    if !(horizon > 0.0) {
        return Err(Error::Validation("horizon must be positive".into()));
    }
    let finest = *grid_sizes.last().unwrap();
    let coarsest = grid_sizes[0];
    let want = match count {
        Some(c) if c >= 1 => c.min(coarsest + 1),
        Some(_) => return Err(Error::Validation("mode count must be positive".into())),
        None => MAX_MODES.min(coarsest + 1),
    };
    let mut per_grid: Vec<Vec<f64>> = Vec::new();
    let mut fine_vecs = DMatrix::zeros(0, 0);
    let mut fine_w = Vec::new();
    for &n in grid_sizes {
        let (a, w) = nystrom_matrix(kernel, horizon, n);
        let (vals, vecs) = top_eigenpairs(&a, want);
        if let Some(neg) = vals.iter().copied().find(|v| *v < -1e-10 * vals[0].abs()) {
            return Err(Error::Validation(format!(
                "kernel is not positive semidefinite (eigenvalue {neg:e})"
            )));
        }
        per_grid.push(vals);
        if n == finest {
            fine_vecs = vecs;
            fine_w = w;
        }
    }
    let fine_vals = per_grid.last().unwrap().clone();
    // extrapolate only modes resolved on the coarsest grid
    let resolved = (coarsest / 8).max(1);
    let mut eigenvalues: Vec<f64> = (0..want)
        .map(|k| {
            if k < resolved {
                let vals: Vec<f64> = per_grid.iter().map(|g| g[k]).collect();
                let ex = richardson(grid_sizes, &vals);
                if ex > 0.0 {
                    ex
                } else {
                    fine_vals[k]
                }
            } else {
                fine_vals[k]
            }
        })
        .collect();
    for i in 1..eigenvalues.len() {
        if eigenvalues[i] > eigenvalues[i - 1] {
            eigenvalues[i] = eigenvalues[i - 1];
        }
    }

    let grid = uniform_grid(finest, horizon);
    let npts = grid.len();
    let diag: Vec<f64> = grid.iter().map(|&t| kernel.eval(t, t, horizon)).collect();
    let trace: f64 = diag.iter().zip(&fine_w).map(|(d, w)| d * w).sum();

    let keep = match count {
        Some(_) => want,
        None => auto_truncation(&eigenvalues, trace),
    };
    eigenvalues.truncate(keep);
    while eigenvalues.last().is_some_and(|l| *l <= 0.0) {
        eigenvalues.pop();
    }
    let keep = eigenvalues.len();
    if keep == 0 {
        return Err(Error::Validation("kernel has no positive eigenvalues".into()));
    }

    let mvals: Vec<f64> = grid.iter().map(|&t| mean.eval(t)).collect();
    let s: f64 = mvals.iter().zip(&fine_w).map(|(m, w)| m * m * w).sum();
    let mut delta_coeffs = Vec::with_capacity(keep);
    let mut eigenfunctions = Vec::new();
    for k in 0..keep {
        let mut e: Vec<f64> = (0..npts).map(|i| fine_vecs[(i, k)] / fine_w[i].sqrt()).collect();
        let integral: f64 = e.iter().zip(&fine_w).map(|(v, w)| v * w).sum();
        let flip = if integral.abs() > 1e-12 * e.iter().map(|v| v.abs()).fold(0.0, f64::max) * horizon {
            integral < 0.0
        } else {
            e[1] < 0.0
        };
        if flip {
            e.iter_mut().for_each(|v| *v = -*v);
        }
        delta_coeffs.push(e.iter().zip(&mvals).zip(&fine_w).map(|((e, m), w)| e * m * w).sum());
        if k < SAMPLED_MODES {
            eigenfunctions.push(e);
        }
    }
    let (multiplicities, distinct_values) = group_multiplicities(&eigenvalues, NUMERIC_GROUP_TOL);
    let tau = clamp_tau(s, s - delta_coeffs.iter().map(|d| d * d).sum::<f64>());
    Ok(Spectrum {
        horizon,
        truncation_count: keep,
        eigenvalues,
        grid,
        eigenfunctions,
        multiplicities,
        distinct_values,
        delta_coeffs,
        s,
        tau,
        trace,
        meta: SpectrumMeta {
            method: "nystrom".into(),
            kernel_hash: kernel_hash(kernel),
            grid_sizes: grid_sizes.to_vec(),
        },
    })
}

/// Spectrum of a model: analytic for OU kernels with an OU-type mean, Nystrom otherwise.
pub fn model_spectrum(spec: &ModelSpec, count: Option<usize>, grid_sizes: &[usize]) -> Result<Spectrum> {
    spec.validate()?;
    let horizon = spec.maturity;
    let ou = match spec.kernel {
        CovarianceKernel::OuDeterministicStart { q, sigma } => Some((q, sigma, 0.0)),
        CovarianceKernel::OuRandomStart { q, sigma, sigma0 } => Some((q, sigma, sigma0)),
        CovarianceKernel::OuStationary { q, sigma } => Some((q, sigma, (sigma * sigma / (2.0 * q)).sqrt())),
        _ => None,
    };
    if let Some((q, sigma, sigma0)) = ou {
        let mean = match spec.mean {
            MeanFunction::Constant { level } => Some((level, level)),
            MeanFunction::OuRelaxation { m0, m, q: qm } if qm == q => Some((m, m0)),
            _ => None,
        };
        if let Some((m, m0)) = mean {
            let n = match count {
                Some(c) => c,
                None => {
                    // enough analytic modes for the automatic rule to terminate
                    let probe = ou_frequencies(q, sigma, sigma0, horizon, MAX_MODES)?;
                    let vals: Vec<f64> = (0..MAX_MODES).map(|n| probe.eigenvalue(n)).collect();
                    auto_truncation(&vals, ou_trace(q, sigma, sigma0, horizon))
                }
            };
            return ou_spectrum(q, sigma, sigma0, m, m0, horizon, n);
        }
    }
    nystrom_spectrum(&spec.kernel, &spec.mean, horizon, grid_sizes, count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const T1: f64 = 1.0 / 12.0;

    fn stationary_sigma0(q: f64, sigma: f64) -> f64 {
        (sigma * sigma / (2.0 * q)).sqrt()
    }

    fn simpson<G: Fn(f64) -> f64>(f: G, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn stationary_top_eigenvalue() {
        let roots = ou_frequencies(7.0, 1.2, stationary_sigma0(7.0, 1.2), T1, 3).unwrap();
        assert!((roots.w[0] - 12.37).abs() < 0.01, "w1 = {}", roots.w[0]);
        assert!((roots.eigenvalue(0) - 0.00713).abs() < 5e-6);
        // the stationary equation reduces to 2qw cos + (q^2 - w^2) sin = 0
        for &w in &roots.w {
            let r = 14.0 * w * (w * T1).cos() + (49.0 - w * w) * (w * T1).sin();
            assert!(r.abs() < 1e-9 * w * w);
        }
    }

    #[test]
    fn deterministic_start_root_in_second_quarter() {
        let roots = ou_frequencies(7.0, 1.2, 0.0, T1, 4).unwrap();
        let w1t = roots.w[0] * T1;
        assert!(w1t > std::f64::consts::FRAC_PI_2 && w1t < std::f64::consts::PI);
        // independent bisection on (pi/2T, pi/T)
        let f = |w: f64| w * (w * T1).cos() + 7.0 * (w * T1).sin();
        let (mut a, mut b) = (std::f64::consts::FRAC_PI_2 / T1, std::f64::consts::PI / T1);
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if f(a) * f(m) <= 0.0 {
                b = m;
            } else {
                a = m;
            }
        }
        assert_relative_eq!(roots.w[0], 0.5 * (a + b), max_relative = 1e-13);
        for (n, &w) in roots.w.iter().enumerate() {
            assert!(w > n as f64 * std::f64::consts::PI / T1 && w < (n + 1) as f64 * std::f64::consts::PI / T1);
        }
    }

    #[test]
    fn small_q_limit() {
        let roots = ou_frequencies(1e-9, 1.0, 0.0, 1.0, 1).unwrap();
        assert!((roots.w[0] - std::f64::consts::FRAC_PI_2).abs() < 1e-6);
    }

    #[test]
    fn eigenfunctions_are_orthonormal() {
        for &sigma0 in &[0.0, 0.1, stationary_sigma0(7.0, 1.2), 0.9] {
            let roots = ou_frequencies(7.0, 1.2, sigma0, T1, 5).unwrap();
            for i in 0..5 {
                for j in 0..5 {
                    let ip = simpson(|t| roots.eigenfunction(i, t) * roots.eigenfunction(j, t), 0.0, T1, 4000);
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((ip - want).abs() < 1e-9, "sigma0={sigma0} <e{i},e{j}> = {ip}");
                }
                let int = simpson(|t| roots.eigenfunction(i, t), 0.0, T1, 4000);
                assert!(int >= -1e-12);
            }
        }
    }

    #[test]
    fn eigenpairs_satisfy_integral_equation() {
        for &sigma0 in &[0.0, 0.25, stationary_sigma0(3.0, 0.8)] {
            let (q, sigma, t_end) = (3.0, 0.8, 0.5);
            let roots = ou_frequencies(q, sigma, sigma0, t_end, 3).unwrap();
            for n in 0..3 {
                for &t in &[0.1, 0.3, 0.45] {
                    let lhs = simpson(
                        |s| crate::model::ou_random_start_cov(q, sigma, sigma0, t, s) * roots.eigenfunction(n, s),
                        0.0,
                        t_end,
                        20000,
                    );
                    let rhs = roots.eigenvalue(n) * roots.eigenfunction(n, t);
                    assert!((lhs - rhs).abs() < 1e-8 * roots.eigenvalue(0), "n={n}");
                }
            }
        }
    }

    #[test]
    fn delta1_closed_forms_match_quadrature() {
        let zero = delta1_stein_stein(7.0, 1.2, 0.3, 0.0, 0.0, T1).unwrap();
        assert_eq!(zero, 0.0);
        // deterministic start, constant mean
        let (q, sigma, m) = (7.0, 1.2, 0.2);
        let roots = ou_frequencies(q, sigma, 0.0, T1, 1).unwrap();
        let w = roots.w[0];
        let reduced = m * (1.0 - (w * T1).cos()) / (w * (T1 / 2.0 - (2.0 * w * T1).sin() / (4.0 * w)).sqrt());
        assert_relative_eq!(delta1_stein_stein(q, sigma, 0.0, m, m, T1).unwrap(), reduced, max_relative = 1e-12);
        let quad = simpson(|t| m * roots.eigenfunction(0, t), 0.0, T1, 10000);
        assert_relative_eq!(reduced, quad, max_relative = 1e-8);
        // random parameter draws for both branches
        let mut state = 12345u64;
        let mut uni = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..20 {
            let q = 0.5 + 10.0 * uni();
            let sigma = 0.2 + 2.0 * uni();
            let sigma0 = if uni() < 0.3 { 0.0 } else { 0.05 + 0.5 * uni() };
            let m = 0.4 * uni() - 0.1;
            let m0 = 0.4 * uni();
            let t_end = 0.05 + uni();
            let d = delta1_stein_stein(q, sigma, sigma0, m, m0, t_end).unwrap();
            let roots = ou_frequencies(q, sigma, sigma0, t_end, 1).unwrap();
            let mean = |t: f64| (-q * t).exp() * m0 + (1.0 - (-q * t).exp()) * m;
            let quad = simpson(|t| mean(t) * roots.eigenfunction(0, t), 0.0, t_end, 10000);
            assert!((d - quad).abs() <= 1e-8 * d.abs().max(1e-3), "{d} vs {quad}");
        }
    }

    #[test]
    fn higher_deltas_match_quadrature() {
        for &(sigma0, m, m0) in &[(0.0, 0.2, 0.35), (0.3, 0.2, 0.2), (0.15, -0.1, 0.25)] {
            let sp = ou_spectrum(7.0, 1.2, sigma0, m, m0, T1, 8).unwrap();
            let roots = ou_frequencies(7.0, 1.2, sigma0, T1, 8).unwrap();
            let mean = |t: f64| (-7.0 * t).exp() * m0 + (1.0 - (-7.0 * t).exp()) * m;
            for n in 1..8 {
                let quad = simpson(|t| mean(t) * roots.eigenfunction(n, t), 0.0, T1, 20000);
                assert!((sp.delta_coeffs[n] - quad).abs() < 1e-9, "n={n}: {} vs {quad}", sp.delta_coeffs[n]);
            }
        }
    }

    #[test]
    fn ou_spectrum_bookkeeping() {
        let sp = ou_spectrum(7.0, 1.2, stationary_sigma0(7.0, 1.2), 0.2, 0.2, T1, 200).unwrap();
        assert!(sp.multiplicities.iter().all(|&n| n == 1));
        assert!(sp.tau >= -1e-10);
        assert!(sp.delta_coeffs.iter().map(|d| d * d).sum::<f64>() <= sp.s);
        assert_relative_eq!(sp.s, 0.04 * T1, max_relative = 1e-14);
        assert_relative_eq!(sp.trace, 1.44 / 14.0 * T1, max_relative = 1e-14);
        assert!(sp.eigenvalues.iter().sum::<f64>() < sp.trace);
    }

    #[test]
    fn multiplicity_grouping() {
        let (n, _) = group_multiplicities(&[0.00713, 0.00207, 0.00095], 1e-6);
        assert_eq!(n, vec![1, 1, 1]);
        let (n, r) = group_multiplicities(&[1.0, 1.0 - 1e-9, 0.5], 1e-6);
        assert_eq!(n, vec![2, 1]);
        assert!((r[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_pair_from_tabulated_kernel() {
        let grid: Vec<f64> = (0..=512).map(|i| i as f64 / 512.0).collect();
        let e = |t: f64| 2f64.sqrt() * (std::f64::consts::PI * t).sin();
        let f = |t: f64| 2f64.sqrt() * (2.0 * std::f64::consts::PI * t).sin();
        let matrix: Vec<Vec<f64>> = grid
            .iter()
            .map(|&t| grid.iter().map(|&s| e(t) * e(s) + f(t) * f(s)).collect())
            .collect();
        let kernel = CovarianceKernel::Tabulated { grid, matrix };
        let mean = MeanFunction::Constant { level: 0.0 };
        let sp = nystrom_spectrum(&kernel, &mean, 1.0, &[256, 512], Some(3)).unwrap();
        assert_eq!(sp.multiplicities[0], 2, "{:?}", sp.eigenvalues);
        assert!((sp.distinct_values[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn brownian_motion_eigenvalues() {
        let kernel = CovarianceKernel::BrownianMotion { scale: 1.0 };
        let mean = MeanFunction::Constant { level: 0.0 };
        let sp = nystrom_spectrum(&kernel, &mean, 1.0, &[256, 512], Some(4)).unwrap();
        for n in 0..4 {
            let want = 4.0 / ((2 * n + 1) as f64 * std::f64::consts::PI).powi(2);
            assert_relative_eq!(sp.eigenvalues[n], want, max_relative = 1e-5);
        }
    }

    #[test]
    fn nystrom_matches_analytic_ou() {
        let (q, sigma) = (7.0, 1.2);
        let kernel = CovarianceKernel::OuStationary { q, sigma };
        let mean = MeanFunction::Constant { level: 0.2 };
        let num = nystrom_spectrum(&kernel, &mean, T1, &[512, 1024], Some(5)).unwrap();
        let ana = ou_spectrum(q, sigma, stationary_sigma0(q, sigma), 0.2, 0.2, T1, 5).unwrap();
        for n in 0..3 {
            assert_relative_eq!(num.eigenvalues[n], ana.eigenvalues[n], max_relative = 1e-4);
            assert_relative_eq!(num.delta_coeffs[n], ana.delta_coeffs[n], max_relative = 1e-3, epsilon = 1e-7);
        }
        assert!((num.eigenvalues[0] - 0.00713).abs() < 2e-5);
    }

    #[test]
    fn richardson_removes_quadratic_error() {
        let f = |n: usize| 1.0 + 3.0 / (n * n) as f64;
        assert_relative_eq!(richardson(&[10, 20], &[f(10), f(20)]), 1.0, max_relative = 1e-14);
        let g = |n: usize| 2.0 + 1.0 / (n * n) as f64 + 5.0 / (n as f64).powi(4);
        assert_relative_eq!(richardson(&[8, 16, 32], &[g(8), g(16), g(32)]), 2.0, max_relative = 1e-13);
    }

    #[test]
    fn spectrum_json_round_trip() {
        let sp = ou_spectrum(7.0, 1.2, 0.0, 0.2, 0.1, T1, 4).unwrap();
        let back = Spectrum::from_json(&sp.to_json().unwrap()).unwrap();
        assert_eq!(back, sp);
    }
}
