//! Monte Carlo and mixture option pricers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};

pub use crate::bs::{bs_call, bs_implied_vol, bs_put, bs_vega, implied_total_vol_otm, normalized_otm};
use crate::error::{Error, Result};
use crate::fbm::{fgn_autocovariance, toeplitz_solve, FbmGenerator};
use crate::model::{fou_start_increment_cov, fou_variance, CovarianceKernel, ModelSpec};
use crate::special::{norm_inv_cdf, GaussHermite};
use crate::spectrum::Spectrum;

/// Paths per RNG stream. Fixed so results do not depend on the thread count.
pub const PATH_BATCH: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    EulerPath,
    KlMixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub scheme: Scheme,
    /// Antithetic pairs on the asset Brownian motion.
    #[serde(default)]
    pub antithetic: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { n_paths: 1_000_000, n_steps: 1_000, seed: 42, scheme: Scheme::EulerPath, antithetic: false }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_paths < 1 {
            return Err(Error::Validation("n_paths must be at least 1".into()));
        }
        if self.n_steps < 2 {
            return Err(Error::Validation("n_steps must be at least 2".into()));
        }
        Ok(())
    }
}

/// Call price and implied volatility at one strike.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PricedPoint {
    pub k: f64,
    pub strike: f64,
    pub price: f64,
    pub std_err: f64,
    /// `None` when the price is too close to the no-arbitrage bounds to invert.
    pub iv: Option<f64>,
}

/// Prices plus the martingale diagnostic `E[e^{-rT} S_T]` and its standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PricingRun {
    pub points: Vec<PricedPoint>,
    pub discounted_mean: f64,
    pub discounted_mean_se: f64,
    pub n_paths: usize,
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
struct Sum {
    s: f64,
    c: f64,
}

impl Sum {
    fn add(&mut self, x: f64) {
        let t = self.s + x;
        if self.s.abs() >= x.abs() {
            self.c += (self.s - t) + x;
        } else {
            self.c += (x - t) + self.s;
        }
        self.s = t;
    }

    fn value(&self) -> f64 {
        self.s + self.c
    }
}

/// Per-batch first and second moments of the normalized out-of-the-money payoffs
/// (one per strike) followed by the normalized terminal price.
struct Moments {
    sum: Vec<f64>,
    sq: Vec<f64>,
    count: usize,
}

impl Moments {
    fn new(width: usize) -> Moments {
        Moments { sum: vec![0.0; width], sq: vec![0.0; width], count: 0 }
    }

    fn push(&mut self, values: &[f64]) {
        for (i, v) in values.iter().enumerate() {
            self.sum[i] += v;
            self.sq[i] += v * v;
        }
        self.count += 1;
    }
}

fn log_moneyness(spec: &ModelSpec, strikes: &[f64]) -> Result<Vec<f64>> {
    let fwd = spec.s0 * (spec.r * spec.maturity).exp();
    strikes
        .iter()
        .map(|&k| {
            if k > 0.0 && k.is_finite() {
                Ok((k / fwd).ln())
            } else {
                Err(Error::Validation(format!("strikes must be positive, got {k}")))
            }
        })
        .collect()
}

/// Turns batch moments of normalized payoffs into priced points and the martingale check.
fn finish(spec: &ModelSpec, strikes: &[f64], ks: &[f64], batches: Vec<Moments>) -> PricingRun {
    let width = ks.len() + 1;
    let mut sum = vec![Sum::default(); width];
    let mut sq = vec![Sum::default(); width];
    let mut n = 0usize;
    for b in &batches {
        for i in 0..width {
            sum[i].add(b.sum[i]);
            sq[i].add(b.sq[i]);
        }
        n += b.count;
    }
    let nf = n as f64;
    let stats = |i: usize| {
        let mean = sum[i].value() / nf;
        let var = if n > 1 { ((sq[i].value() - nf * mean * mean) / (nf - 1.0)).max(0.0) } else { 0.0 };
        (mean, (var / nf).sqrt())
    };
    let df = (-spec.r * spec.maturity).exp();
    let sqrt_t = spec.maturity.sqrt();
    let points = strikes
        .iter()
        .zip(ks)
        .enumerate()
        .map(|(i, (&strike, &k))| {
            let (otm, se) = stats(i);
            let otm_price = spec.s0 * otm;
            let price = if k >= 0.0 { otm_price } else { otm_price + spec.s0 - strike * df };
            let iv = implied_total_vol_otm(k, otm).ok().filter(|v| *v > 0.0).map(|v| v / sqrt_t);
            PricedPoint { k, strike, price, std_err: spec.s0 * se, iv }
        })
        .collect();
    let (m, se) = stats(ks.len());
    PricingRun { points, discounted_mean: spec.s0 * m, discounted_mean_se: spec.s0 * se, n_paths: n }
}

/// Normalized payoffs for terminal `S_T / F = e^{x}`: OTM payoff per strike, then `e^x`.
/// `eks` holds `e^k` for each log-moneyness.
fn payoffs(x: f64, ks: &[f64], eks: &[f64], out: &mut [f64]) {
    let s = x.exp();
    for ((o, &k), &ek) in out.iter_mut().zip(ks).zip(eks) {
        *o = if k >= 0.0 { (s - ek).max(0.0) } else { (ek - s).max(0.0) };
    }
    out[ks.len()] = s;
}

enum Driver {
    Brownian { q: f64, sigma: f64, sd0: f64 },
    /// fBm-driven Euler with a stationary start drawn given the increments:
    /// `y0 = sum weights_j dB_j + resid_sd xi`.
    Fractional { q: f64, sigma: f64, generator: FbmGenerator, weights: Vec<f64>, resid_sd: f64 },
}

fn driver(spec: &ModelSpec, n_steps: usize) -> Result<Driver> {
    Ok(match spec.kernel {
        CovarianceKernel::OuStationary { q, sigma } => {
            Driver::Brownian { q, sigma, sd0: sigma / (2.0 * q).sqrt() }
        }
        CovarianceKernel::OuRandomStart { q, sigma, sigma0 } => Driver::Brownian { q, sigma, sd0: sigma0 },
        CovarianceKernel::OuDeterministicStart { q, sigma } => Driver::Brownian { q, sigma, sd0: 0.0 },
        CovarianceKernel::BrownianMotion { scale } => Driver::Brownian { q: 0.0, sigma: scale, sd0: 0.0 },
        CovarianceKernel::FouStationary { q, sigma, hurst } => {
            // Long memory correlates the stationary start with the increments on [0, T];
            // y0 is drawn from its conditional law given them.
            let generator = FbmGenerator::new(hurst, n_steps, spec.maturity)?;
            let dt = spec.maturity / n_steps as f64;
            let (weights, resid_sd) = if sigma == 0.0 {
                (vec![0.0; n_steps], 0.0)
            } else {
                let scale = dt.powf(2.0 * hurst);
                let col: Vec<f64> = (0..n_steps).map(|j| scale * fgn_autocovariance(hurst, j)).collect();
                let cross: Vec<f64> = (0..n_steps)
                    .map(|j| sigma * fou_start_increment_cov(q, 1.0, hurst, j as f64 * dt, (j + 1) as f64 * dt))
                    .collect();
                let weights = toeplitz_solve(&col, &cross)?;
                let explained: f64 = weights.iter().zip(&cross).map(|(w, c)| w * c).sum();
                (weights, (fou_variance(q, sigma, hurst) - explained).max(0.0).sqrt())
            };
            Driver::Fractional { q, sigma, generator, weights, resid_sd }
        }
        _ => {
            return Err(Error::Validation(
                "the Euler pricer supports OU, fractional OU and Brownian volatility kernels".into(),
            ))
        }
    })
}

/// Euler path simulation of the volatility, with the asset driven by an independent
/// Brownian motion. The fractional OU is driven by exact circulant fBm increments. Given the discretized path, `sum |X_i| dW_i` is exactly normal with
/// variance `V = sum X_i^2 dt`, so it is drawn as `sqrt(V) xi` with a single normal.
pub fn price_calls_euler(spec: &ModelSpec, strikes: &[f64], config: &SimConfig) -> Result<PricingRun> {
    spec.validate()?;
    config.validate()?;
    let ks = log_moneyness(spec, strikes)?;
    let n_steps = config.n_steps;
    let dt = spec.maturity / n_steps as f64;
    let sqrt_dt = dt.sqrt();
    let mean: Vec<f64> = (0..n_steps).map(|i| spec.mean_at(i as f64 * dt)).collect();
    let drv = driver(spec, n_steps)?;
    let eks: Vec<f64> = ks.iter().map(|k| k.exp()).collect();
    let n_batches = config.n_paths.div_ceil(PATH_BATCH);
    let width = ks.len() + 1;

    let batches: Vec<Moments> = (0..n_batches)
        .into_par_iter()
        .map(|batch| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(batch as u64);
            let paths = PATH_BATCH.min(config.n_paths - batch * PATH_BATCH);
            let mut acc = Moments::new(width);
            let mut pay = vec![0.0; width];
            let mut pay2 = vec![0.0; width];
            let mut variances = Vec::with_capacity(paths);
            match &drv {
                Driver::Brownian { q, sigma, sd0 } => {
                    for _ in 0..paths {
                        let mut y = sd0 * rng.sample::<f64, _>(StandardNormal);
                        let mut v = 0.0;
                        for m in &mean {
                            let x = m + y;
                            v += x * x;
                            let z: f64 = rng.sample(StandardNormal);
                            y += -q * y * dt + sigma * sqrt_dt * z;
                        }
                        variances.push(v * dt);
                    }
                }
                Driver::Fractional { q, sigma, generator, weights, resid_sd } => {
                    let mut scratch = vec![Complex::new(0.0, 0.0); generator.embedding_size()];
                    let mut inc = [vec![0.0; n_steps], vec![0.0; n_steps]];
                    let mut done = 0;
                    while done < paths {
                        let [a, b] = &mut inc;
                        generator.fill_pair(&mut rng, &mut scratch, a, b);
                        for path in inc.iter().take(paths - done) {
                            let start: f64 = weights.iter().zip(path).map(|(w, dz)| w * dz).sum();
                            let mut y = start + resid_sd * rng.sample::<f64, _>(StandardNormal);
                            let mut v = 0.0;
                            for (m, dz) in mean.iter().zip(path) {
                                let x = m + y;
                                v += x * x;
                                y += -q * y * dt + sigma * dz;
                            }
                            variances.push(v * dt);
                            done += 1;
                        }
                    }
                }
            }
            for v in variances {
                let xi: f64 = rng.sample(StandardNormal);
                let sd = v.sqrt();
                payoffs(-0.5 * v + sd * xi, &ks, &eks, &mut pay);
                if config.antithetic {
                    payoffs(-0.5 * v - sd * xi, &ks, &eks, &mut pay2);
                    for (p, p2) in pay.iter_mut().zip(&pay2) {
                        *p = 0.5 * (*p + p2);
                    }
                }
                acc.push(&pay);
            }
            acc
        })
        .collect();
    Ok(finish(spec, strikes, &ks, batches))
}

/// Conditional Black-Scholes pricing over Karhunen-Loeve samples of the integrated
/// variance. The leading mode is stratified across the full sample.
pub fn price_calls_mixture(spectrum: &Spectrum, spec: &ModelSpec, strikes: &[f64], config: &SimConfig) -> Result<PricingRun> {
    spec.validate()?;
    config.validate()?;
    let ks = log_moneyness(spec, strikes)?;
    let width = ks.len() + 1;
    let n = config.n_paths;
    let shift: Vec<f64> = spectrum
        .eigenvalues
        .iter()
        .zip(&spectrum.delta_coeffs)
        .map(|(l, d)| if *l > 0.0 { d / l.sqrt() } else { 0.0 })
        .collect();
    // modes beyond the truncation enter through their mean
    let tau = spectrum.tau.max(0.0) + spectrum.tail_trace();
    let n_batches = n.div_ceil(PATH_BATCH);
    let batches: Vec<Moments> = (0..n_batches)
        .into_par_iter()
        .map(|batch| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(batch as u64);
            let start = batch * PATH_BATCH;
            let end = (start + PATH_BATCH).min(n);
            let mut acc = Moments::new(width);
            let mut out = vec![0.0; width];
            for i in start..end {
                let mut gamma = tau;
                for (j, (l, m)) in spectrum.eigenvalues.iter().zip(&shift).enumerate() {
                    let z = if j == 0 {
                        let u: f64 = rng.gen();
                        norm_inv_cdf(((i as f64 + u) / n as f64).clamp(1e-300, 1.0 - 1e-16))
                    } else {
                        rng.sample(StandardNormal)
                    };
                    let y = z + m;
                    gamma += l * y * y;
                }
                let v = gamma.max(0.0).sqrt();
                for (o, &k) in out.iter_mut().zip(&ks) {
                    *o = normalized_otm(k, v);
                }
                out[ks.len()] = 1.0;
                acc.push(&out);
            }
            acc
        })
        .collect();
    Ok(finish(spec, strikes, &ks, batches))
}

/// Quadrature estimate of `E[S^p]` for `S = exp(sigma X W - sigma^2 X^2 / 2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentProbe {
    pub p: f64,
    /// Natural log of the estimate at the finest rule.
    pub ln_estimate: f64,
    pub finite: bool,
}

/// Rule sizes used by the moment probe.
pub const PROBE_NODES: [usize; 3] = [128, 256, 512];

/// Log of the `n x n` tensor Gauss-Hermite estimate of `E[S^p]` and the share of the
/// sum carried by nodes in the outer fifth of the rule.
fn gh_moment(rule: &GaussHermite, sigma: f64, p: f64) -> (f64, f64) {
    let amax = rule.nodes[0];
    let mut terms = Vec::with_capacity(rule.nodes.len() * rule.nodes.len());
    for (a, la) in rule.nodes.iter().zip(&rule.ln_weights) {
        for (b, lb) in rule.nodes.iter().zip(&rule.ln_weights) {
            let outer = a.abs().max(b.abs()) > 0.8 * amax;
            terms.push((la + lb + 2.0 * p * sigma * a * b - p * sigma * sigma * a * a, outer));
        }
    }
    let top = terms.iter().map(|t| t.0).fold(f64::NEG_INFINITY, f64::max);
    let (mut total, mut outer) = (0.0, 0.0);
    for (t, o) in &terms {
        let e = (t - top).exp();
        total += e;
        if *o {
            outer += e;
        }
    }
    (top + total.ln() - std::f64::consts::PI.ln(), outer / total)
}

/// Classifies `E[S^p]` as finite or infinite for each `p` by watching the tensor
/// Gauss-Hermite estimate as the rule is doubled.
pub fn moment_explosion_probe(sigma: f64, p_grid: &[f64]) -> Result<Vec<MomentProbe>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Validation(format!("sigma must be positive, got {sigma}")));
    }
    let rules: Vec<GaussHermite> = PROBE_NODES.iter().map(|&n| GaussHermite::new(n)).collect();
    p_grid
        .par_iter()
        .map(|&p| {
            let est: Vec<(f64, f64)> = rules.iter().map(|r| gh_moment(r, sigma, p)).collect();
            let finite = probe_finite(&est);
            Ok(MomentProbe { p, ln_estimate: est[est.len() - 1].0, finite })
        })
        .collect()
}

/// Divergent when doubling the rule still moves the log estimate by more than a
/// quarter and over a quarter of the mass sits on the outermost nodes. Convergent
/// integrals settle well inside the rule; at 512 nodes this separates moments
/// within 0.005 of the boundary.
fn probe_finite(est: &[(f64, f64)]) -> bool {
    let n = est.len();
    let growth = est[n - 1].0 - est[n - 2].0;
    let outer = est[n - 1].1;
    !(growth > 0.25 && outer > 0.25)
}

fn csv_err(what: &str) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Validation(format!("{what} CSV: {e}"))
}

/// Writes `k,strike,price,std_err,iv`; an undefined `iv` is an empty field.
pub fn points_to_csv(points: &[PricedPoint]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in points {
        w.serialize(p).map_err(csv_err("price"))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Validation(format!("price CSV: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Validation(format!("price CSV: {e}")))
}

pub fn points_from_csv(text: &str) -> Result<Vec<PricedPoint>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(csv_err("price")))
        .collect()
}

/// Strikes from a CSV with a `strike` column, or a `k` column read as
/// log-moneyness against `forward`.
pub fn strikes_from_csv(text: &str, forward: f64) -> Result<Vec<f64>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(csv_err("strikes"))?.clone();
    let pos = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let (col, log) = match (pos("strike"), pos("k")) {
        (Some(c), _) => (c, false),
        (None, Some(c)) => (c, true),
        _ => return Err(Error::Validation("strikes CSV needs a strike or k column".into())),
    };
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(csv_err("strikes"))?;
        let x: f64 = rec
            .get(col)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Validation(format!("strikes CSV row {}: bad number", i + 2)))?;
        out.push(if log { forward * x.exp() } else { x });
    }
    if out.is_empty() {
        return Err(Error::Validation("strikes CSV has no rows".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MeanFunction;
    use crate::spectrum::model_spectrum;

    fn small(n_paths: usize, n_steps: usize, seed: u64) -> SimConfig {
        SimConfig { n_paths, n_steps, seed, ..SimConfig::default() }
    }

    #[test]
    fn deterministic_volatility_matches_black_scholes() {
        let spec = ModelSpec {
            mean: MeanFunction::Constant { level: -0.25 },
            kernel: CovarianceKernel::OuStationary { q: 3.0, sigma: 0.0 },
            maturity: 0.5,
            r: 0.03,
            s0: 100.0,
        };
        let strikes = [80.0, 100.0, 125.0];
        let run = price_calls_euler(&spec, &strikes, &small(50_000, 10, 3)).unwrap();
        for pt in &run.points {
            let want = bs_call(100.0, pt.strike, 0.25, 0.5, 0.03);
            assert!((pt.price - want).abs() < 3.0 * pt.std_err, "{pt:?} vs {want}");
        }
        assert!((run.discounted_mean - 100.0).abs() < 3.0 * run.discounted_mean_se);
    }

    #[test]
    fn single_mode_mixture_matches_quadrature() {
        let lambda = 0.04;
        let sp = Spectrum::from_values(1.0, vec![lambda], vec![0.0], 0.0, lambda).unwrap();
        let spec = ModelSpec::stein_stein(0.0, 1.0, 1.0, 1.0);
        let strikes = [(-0.2f64).exp(), 0.2f64.exp(), 0.5f64.exp()];
        let run = price_calls_mixture(&sp, &spec, &strikes, &small(1 << 18, 2, 9)).unwrap();
        let gh = GaussHermite::new(200);
        for pt in &run.points {
            let otm: f64 = gh
                .nodes
                .iter()
                .zip(&gh.ln_weights)
                .map(|(a, lw)| lw.exp() * normalized_otm(pt.k, (lambda * 2.0 * a * a).sqrt()))
                .sum::<f64>()
                / std::f64::consts::PI.sqrt();
            let want = if pt.k >= 0.0 { otm } else { otm + 1.0 - pt.strike };
            assert!((pt.price - want).abs() < 1e-6, "{} vs {want}", pt.price);
        }
    }

    #[test]
    fn mixture_smile_is_symmetric() {
        let spec = ModelSpec::stein_stein(0.2, 7.0, 1.2, 1.0 / 12.0);
        let sp = model_spectrum(&spec, Some(64), &[]).unwrap();
        let ks = [0.25, 0.5, 1.0];
        let strikes: Vec<f64> = ks.iter().flat_map(|k: &f64| [k.exp(), (-k).exp()]).collect();
        let run = price_calls_mixture(&sp, &spec, &strikes, &small(100_000, 2, 1)).unwrap();
        for pair in run.points.chunks(2) {
            let (a, b) = (pair[0].iv.unwrap(), pair[1].iv.unwrap());
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
        assert_eq!(run.discounted_mean, 1.0);
    }

    #[test]
    fn euler_and_mixture_agree() {
        let spec = ModelSpec::stein_stein(0.2, 7.0, 1.2, 0.25);
        let sp = model_spectrum(&spec, Some(128), &[]).unwrap();
        let strikes: Vec<f64> = [-0.5f64, 0.0, 0.5].iter().map(|k| k.exp()).collect();
        let euler = price_calls_euler(&spec, &strikes, &small(100_000, 200, 4)).unwrap();
        let mix = price_calls_mixture(&sp, &spec, &strikes, &small(100_000, 2, 5)).unwrap();
        for (e, m) in euler.points.iter().zip(&mix.points) {
            let se = (e.std_err.powi(2) + m.std_err.powi(2)).sqrt();
            assert!((e.price - m.price).abs() < 3.0 * se, "{e:?} vs {m:?}");
        }
        assert!((euler.discounted_mean - 1.0).abs() < 3.0 * euler.discounted_mean_se);
    }

    #[test]
    fn fractional_paths_agree_with_mixture() {
        let spec = ModelSpec::fractional_ou(0.2, 7.0, 1.2, 0.7, 1.0);
        let sp = model_spectrum(&spec, None, &[256, 512]).unwrap();
        let strikes: Vec<f64> = [-0.6f64, 0.0, 0.6].iter().map(|k| k.exp()).collect();
        let paths = price_calls_euler(&spec, &strikes, &small(60_000, 256, 6)).unwrap();
        let mix = price_calls_mixture(&sp, &spec, &strikes, &small(60_000, 2, 7)).unwrap();
        for (e, m) in paths.points.iter().zip(&mix.points) {
            let se = (e.std_err.powi(2) + m.std_err.powi(2)).sqrt();
            assert!((e.price - m.price).abs() < 3.0 * se, "{e:?} vs {m:?}");
        }
    }

    #[test]
    fn fractional_euler_is_a_martingale() {
        let spec = ModelSpec::fractional_ou(0.2, 2.0, 0.8, 0.7, 0.5);
        let run = price_calls_euler(&spec, &[1.0], &small(20_000, 64, 8)).unwrap();
        assert!((run.discounted_mean - 1.0).abs() < 3.0 * run.discounted_mean_se);
        assert!(run.points[0].iv.is_some());
    }

    #[test]
    fn results_are_reproducible_and_antithetics_help() {
        let spec = ModelSpec::stein_stein(0.2, 4.0, 0.5, 0.5);
        let cfg = small(5_000, 50, 2);
        let a = price_calls_euler(&spec, &[1.0], &cfg).unwrap();
        let b = price_calls_euler(&spec, &[1.0], &cfg).unwrap();
        assert_eq!(a, b);
        let anti = price_calls_euler(&spec, &[1.0], &SimConfig { antithetic: true, ..cfg }).unwrap();
        assert!(anti.discounted_mean_se < a.discounted_mean_se);
    }

    #[test]
    fn mixture_reduces_deep_wing_error() {
        let spec = ModelSpec::stein_stein(0.2, 7.0, 1.2, 4.0);
        let sp = model_spectrum(&spec, Some(64), &[]).unwrap();
        let strikes = [(-3.0f64).exp()];
        let cfg = small(20_000, 100, 6);
        let e = price_calls_euler(&spec, &strikes, &cfg).unwrap();
        let m = price_calls_mixture(&sp, &spec, &strikes, &cfg).unwrap();
        assert!(10.0 * m.points[0].std_err < e.points[0].std_err, "{:?} {:?}", m.points[0], e.points[0]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let spec = ModelSpec::stein_stein(0.2, 7.0, 1.2, 1.0);
        assert!(price_calls_euler(&spec, &[-1.0], &small(10, 10, 1)).is_err());
        assert!(price_calls_euler(&spec, &[1.0], &small(10, 1, 1)).is_err());
        let bridge = ModelSpec { kernel: CovarianceKernel::BrownianBridge { scale: 1.0 }, ..spec };
        assert!(price_calls_euler(&bridge, &[1.0], &small(10, 10, 1)).is_err());
    }

    #[test]
    fn moment_probe_matches_closed_form() {
        let sigma = 1.0;
        let probes = moment_explosion_probe(sigma, &[0.0, 1.0, 1.3, 1.6, 1.63, 2.0]).unwrap();
        let flags: Vec<bool> = probes.iter().map(|p| p.finite).collect();
        assert_eq!(flags, [true, true, true, true, false, false]);
        assert!(probes[0].ln_estimate.abs() < 1e-12);
        assert!(probes[1].ln_estimate.abs() < 1e-12);
        let exact = -0.5 * (1.0 - 1.3 * 0.3 * sigma * sigma).ln();
        assert!((probes[2].ln_estimate - exact).abs() < 1e-10);
    }
}
