mod manifest;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gaussvol::calibrate::{auto_window, build_hurst_table, calibrate_end_to_end, default_hurst_grid, SigmaStart, REGIME_EDGE};
use gaussvol::chaos::{chaos_constants, sample_integrated_variance, samples_to_le_bytes};
use gaussvol::pricing::{points_to_csv, price_calls_euler, price_calls_mixture, strikes_from_csv, Scheme};
use gaussvol::reproduce::{run_experiment, EXPERIMENTS};
use gaussvol::smile::{curve_to_csv, wing_curve, wing_expansion};
use gaussvol::spectrum::{model_spectrum, DEFAULT_GRIDS};
use gaussvol::{
    CalibrationMode, ChaosConstants, Direction, Error, ErrorKind, FitWindow, HurstTable, IvSlice, ModelSpec, Result, SimConfig,
    Spectrum,
};
use manifest::RunManifest;

#[derive(Parser, Debug)]
#[command(name = "gaussvol", version, about = "Wing asymptotics, pricing and calibration for Gaussian volatility models")]
struct Cli {
    /// Seed for every random stream.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, env = "GAUSSVOL_THREADS")]
    threads: Option<usize>,
    /// Output file; stdout when absent. A manifest is written next to it.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Karhunen-Loeve spectrum of a model's volatility covariance.
    Spectrum {
        #[arg(long)]
        model: PathBuf,
        /// Retained modes; chosen automatically when absent.
        #[arg(long)]
        modes: Option<usize>,
        /// Nystrom grid sizes for the extrapolation sequence.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_GRIDS)]
        grids: Vec<usize>,
    },
    /// Tail constants of integrated variance, or samples of it.
    Chaos {
        #[arg(long)]
        spectrum: PathBuf,
        /// Write this many integrated-variance samples as little-endian f64.
        #[arg(long)]
        sample: Option<usize>,
    },
    /// Asymptotic implied-volatility curve.
    Smile {
        #[arg(long)]
        chaos: PathBuf,
        #[arg(long, value_enum, default_value_t = Wing::Small)]
        direction: Wing,
        /// `lo:hi:step` in log-moneyness; defaults to the chosen wing over 0.5..4.
        #[arg(long, allow_hyphen_values = true)]
        k_grid: Option<String>,
    },
    /// Monte Carlo call prices and implied volatilities.
    Price {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value_t = SchemeArg::Euler)]
        scheme: SchemeArg,
        /// CSV with a `strike` column, or a `k` column of log-moneyness.
        #[arg(long)]
        strikes_file: PathBuf,
        #[arg(long, default_value_t = 1_000_000)]
        paths: usize,
        #[arg(long, default_value_t = 1_000)]
        steps: usize,
        #[arg(long)]
        antithetic: bool,
        /// Spectral modes for the mixture scheme; automatic when absent.
        #[arg(long)]
        modes: Option<usize>,
    },
    /// Recover the leading eigenvalue and a model parameter from a smile slice.
    Calibrate {
        /// CSV with header `k,iv` or `strike,price`.
        #[arg(long)]
        slice: PathBuf,
        /// `lo:hi` in log-moneyness, or `auto`.
        #[arg(long, allow_hyphen_values = true, default_value = "auto")]
        window: String,
        #[arg(long, value_enum, default_value_t = ModeArg::SteinStein)]
        mode: ModeArg,
        #[arg(long)]
        q: f64,
        /// Vol-of-vol, required for `fou`.
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long = "T")]
        maturity: f64,
        #[arg(long, default_value_t = 1.0)]
        s0: f64,
        #[arg(long, default_value_t = 0.0)]
        r: f64,
        #[arg(long, value_enum, default_value_t = StartArg::Stationary)]
        start: StartArg,
        /// Precomputed Hurst table for `fou`; built on demand otherwise.
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Leading eigenvalue of the fOU covariance against the Hurst exponent.
    Table {
        #[arg(long)]
        q: f64,
        #[arg(long)]
        sigma: f64,
        #[arg(long = "T")]
        maturity: f64,
        /// `lo:hi:step`; defaults to 0.50..0.99 in steps of 0.01.
        #[arg(long)]
        hurst_grid: Option<String>,
    },
    /// Rerun a published experiment and compare with its reference numbers.
    Reproduce {
        /// One of table, sigma-1m, sigma-3m, hurst, bias, or all.
        #[arg(long, default_value = "all")]
        experiment: String,
        #[arg(long, default_value_t = 1_000_000)]
        paths: usize,
        #[arg(long, default_value_t = 1_000)]
        steps: usize,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Wing {
    Small,
    Large,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SchemeArg {
    Euler,
    Mixture,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ModeArg {
    SteinStein,
    Fou,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum StartArg {
    Stationary,
    Deterministic,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Spectrum { .. } => "spectrum",
            Command::Chaos { .. } => "chaos",
            Command::Smile { .. } => "smile",
            Command::Price { .. } => "price",
            Command::Calibrate { .. } => "calibrate",
            Command::Table { .. } => "table",
            Command::Reproduce { .. } => "reproduce",
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Validation(format!("{}: {e}", path.display()))
}

fn read_input(path: &Path, manifest: &mut RunManifest) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| io_error(path, e))?;
    manifest.record_input(path, &bytes);
    String::from_utf8(bytes).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

/// Parses `lo:hi` into two numbers.
fn parse_range(text: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = text.split(':').collect();
    match parts.as_slice() {
        [a, b] => Ok((num(a)?, num(b)?)),
        _ => Err(Error::Validation(format!("expected lo:hi, got {text}"))),
    }
}

/// Parses `lo:hi:step` into the grid `lo, lo + step, ...` up to `hi` inclusive.
fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    let [lo, hi, step] = parts.as_slice() else {
        return Err(Error::Validation(format!("expected lo:hi:step, got {text}")));
    };
    let (lo, hi, step) = (num(lo)?, num(hi)?, num(step)?);
    if !(step > 0.0) || !(hi >= lo) {
        return Err(Error::Validation(format!("grid {text} needs lo <= hi and step > 0")));
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| lo + i as f64 * step).collect())
}

fn num(s: &str) -> Result<f64> {
    s.trim().parse().map_err(|_| Error::Validation(format!("not a number: {s}")))
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map(|s| s + "\n").map_err(|e| Error::Numerical(format!("serialize: {e}")))
}

/// Bytes a command produces; binary output must go to a file.
struct Output {
    bytes: Vec<u8>,
    binary: bool,
}

impl Output {
    fn text(s: String) -> Output {
        Output { bytes: s.into_bytes(), binary: false }
    }
}

fn run(cli: &Cli, manifest: &mut RunManifest) -> Result<Output> {
    match &cli.command {
        Command::Spectrum { model, modes, grids } => {
            let spec: ModelSpec = serde_json::from_str(&read_input(model, manifest)?)
                .map_err(|e| Error::Validation(format!("{}: {e}", model.display())))?;
            let sp = model_spectrum(&spec, *modes, grids).map_err(|e| e.at("spectrum"))?;
            Ok(Output::text(sp.to_json()? + "\n"))
        }
        Command::Chaos { spectrum, sample } => {
            let sp = Spectrum::from_json(&read_input(spectrum, manifest)?)?;
            match sample {
                Some(n) => {
                    if cli.out.is_none() {
                        return Err(Error::Validation("--sample writes binary data and needs --out".into()));
                    }
                    let xs = sample_integrated_variance(&sp, *n, cli.seed);
                    Ok(Output { bytes: samples_to_le_bytes(&xs), binary: true })
                }
                None => {
                    let k = chaos_constants(&sp, sp.horizon).map_err(|e| e.at("chaos"))?;
                    Ok(Output::text(k.to_json()? + "\n"))
                }
            }
        }
        Command::Smile { chaos, direction, k_grid } => {
            let k = ChaosConstants::from_json(&read_input(chaos, manifest)?)?;
            let (dir, default) = match direction {
                Wing::Small => (Direction::SmallStrike, "-4:-0.5:0.05"),
                Wing::Large => (Direction::LargeStrike, "0.5:4:0.05"),
            };
            let ks = parse_grid(k_grid.as_deref().unwrap_or(default))?;
            let e = wing_expansion::<f64>(&k, k.horizon, dir).map_err(|e| e.at("smile"))?;
            if let Some(w) = ks.iter().find_map(|&x| e.validity_warning(x)) {
                eprintln!("warning: {w}");
            }
            Ok(Output::text(curve_to_csv(&wing_curve(&e, &ks))?))
        }
        Command::Price { model, scheme, strikes_file, paths, steps, antithetic, modes } => {
            let spec: ModelSpec = serde_json::from_str(&read_input(model, manifest)?)
                .map_err(|e| Error::Validation(format!("{}: {e}", model.display())))?;
            spec.validate()?;
            let forward = spec.s0 * (spec.r * spec.maturity).exp();
            let strikes = strikes_from_csv(&read_input(strikes_file, manifest)?, forward)?;
            let config = SimConfig {
                n_paths: *paths,
                n_steps: *steps,
                seed: cli.seed,
                scheme: match scheme {
                    SchemeArg::Euler => Scheme::EulerPath,
                    SchemeArg::Mixture => Scheme::KlMixture,
                },
                antithetic: *antithetic,
            };
            let run = match scheme {
                SchemeArg::Euler => price_calls_euler(&spec, &strikes, &config),
                SchemeArg::Mixture => {
                    let sp = model_spectrum(&spec, *modes, &DEFAULT_GRIDS).map_err(|e| e.at("spectrum"))?;
                    price_calls_mixture(&sp, &spec, &strikes, &config)
                }
            }
            .map_err(|e| e.at("price"))?;
            eprintln!(
                "martingale check: E[e^(-rT) S_T] = {:.6} +- {:.1e} (S0 = {})",
                run.discounted_mean, run.discounted_mean_se, spec.s0
            );
            Ok(Output::text(points_to_csv(&run.points)?))
        }
        Command::Calibrate { slice, window, mode, q, sigma, maturity, s0, r, start, table } => {
            let text = read_input(slice, manifest)?;
            let slice = IvSlice::from_csv(&text, *maturity, *s0, *r, &slice.display().to_string())?;
            let window = if window == "auto" {
                auto_window(&slice, REGIME_EDGE).map_err(|e| e.at("auto_window"))?
            } else {
                let (lo, hi) = parse_range(window)?;
                FitWindow::new(lo, hi)?
            };
            let mode = match mode {
                ModeArg::SteinStein => CalibrationMode::SteinStein {
                    q: *q,
                    start: match start {
                        StartArg::Stationary => SigmaStart::Stationary,
                        StartArg::Deterministic => SigmaStart::Deterministic,
                    },
                },
                ModeArg::Fou => {
                    let sigma = sigma.ok_or_else(|| Error::Validation("--mode fou needs --sigma".into()))?;
                    let table = match table {
                        Some(p) => Some(HurstTable::from_json(&read_input(p, manifest)?)?),
                        None => None,
                    };
                    CalibrationMode::Fou { q: *q, sigma, table }
                }
            };
            let report = calibrate_end_to_end(&slice, &window, &mode)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            to_json(&report).map(Output::text)
        }
        Command::Table { q, sigma, maturity, hurst_grid } => {
            let grid = match hurst_grid {
                Some(g) => parse_grid(g)?,
                None => default_hurst_grid(),
            };
            let table = build_hurst_table(*q, *sigma, *maturity, &grid).map_err(|e| e.at("table"))?;
            Ok(Output::text(table.to_json()? + "\n"))
        }
        Command::Reproduce { experiment, paths, steps } => {
            let names: Vec<&str> = if experiment == "all" { EXPERIMENTS.to_vec() } else { vec![experiment.as_str()] };
            let config = SimConfig { n_paths: *paths, n_steps: *steps, seed: cli.seed, ..SimConfig::default() };
            config.validate()?;
            let mut results = serde_json::Map::new();
            for name in names {
                let (value, pass) = run_experiment(name, &config).map_err(|e| e.at("reproduce"))?;
                eprintln!("{name}: {}", if pass { "PASS" } else { "FAIL" });
                results.insert(name.to_string(), serde_json::json!({ "pass": pass, "result": value }));
            }
            let summary = serde_json::json!({
                "seed": cli.seed,
                "n_paths": paths,
                "n_steps": steps,
                "experiments": results,
            });
            to_json(&summary).map(Output::text)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let mut manifest = RunManifest::start(cli.command.name(), cli.seed);
    let result = run(&cli, &mut manifest).and_then(|out| {
        match &cli.out {
            Some(path) => {
                std::fs::write(path, &out.bytes).map_err(|e| io_error(path, e))?;
                manifest.finish(path).map_err(|e| io_error(path, e))?;
            }
            None if out.binary => unreachable!("binary output always has a path"),
            None => std::io::stdout().write_all(&out.bytes).map_err(|e| Error::Validation(format!("stdout: {e}")))?,
        }
        Ok(())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e.kind() {
                ErrorKind::Invalid => ExitCode::from(1),
                ErrorKind::Numerical => ExitCode::from(2),
            }
        }
    }
}
