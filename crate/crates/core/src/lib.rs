//! Implied-volatility wing asymptotics for uncorrelated Gaussian stochastic-volatility
//! models, with spectral tools, Monte Carlo pricers and wing calibration.

pub mod bs;
pub mod calibrate;
pub mod chaos;
pub mod error;
pub mod fbm;
pub mod model;
pub mod pricing;
pub mod reproduce;
pub mod scalar;
pub mod smile;
pub mod special;
pub mod spectrum;

pub use calibrate::{CalibrationMode, CalibrationReport, FitWindow, HurstTable, IvSlice};
pub use chaos::ChaosConstants;
pub use error::{Error, ErrorKind, Result};
pub use model::{CovarianceKernel, MeanFunction, ModelSpec};
pub use pricing::{PricedPoint, PricingRun, SimConfig};
pub use scalar::Real;
pub use smile::{CurvePoint, Direction, WingExpansion};
pub use spectrum::Spectrum;

/// Double-precision wing expansion.
pub type WingExpansion64 = smile::WingExpansion<f64>;
/// Single-precision wing expansion.
pub type WingExpansion32 = smile::WingExpansion<f32>;
