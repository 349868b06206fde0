//! JSON run configurations. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::coefficients::{BoundedField, ClipExpField, ConstantField, LsvModelSpec, VolFactorDynamics};
use crate::engine::{InitialLaw, SimConfig};
use crate::error::{Error, Result};
use crate::market::{axis_range, bs_call_price, dupire_local_vol, synthetic_surface, BsParams, CallSurface, LocalVolSurface, VolClamp};

/// Grid axis: explicit list or `{start, stop, step}` (inclusive).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AxisSpec {
    List(Vec<f64>),
    Range { start: f64, stop: f64, step: f64 },
}

impl AxisSpec {
    pub fn values(&self) -> Result<Vec<f64>> {
        match self {
            AxisSpec::List(v) => Ok(v.clone()),
            AxisSpec::Range { start, stop, step } => axis_range(*start, *stop, *step),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LocalVolSource {
    /// Constant `σ_D`.
    Flat(f64),
    /// Local-vol grid CSV (maturities down, strikes across).
    Csv {
        path: PathBuf,
        #[serde(default)]
        clamp: VolClamp,
    },
    /// Dupire extraction from a call-price CSV.
    Dupire {
        prices_csv: PathBuf,
        #[serde(default)]
        clamp: VolClamp,
    },
    /// Dupire extraction from a synthetic flat Black-Scholes surface.
    BlackScholes {
        vol: f64,
        #[serde(default = "default_maturities")]
        maturities: AxisSpec,
        #[serde(default = "default_strikes")]
        strikes: AxisSpec,
        #[serde(default)]
        clamp: VolClamp,
    },
}

fn default_maturities() -> AxisSpec {
    AxisSpec::Range {
        start: 0.1,
        stop: 2.0,
        step: 0.05,
    }
}

fn default_strikes() -> AxisSpec {
    AxisSpec::Range {
        start: 0.5,
        stop: 1.8,
        step: 0.02,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldConfig {
    ClipExp { low: f64, high: f64 },
    Constant(f64),
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig::ClipExp { low: 0.5, high: 2.0 }
    }
}

impl FieldConfig {
    pub fn build(&self) -> Result<Arc<dyn BoundedField>> {
        Ok(match *self {
            FieldConfig::ClipExp { low, high } => Arc::new(ClipExpField::new(low, high)?),
            FieldConfig::Constant(value) => Arc::new(ConstantField::new(value)?),
        })
    }
}

/// `λ(y) = -κ tanh(y)`, `β = beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FactorConfig {
    pub kappa: f64,
    pub beta: f64,
}

impl Default for FactorConfig {
    fn default() -> Self {
        Self { kappa: 1.0, beta: 0.4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub local_vol: LocalVolSource,
    #[serde(default)]
    pub v: FieldConfig,
    #[serde(default)]
    pub factor: FactorConfig,
    #[serde(default = "default_correlation")]
    pub correlation: f64,
    #[serde(default = "default_floor")]
    pub floor: f64,
    #[serde(default)]
    pub initial: InitialLaw,
}

fn default_correlation() -> f64 {
    -0.5
}

fn default_floor() -> f64 {
    0.5
}

/// Resolves a config-relative path.
pub fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

impl ModelConfig {
    pub fn build_local_vol(&self, base: &Path) -> Result<LocalVolSurface> {
        let spot = self.initial.spot;
        match &self.local_vol {
            LocalVolSource::Flat(vol) => {
                if !(*vol > 0.0) || !vol.is_finite() {
                    return Err(Error::config("model.local_vol.flat", "volatility must be positive"));
                }
                LocalVolSurface::flat(*vol)
            }
            LocalVolSource::Csv { path, clamp } => {
                let file = std::fs::File::open(resolve(base, path))?;
                LocalVolSurface::read_csv(spot, *clamp, file)
            }
            LocalVolSource::Dupire { prices_csv, clamp } => {
                let surface = CallSurface::read_csv_path(spot, &resolve(base, prices_csv))?;
                dupire_local_vol(&surface, *clamp)
            }
            LocalVolSource::BlackScholes {
                vol,
                maturities,
                strikes,
                clamp,
            } => {
                let surface = synthetic_surface(spot, *vol, &maturities.values()?, &strikes.values()?)?;
                dupire_local_vol(&surface, *clamp)
            }
        }
    }

    pub fn build(&self, base: &Path) -> Result<LsvModelSpec> {
        self.initial.validate()?;
        let local_vol = self.build_local_vol(base)?;
        LsvModelSpec::new(
            Arc::new(local_vol),
            self.v.build()?,
            VolFactorDynamics::tanh_reverting(self.factor.kappa, self.factor.beta)?,
            self.correlation,
            self.floor,
            self.initial.clone(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotFormat {
    #[default]
    Csv,
    Binary,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub model: ModelConfig,
    pub simulation: SimConfig,
    #[serde(default)]
    pub snapshot_format: SnapshotFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DupireConfig {
    pub prices_csv: PathBuf,
    #[serde(default = "unit_spot")]
    pub spot: f64,
    #[serde(default)]
    pub clamp: VolClamp,
}

fn unit_spot() -> f64 {
    1.0
}

/// Where calibration targets come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSource {
    BlackScholes { vol: f64 },
    PricesCsv(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    pub model: ModelConfig,
    pub simulation: SimConfig,
    pub strikes: Vec<f64>,
    /// Defaults to the surface the local vol was built from.
    #[serde(default)]
    pub targets: Option<TargetSource>,
}

impl CalibrationConfig {
    pub fn target_source(&self) -> Result<TargetSource> {
        if let Some(t) = &self.targets {
            return Ok(t.clone());
        }
        match &self.model.local_vol {
            LocalVolSource::Flat(vol) | LocalVolSource::BlackScholes { vol, .. } => {
                Ok(TargetSource::BlackScholes { vol: *vol })
            }
            LocalVolSource::Dupire { prices_csv, .. } => Ok(TargetSource::PricesCsv(prices_csv.clone())),
            LocalVolSource::Csv { .. } => Err(Error::config("targets", "required when the local vol comes from a grid file")),
        }
    }

    /// Target call prices at `maturity`.
    pub fn target_prices(&self, base: &Path, maturity: f64) -> Result<Vec<f64>> {
        let spot = self.model.initial.spot;
        match self.target_source()? {
            TargetSource::BlackScholes { vol } => self
                .strikes
                .iter()
                .map(|&k| BsParams::new(spot, vol, maturity, k).map(|p| bs_call_price(&p)))
                .collect(),
            TargetSource::PricesCsv(path) => {
                let surface = CallSurface::read_csv_path(spot, &resolve(base, &path))?;
                self.strikes.iter().map(|&k| surface.price_at(maturity, k)).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChaosConfig {
    pub model: ModelConfig,
    pub simulation: SimConfig,
    pub particles: Vec<usize>,
    pub reference_particles: usize,
    pub trials: usize,
    /// Wasserstein order `e >= 1`.
    #[serde(default = "unit_order")]
    pub order: f64,
}

fn unit_order() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeatCase {
    pub points: usize,
    pub horizon: f64,
    pub s0: f64,
    pub steps: usize,
    /// Overrides the default `8·sd` half-width of the domain.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub half_width: Option<f64>,
}

impl Default for HeatCase {
    fn default() -> Self {
        Self {
            points: 201,
            horizon: 0.25,
            s0: 0.1,
            steps: 100,
            half_width: None,
        }
    }
}

/// Particle `Y` marginal against the 1D Fokker-Planck solution of the factor dynamics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FactorCase {
    pub factor: FactorConfig,
    pub y_mean: f64,
    pub y_std: f64,
    pub horizon: f64,
    pub particles: usize,
    pub steps: usize,
    pub seed: u64,
    pub points: usize,
    pub dtau: f64,
    pub tolerance: f64,
}

impl Default for FactorCase {
    fn default() -> Self {
        Self {
            factor: FactorConfig::default(),
            y_mean: 0.0,
            y_std: 0.2,
            horizon: 0.25,
            particles: 100_000,
            steps: 50,
            seed: 1,
            points: 401,
            dtau: 0.0025,
            tolerance: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FpOracleConfig {
    #[serde(default)]
    pub heat_kernel: Option<HeatCase>,
    #[serde(default)]
    pub factor_marginal: Option<FactorCase>,
}

/// Reads and parses a JSON document; parse failures are validation errors.
pub fn load<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}
