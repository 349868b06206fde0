use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value; `field` names the offending key.
    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("invalid input: {0}")]
    Input(String),

    /// A bounded field produced a value outside its declared bounds.
    #[error("coefficient bounds violated: {name}({t}, {x1}, {x2}) = {value} not in [{low}, {high}]")]
    CoefficientBounds {
        name: String,
        t: f64,
        x1: f64,
        x2: f64,
        value: f64,
        low: f64,
        high: f64,
    },

    /// Estimate tuple outside the admissible set e1*low <= e2 <= e1*high.
    #[error("estimate outside admissible set: e1 = {e1}, e2 = {e2}, bounds [{low}, {high}]")]
    CoefficientDomain { e1: f64, e2: f64, low: f64, high: f64 },

    #[error("diffusion matrix not elliptic at t = {t}, y = {y}, sigma = {sigma}, beta = {beta}: min eigenvalue {min_eigenvalue}")]
    NonElliptic {
        t: f64,
        y: f64,
        sigma: f64,
        beta: f64,
        min_eigenvalue: f64,
    },

    #[error("sign condition -theta*beta >= 0 violated at t = {t}, y = {y}: theta = {theta}, beta = {beta}")]
    SignCondition { t: f64, y: f64, theta: f64, beta: f64 },

    #[error("butterfly arbitrage at maturity {maturity}, strike {strike}: convexity defect {defect:e}")]
    ButterflyArbitrage { maturity: f64, strike: f64, defect: f64 },

    #[error("calendar arbitrage at maturity {maturity}, strike {strike}: price decrease {decrease:e}")]
    CalendarArbitrage { maturity: f64, strike: f64, decrease: f64 },

    #[error("non-finite coefficient input at t = {t}, x1 = {x1}, y = {y}")]
    Numeric { t: f64, x1: f64, y: f64 },

    #[error("particle {particle} blew up at step {step}")]
    BlowUp { step: usize, particle: usize },

    #[error("time step {dt} violates the explicit stability bound; use dt <= {suggested}")]
    Cfl { dt: f64, suggested: f64 },

    #[error("domain too small: boundary mass {boundary_mass:e} exceeds {limit:e}")]
    DomainTooSmall { boundary_mass: f64, limit: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Errors that mean "the request was rejected before any compute"
    /// as opposed to failures during a run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config { .. }
                | Error::Input(_)
                | Error::CoefficientBounds { .. }
                | Error::CoefficientDomain { .. }
                | Error::NonElliptic { .. }
                | Error::SignCondition { .. }
                | Error::ButterflyArbitrage { .. }
                | Error::CalendarArbitrage { .. }
                | Error::Cfl { .. }
                | Error::Json(_)
        )
    }
}
