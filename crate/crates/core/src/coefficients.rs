//! Drift and diffusion coefficients of the particle systems.
//!
//! The calibrated model evolves `(X, Y)` = (log-price, factor) with
//!
//! ```text
//! dX = -½ σ_D(t, e^X)² R dt + σ_D(t, e^X) √R dW,   R = (c + p_X v(t, X, Y)) / (c + (p v)_1(t, X))
//! dY = λ(t, Y) dt + β(t, Y) dB,                     d<W, B> = θ dt
//! ```
//!
//! The generator is `L = b^i ∂_i + a^{ij} ∂_i ∂_j` with `a = ½·Cov(σ dW, β dB)/dt`,
//! i.e. `a11 = ½σ²`, `a12 = a21 = ½θσβ`, `a22 = ½β²`. The Fokker-Planck oracle
//! uses the same matrix.

use std::fmt;
use std::sync::Arc;

use crate::engine::InitialLaw;
use crate::error::{Error, Result};
use crate::market::LocalVolSurface;

/// Relative slack on admissible-set checks, absorbing estimator rounding.
const ADMISSIBLE_SLACK: f64 = 1e-12;

/// A field `(t, x1, x2) -> value` with declared bounds.
pub trait BoundedField: Send + Sync + fmt::Debug {
    fn eval(&self, t: f64, x1: f64, x2: f64) -> f64;

    /// Declared `[low, high]`.
    fn bounds(&self) -> (f64, f64);

    fn name(&self) -> &str {
        "field"
    }

    /// `false` lets estimators evaluate the field once per particle instead of once per grid node.
    fn depends_on_x1(&self) -> bool {
        true
    }

    fn lipschitz(&self) -> Option<f64> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantField {
    value: f64,
}

impl ConstantField {
    pub fn new(value: f64) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::config("v.value", "must be finite"));
        }
        Ok(Self { value })
    }
}

impl BoundedField for ConstantField {
    fn eval(&self, _: f64, _: f64, _: f64) -> f64 {
        self.value
    }

    fn bounds(&self) -> (f64, f64) {
        (self.value, self.value)
    }

    fn name(&self) -> &str {
        "constant"
    }

    fn depends_on_x1(&self) -> bool {
        false
    }

    fn lipschitz(&self) -> Option<f64> {
        Some(0.0)
    }
}

/// `v(t, x1, x2) = clamp(exp(x2), low, high)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipExpField {
    low: f64,
    high: f64,
}

impl ClipExpField {
    pub fn new(low: f64, high: f64) -> Result<Self> {
        if !(low > 0.0) || !(high >= low) || !high.is_finite() {
            return Err(Error::config("v", format!("clip bounds must satisfy 0 < low <= high, got [{low}, {high}]")));
        }
        Ok(Self { low, high })
    }
}

impl BoundedField for ClipExpField {
    #[inline]
    fn eval(&self, _: f64, _: f64, x2: f64) -> f64 {
        x2.exp().clamp(self.low, self.high)
    }

    fn bounds(&self) -> (f64, f64) {
        (self.low, self.high)
    }

    fn name(&self) -> &str {
        "clip_exp"
    }

    fn depends_on_x1(&self) -> bool {
        false
    }

    fn lipschitz(&self) -> Option<f64> {
        Some(self.high)
    }
}

type FieldFn = dyn Fn(f64, f64, f64) -> f64 + Send + Sync;

/// Closure-backed field.
#[derive(Clone)]
pub struct FnField {
    name: String,
    bounds: (f64, f64),
    depends_on_x1: bool,
    f: Arc<FieldFn>,
}

impl FnField {
    pub fn new(
        name: impl Into<String>,
        bounds: (f64, f64),
        depends_on_x1: bool,
        f: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            bounds,
            depends_on_x1,
            f: Arc::new(f),
        }
    }
}

impl fmt::Debug for FnField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnField")
            .field("name", &self.name)
            .field("bounds", &self.bounds)
            .finish()
    }
}

impl BoundedField for FnField {
    fn eval(&self, t: f64, x1: f64, x2: f64) -> f64 {
        (self.f)(t, x1, x2)
    }

    fn bounds(&self) -> (f64, f64) {
        self.bounds
    }

    fn name(&self) -> &str {
        &self.name
    }

    fn depends_on_x1(&self) -> bool {
        self.depends_on_x1
    }
}

/// Points at which declared properties are checked.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationGrid {
    pub times: Vec<f64>,
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    /// Resolution of the scan over the proven σ interval.
    pub sigma_points: usize,
}

impl ValidationGrid {
    pub const DEFAULT_POINTS: usize = 32;

    /// `points` per axis over `[0, horizon] x [x1 range] x [x2 range]`.
    pub fn new(horizon: f64, x1: (f64, f64), x2: (f64, f64), points: usize) -> Self {
        let lin = |lo: f64, hi: f64| -> Vec<f64> {
            let m = points.max(2);
            (0..m).map(|k| lo + (hi - lo) * k as f64 / (m - 1) as f64).collect()
        };
        Self {
            times: lin(0.0, horizon),
            x1: lin(x1.0, x1.1),
            x2: lin(x2.0, x2.1),
            sigma_points: points.max(2),
        }
    }

    /// Default scan: 32 points per axis, log-price within ±3 of zero, factor within ±5.
    pub fn standard(horizon: f64, log_spot: f64) -> Self {
        Self::new(horizon, (log_spot - 3.0, log_spot + 3.0), (-5.0, 5.0), Self::DEFAULT_POINTS)
    }
}

/// Checks `low <= field <= high` on every point of the grid.
pub fn validate_field(field: &dyn BoundedField, grid: &ValidationGrid) -> Result<()> {
    let (low, high) = field.bounds();
    for &t in &grid.times {
        for &x1 in &grid.x1 {
            for &x2 in &grid.x2 {
                let value = field.eval(t, x1, x2);
                if !(value >= low && value <= high) {
                    return Err(Error::CoefficientBounds {
                        name: field.name().to_string(),
                        t,
                        x1,
                        x2,
                        value,
                        low,
                        high,
                    });
                }
            }
        }
    }
    Ok(())
}

type ScalarFn = dyn Fn(f64, f64) -> f64 + Send + Sync;

/// Factor dynamics `dY = λ(t, Y) dt + β(t, Y) dB`.
#[derive(Clone)]
pub struct VolFactorDynamics {
    drift: Arc<ScalarFn>,
    diffusion: Arc<ScalarFn>,
    drift_bound: f64,
    /// `β_min <= |β| <= β_max`.
    diffusion_bounds: (f64, f64),
    diffusion_lipschitz: f64,
    label: String,
}

impl fmt::Debug for VolFactorDynamics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VolFactorDynamics")
            .field("label", &self.label)
            .field("drift_bound", &self.drift_bound)
            .field("diffusion_bounds", &self.diffusion_bounds)
            .field("diffusion_lipschitz", &self.diffusion_lipschitz)
            .finish()
    }
}

impl VolFactorDynamics {
    pub fn new(
        drift: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        diffusion: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        drift_bound: f64,
        diffusion_bounds: (f64, f64),
        diffusion_lipschitz: f64,
    ) -> Result<Self> {
        if !(drift_bound >= 0.0) || !drift_bound.is_finite() {
            return Err(Error::config("factor.drift_bound", "must be finite and non-negative"));
        }
        if !(diffusion_bounds.0 > 0.0) || !(diffusion_bounds.1 >= diffusion_bounds.0) || !diffusion_bounds.1.is_finite() {
            return Err(Error::config(
                "factor.diffusion_bounds",
                "need 0 < beta_min <= beta_max < inf (beta must be non-degenerate)",
            ));
        }
        if !(diffusion_lipschitz >= 0.0) || !diffusion_lipschitz.is_finite() {
            return Err(Error::config("factor.diffusion_lipschitz", "must be finite and non-negative"));
        }
        Ok(Self {
            drift: Arc::new(drift),
            diffusion: Arc::new(diffusion),
            drift_bound,
            diffusion_bounds,
            diffusion_lipschitz,
            label: "custom".into(),
        })
    }

    /// `λ(t, y) = -κ tanh(y)`, `β(t, y) = β0`.
    pub fn tanh_reverting(kappa: f64, beta0: f64) -> Result<Self> {
        if !(kappa >= 0.0) || !kappa.is_finite() {
            return Err(Error::config("factor.kappa", "must be finite and non-negative"));
        }
        if beta0 == 0.0 || !beta0.is_finite() {
            return Err(Error::config("factor.beta", "must be non-zero and finite"));
        }
        let mut dynamics = Self::new(
            move |_, y| -kappa * y.tanh(),
            move |_, _| beta0,
            kappa,
            (beta0.abs(), beta0.abs()),
            0.0,
        )?;
        dynamics.label = format!("tanh_reverting(kappa={kappa}, beta={beta0})");
        Ok(dynamics)
    }

    #[inline]
    pub fn drift(&self, t: f64, y: f64) -> f64 {
        (self.drift)(t, y)
    }

    #[inline]
    pub fn diffusion(&self, t: f64, y: f64) -> f64 {
        (self.diffusion)(t, y)
    }

    pub fn drift_bound(&self) -> f64 {
        self.drift_bound
    }

    pub fn diffusion_bounds(&self) -> (f64, f64) {
        self.diffusion_bounds
    }

    pub fn diffusion_lipschitz(&self) -> f64 {
        self.diffusion_lipschitz
    }

    /// Checks the declared bounds and the Lipschitz constant (finite differences, 1% slack).
    pub fn validate(&self, grid: &ValidationGrid) -> Result<()> {
        let (beta_min, beta_max) = self.diffusion_bounds;
        let violation = |name: &str, t: f64, y: f64, value: f64, low: f64, high: f64| Error::CoefficientBounds {
            name: name.to_string(),
            t,
            x1: f64::NAN,
            x2: y,
            value,
            low,
            high,
        };
        for &t in &grid.times {
            let mut previous: Option<(f64, f64)> = None;
            for &y in &grid.x2 {
                let lambda = self.drift(t, y);
                if !(lambda.abs() <= self.drift_bound) {
                    return Err(violation("lambda", t, y, lambda, -self.drift_bound, self.drift_bound));
                }
                let beta = self.diffusion(t, y);
                if !(beta.abs() >= beta_min * (1.0 - 1e-12) && beta.abs() <= beta_max * (1.0 + 1e-12)) {
                    return Err(violation("|beta|", t, y, beta.abs(), beta_min, beta_max));
                }
                if let Some((y0, b0)) = previous {
                    let slope = (beta - b0).abs() / (y - y0);
                    if slope > self.diffusion_lipschitz * 1.01 + 1e-12 {
                        return Err(Error::config(
                            "factor.diffusion_lipschitz",
                            format!("finite-difference slope {slope} at t = {t}, y = {y} exceeds the declared constant"),
                        ));
                    }
                }
                previous = Some((y, beta));
            }
        }
        Ok(())
    }
}

/// The calibrated local stochastic volatility model.
#[derive(Debug, Clone)]
pub struct LsvModelSpec {
    local_vol: Arc<LocalVolSurface>,
    v: Arc<dyn BoundedField>,
    dynamics: VolFactorDynamics,
    correlation: f64,
    floor: f64,
    initial: InitialLaw,
}

impl LsvModelSpec {
    pub fn new(
        local_vol: Arc<LocalVolSurface>,
        v: Arc<dyn BoundedField>,
        dynamics: VolFactorDynamics,
        correlation: f64,
        floor: f64,
        initial: InitialLaw,
    ) -> Result<Self> {
        if !(-1.0..=1.0).contains(&correlation) {
            return Err(Error::config(
                "model.correlation",
                format!("correlation must lie in [-1, 1], got {correlation}"),
            ));
        }
        if !(floor > 0.0) || !floor.is_finite() {
            return Err(Error::config("model.floor", format!("floor must be positive, got {floor}")));
        }
        let (low, high) = v.bounds();
        if !(low > 0.0) || !(high >= low) || !high.is_finite() {
            return Err(Error::config("model.v", format!("v needs bounds 0 < m_v <= M_v, got [{low}, {high}]")));
        }
        Ok(Self {
            local_vol,
            v,
            dynamics,
            correlation,
            floor,
            initial,
        })
    }

    pub fn local_vol(&self) -> &LocalVolSurface {
        &self.local_vol
    }

    pub fn local_vol_arc(&self) -> Arc<LocalVolSurface> {
        Arc::clone(&self.local_vol)
    }

    pub fn v(&self) -> &dyn BoundedField {
        self.v.as_ref()
    }

    pub fn v_arc(&self) -> Arc<dyn BoundedField> {
        Arc::clone(&self.v)
    }

    pub fn dynamics(&self) -> &VolFactorDynamics {
        &self.dynamics
    }

    pub fn correlation(&self) -> f64 {
        self.correlation
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn initial(&self) -> &InitialLaw {
        &self.initial
    }

    /// Copy with a different correlation (revalidated).
    pub fn with_correlation(&self, correlation: f64) -> Result<Self> {
        Self::new(
            self.local_vol_arc(),
            self.v_arc(),
            self.dynamics.clone(),
            correlation,
            self.floor,
            self.initial.clone(),
        )
    }

    pub fn with_initial(&self, initial: InitialLaw) -> Self {
        Self { initial, ..self.clone() }
    }

    /// `[m_D m_v / M_v, M_D M_v / m_v]`, the proven range of `σ²`.
    pub fn sigma_squared_bounds(&self) -> (f64, f64) {
        let (sd_lo, sd_hi) = self.local_vol.value_range();
        let (m_v, big_m_v) = self.v.bounds();
        (sd_lo * sd_lo * m_v / big_m_v, sd_hi * sd_hi * big_m_v / m_v)
    }
}

/// Leverage ratio `R = (c + p_X v) / (c + (p v)_1)`.
#[inline]
pub fn leverage_ratio(floor: f64, p_x: f64, v: f64, pv1: f64) -> f64 {
    (floor + p_x * v) / (floor + pv1)
}

/// `(b, σ)` for the X equation: `σ = σ_D √R`, `b = -½ σ_D² R`.
pub fn lsv_drift_diffusion(spec: &LsvModelSpec, t: f64, x1: f64, y: f64, p_x: f64, pv1: f64) -> Result<(f64, f64)> {
    if !(t.is_finite() && x1.is_finite() && y.is_finite() && p_x.is_finite() && pv1.is_finite()) {
        return Err(Error::Numeric { t, x1, y });
    }
    if p_x < 0.0 || pv1 < 0.0 {
        return Err(Error::Input(format!("density estimates must be non-negative, got p_X = {p_x}, (pv)_1 = {pv1}")));
    }
    let sd = spec.local_vol.local_vol_in_logspace(t, x1);
    let v = spec.v.eval(t, x1, y);
    Ok(drift_diffusion_from_parts(sd, spec.floor, p_x, v, pv1))
}

#[inline]
pub(crate) fn drift_diffusion_from_parts(local_vol: f64, floor: f64, p_x: f64, v: f64, pv1: f64) -> (f64, f64) {
    let r = leverage_ratio(floor, p_x, v, pv1);
    (-0.5 * local_vol * local_vol * r, local_vol * r.sqrt())
}

/// Density-functional estimates at one particle: `(e0, e1, e2)` with separate `e2`
/// for the drift field `h` and the diffusion field `v`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Estimates {
    /// `f(t, x)`, the 2D density at the particle.
    pub density: f64,
    /// `f_1(t, x1)` or `∫ f` for global systems.
    pub marginal: f64,
    /// `(f h)_1(t, x1)` or `∫ h f`.
    pub weighted_h: f64,
    /// `(f v)_1(t, x1)` or `∫ v f`.
    pub weighted_v: f64,
}

/// How the weighted estimates are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Functional {
    /// First-marginal integrals at the particle's x1.
    Local,
    /// Integrals over the whole state space (ensemble averages).
    Global,
}

/// Which estimates a general system consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EstimateSet {
    pub density_2d: bool,
    pub functional: Functional,
}

/// A coefficient bundle `(b°, σ°, h, v, λ, β, θ)` of the general interacting system.
pub trait GeneralSystem: Send + Sync {
    fn estimates(&self) -> EstimateSet;

    /// Field entering the drift's weighted estimate.
    fn h(&self) -> &dyn BoundedField;

    /// Field entering the diffusion's weighted estimate.
    fn v(&self) -> &dyn BoundedField;

    /// `b°(t, x, e0, e1, e2)`.
    fn drift(&self, t: f64, x: (f64, f64), e0: f64, e1: f64, e2: f64) -> f64;

    /// `σ°(t, x, e0, e1, e2)`.
    fn diffusion(&self, t: f64, x: (f64, f64), e0: f64, e1: f64, e2: f64) -> f64;

    fn factor(&self) -> &VolFactorDynamics;

    fn correlation(&self) -> f64;

    /// Both coefficients at once; overriding keeps shared work in one place.
    fn drift_diffusion(&self, t: f64, x: (f64, f64), e: &Estimates) -> (f64, f64) {
        (
            self.drift(t, x, e.density, e.marginal, e.weighted_h),
            self.diffusion(t, x, e.density, e.marginal, e.weighted_v),
        )
    }
}

fn check_admissible(e1: f64, e2: f64, bounds: (f64, f64)) -> Result<()> {
    let (low, high) = bounds;
    let slack = ADMISSIBLE_SLACK * (e1.abs() * high.abs().max(low.abs())).max(f64::MIN_POSITIVE);
    if !(e1 >= 0.0) || !(e2 >= e1 * low - slack && e2 <= e1 * high + slack) {
        return Err(Error::CoefficientDomain { e1, e2, low, high });
    }
    Ok(())
}

/// Plugs estimates into a general system after checking the admissible sets.
pub fn general_coefficients(system: &dyn GeneralSystem, t: f64, x: (f64, f64), e: &Estimates) -> Result<(f64, f64)> {
    check_admissible(e.marginal, e.weighted_h, system.h().bounds())?;
    check_admissible(e.marginal, e.weighted_v, system.v().bounds())?;
    let (b, sigma) = system.drift_diffusion(t, x, e);
    if !b.is_finite() || !sigma.is_finite() {
        return Err(Error::Numeric { t, x1: x.0, y: x.1 });
    }
    Ok((b, sigma))
}

/// The calibrated model as a general system: `σ°² = σ_D² (c + e1 v)/(c + e2)`, `b° = -½ σ°²`.
impl GeneralSystem for LsvModelSpec {
    fn estimates(&self) -> EstimateSet {
        EstimateSet {
            density_2d: false,
            functional: Functional::Local,
        }
    }

    fn h(&self) -> &dyn BoundedField {
        self.v.as_ref()
    }

    fn v(&self) -> &dyn BoundedField {
        self.v.as_ref()
    }

    fn drift(&self, t: f64, x: (f64, f64), e0: f64, e1: f64, e2: f64) -> f64 {
        self.drift_diffusion(t, x, &Estimates { density: e0, marginal: e1, weighted_h: e2, weighted_v: e2 }).0
    }

    fn diffusion(&self, t: f64, x: (f64, f64), e0: f64, e1: f64, e2: f64) -> f64 {
        self.drift_diffusion(t, x, &Estimates { density: e0, marginal: e1, weighted_h: e2, weighted_v: e2 }).1
    }

    fn factor(&self) -> &VolFactorDynamics {
        &self.dynamics
    }

    fn correlation(&self) -> f64 {
        self.correlation
    }

    fn drift_diffusion(&self, t: f64, x: (f64, f64), e: &Estimates) -> (f64, f64) {
        let sd = self.local_vol.local_vol_in_logspace(t, x.0);
        let v = self.v.eval(t, x.0, x.1);
        drift_diffusion_from_parts(sd, self.floor, e.marginal, v, e.weighted_v)
    }
}

/// Symmetric 2x2 diffusion matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionMatrix {
    pub a11: f64,
    pub a12: f64,
    pub a22: f64,
}

impl DiffusionMatrix {
    /// `(min, max)` eigenvalues.
    pub fn eigenvalues(&self) -> (f64, f64) {
        let mean = 0.5 * (self.a11 + self.a22);
        let half_gap = (0.5 * (self.a11 - self.a22)).hypot(self.a12);
        (mean - half_gap, mean + half_gap)
    }

    pub fn determinant(&self) -> f64 {
        self.a11 * self.a22 - self.a12 * self.a12
    }
}

/// `a11 = ½σ²`, `a12 = ½θσβ`, `a22 = ½β²`.
pub fn assemble_diffusion_matrix(sigma: f64, beta: f64, theta: f64) -> DiffusionMatrix {
    DiffusionMatrix {
        a11: 0.5 * sigma * sigma,
        a12: 0.5 * theta * sigma * beta,
        a22: 0.5 * beta * beta,
    }
}

/// Ellipticity constants `m I <= a <= M I` found by a scan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipticityBounds {
    pub m: f64,
    pub big_m: f64,
}

/// Gate run before any simulation of the calibrated model.
///
/// Enforces the sign condition `-θ β(t, y) >= 0` on the grid, then scans the
/// eigenvalues of `a` with `σ` over its proven interval and `β` over the grid.
pub fn check_ellipticity(spec: &LsvModelSpec, grid: &ValidationGrid) -> Result<EllipticityBounds> {
    let theta = spec.correlation;
    let (s2_lo, s2_hi) = spec.sigma_squared_bounds();
    let (s_lo, s_hi) = (s2_lo.sqrt(), s2_hi.sqrt());
    let m = grid.sigma_points.max(2);
    let sigmas: Vec<f64> = (0..m).map(|k| s_lo + (s_hi - s_lo) * k as f64 / (m - 1) as f64).collect();

    let mut bounds = EllipticityBounds {
        m: f64::INFINITY,
        big_m: 0.0,
    };
    for &t in &grid.times {
        for &y in &grid.x2 {
            let beta = spec.dynamics.diffusion(t, y);
            if -theta * beta < 0.0 {
                return Err(Error::SignCondition { t, y, theta, beta });
            }
            for &sigma in &sigmas {
                let (lo, hi) = assemble_diffusion_matrix(sigma, beta, theta).eigenvalues();
                if !(lo > 0.0) {
                    return Err(Error::NonElliptic {
                        t,
                        y,
                        sigma,
                        beta,
                        min_eigenvalue: lo,
                    });
                }
                bounds.m = bounds.m.min(lo);
                bounds.big_m = bounds.big_m.max(hi);
            }
        }
    }
    Ok(bounds)
}

/// Eigenvalue scan over explicit `σ` and `β` sets, without the sign condition.
pub fn ellipticity_scan(sigmas: &[f64], betas: &[f64], theta: f64) -> Result<EllipticityBounds> {
    let mut bounds = EllipticityBounds {
        m: f64::INFINITY,
        big_m: 0.0,
    };
    for &sigma in sigmas {
        for &beta in betas {
            let (lo, hi) = assemble_diffusion_matrix(sigma, beta, theta).eigenvalues();
            if !(lo > 0.0) {
                return Err(Error::NonElliptic {
                    t: f64::NAN,
                    y: f64::NAN,
                    sigma,
                    beta,
                    min_eigenvalue: lo,
                });
            }
            bounds.m = bounds.m.min(lo);
            bounds.big_m = bounds.big_m.max(hi);
        }
    }
    Ok(bounds)
}

/// Full pre-simulation validation: fields on the grid, factor dynamics, ellipticity.
pub fn validate_model(spec: &LsvModelSpec, grid: &ValidationGrid) -> Result<EllipticityBounds> {
    validate_field(spec.v(), grid)?;
    spec.dynamics.validate(grid)?;
    check_ellipticity(spec, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(theta: f64, floor: f64, vol: f64) -> LsvModelSpec {
        LsvModelSpec::new(
            Arc::new(LocalVolSurface::flat(vol).unwrap()),
            Arc::new(ClipExpField::new(0.5, 2.0).unwrap()),
            VolFactorDynamics::tanh_reverting(1.0, 0.4).unwrap(),
            theta,
            floor,
            InitialLaw::default(),
        )
        .unwrap()
    }

    #[test]
    fn constant_v_reduces_to_local_vol() {
        let s = LsvModelSpec::new(
            Arc::new(LocalVolSurface::flat(0.3).unwrap()),
            Arc::new(ConstantField::new(1.0).unwrap()),
            VolFactorDynamics::tanh_reverting(1.0, 0.4).unwrap(),
            0.0,
            1.0,
            InitialLaw::default(),
        )
        .unwrap();
        for p in [0.0, 0.3, 2.5] {
            let (b, sigma) = lsv_drift_diffusion(&s, 0.5, 0.1, -0.2, p, p).unwrap();
            assert_eq!(sigma, 0.3);
            assert_eq!(b, -0.5 * 0.09);
        }
    }

    #[test]
    fn huge_floor_dominates() {
        let s = spec(-0.5, 1e12, 0.2);
        for (p, pv) in [(3.0, 1.5), (0.5, 1.0), (10.0, 20.0)] {
            let (b, sigma) = lsv_drift_diffusion(&s, 0.0, 0.0, 0.3, p, pv).unwrap();
            let r = sigma * sigma / 0.04;
            assert!((r - 1.0).abs() <= 1e-6);
            assert!((b + 0.02).abs() <= 1e-6);
        }
    }

    #[test]
    fn rejects_non_finite_inputs() {
        let s = spec(-0.5, 0.5, 0.2);
        assert!(matches!(lsv_drift_diffusion(&s, 0.0, f64::NAN, 0.0, 1.0, 1.0), Err(Error::Numeric { .. })));
        assert!(matches!(lsv_drift_diffusion(&s, 0.0, 0.0, 0.0, f64::INFINITY, 1.0), Err(Error::Numeric { .. })));
        assert!(lsv_drift_diffusion(&s, 0.0, 0.0, 0.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn spec_validation_messages() {
        let lv = Arc::new(LocalVolSurface::flat(0.2).unwrap());
        let v: Arc<dyn BoundedField> = Arc::new(ClipExpField::new(0.5, 2.0).unwrap());
        let dyn_ = VolFactorDynamics::tanh_reverting(1.0, 0.4).unwrap();
        let err = LsvModelSpec::new(lv.clone(), v.clone(), dyn_.clone(), 1.5, 0.5, InitialLaw::default()).unwrap_err();
        assert!(err.to_string().contains("model.correlation"));
        let err = LsvModelSpec::new(lv.clone(), v.clone(), dyn_.clone(), 0.0, 0.0, InitialLaw::default()).unwrap_err();
        assert!(err.to_string().contains("floor must be positive"));
        let zero: Arc<dyn BoundedField> = Arc::new(ConstantField::new(0.0).unwrap());
        assert!(LsvModelSpec::new(lv, zero, dyn_, 0.0, 0.5, InitialLaw::default()).is_err());
    }

    #[test]
    fn diagonal_matrix() {
        let a = assemble_diffusion_matrix(0.3, 0.5, 0.0);
        assert_eq!(a.a12, 0.0);
        let (lo, hi) = a.eigenvalues();
        assert!((lo - 0.045).abs() < 1e-15 && (hi - 0.125).abs() < 1e-15);
    }

    #[test]
    fn perfect_correlation_is_degenerate() {
        for theta in [-1.0, 1.0] {
            let a = assemble_diffusion_matrix(1.0, 1.0, theta);
            assert!(a.eigenvalues().0 <= 1e-15);
            assert!(ellipticity_scan(&[1.0], &[1.0], theta).is_err());
        }
    }

    #[test]
    fn eigenvalues_match_general_solver() {
        let a = assemble_diffusion_matrix(0.2, 0.3, -0.5);
        let m = nalgebra::Matrix2::new(a.a11, a.a12, a.a12, a.a22);
        let eig = m.symmetric_eigen().eigenvalues;
        let (lo, hi) = a.eigenvalues();
        let (e_lo, e_hi) = (eig[0].min(eig[1]), eig[0].max(eig[1]));
        assert!((lo - e_lo).abs() < 1e-15 && (hi - e_hi).abs() < 1e-15);
        let det = 0.25 * 0.04 * 0.09 * (1.0 - 0.25);
        assert!((a.determinant() - det).abs() < 1e-16);
        assert!((lo * hi - det).abs() < 1e-16);
    }

    #[test]
    fn diagonal_scan_bounds() {
        let sigmas: Vec<f64> = (0..32).map(|k| 0.1 + 0.3 * k as f64 / 31.0).collect();
        let betas: Vec<f64> = (0..32).map(|k| 0.2 + 0.3 * k as f64 / 31.0).collect();
        let b = ellipticity_scan(&sigmas, &betas, 0.0).unwrap();
        assert!((b.m - 0.005).abs() < 1e-15);
        assert!((b.big_m - 0.125).abs() < 1e-15);
    }

    #[test]
    fn default_model_is_elliptic() {
        let s = spec(-0.5, 0.5, 0.2);
        let b = validate_model(&s, &ValidationGrid::standard(1.0, 0.0)).unwrap();
        assert!(b.m > 0.0);
        // σ² spans [0.04·0.25, 0.04·4]
        assert!((b.m - assemble_diffusion_matrix(0.1, 0.4, -0.5).eigenvalues().0).abs() < 1e-3);
    }

    #[test]
    fn wrong_sign_correlation_rejected() {
        let s = spec(0.9, 0.5, 0.2);
        let err = check_ellipticity(&s, &ValidationGrid::standard(1.0, 0.0)).unwrap_err();
        assert!(matches!(err, Error::SignCondition { .. }));
    }

    #[test]
    fn field_validation_catches_misdeclared_bounds() {
        let f = FnField::new("v", (0.5, 2.0), false, |_, _, y| y.exp());
        assert!(validate_field(&f, &ValidationGrid::standard(1.0, 0.0)).is_err());
        let g = ClipExpField::new(0.5, 2.0).unwrap();
        assert!(validate_field(&g, &ValidationGrid::standard(1.0, 0.0)).is_ok());
    }

    #[test]
    fn factor_validation() {
        let ok = VolFactorDynamics::new(|_, y: f64| -y.tanh(), |_, y: f64| 0.4 + 0.1 * y.sin(), 1.0, (0.3, 0.5), 0.1).unwrap();
        assert!(ok.validate(&ValidationGrid::standard(1.0, 0.0)).is_ok());
        let steep = VolFactorDynamics::new(|_, _| 0.0, |_, y: f64| 0.4 + 0.1 * (5.0 * y).sin(), 1.0, (0.3, 0.5), 0.1).unwrap();
        assert!(steep.validate(&ValidationGrid::new(1.0, (-1.0, 1.0), (-1.0, 1.0), 200)).is_err());
        let unbounded = VolFactorDynamics::new(|_, y| -y, |_, _| 0.4, 1.0, (0.4, 0.4), 0.0).unwrap();
        assert!(unbounded.validate(&ValidationGrid::standard(1.0, 0.0)).is_err());
        assert!(VolFactorDynamics::new(|_, _| 0.0, |_, _| 0.0, 1.0, (0.0, 0.4), 0.0).is_err());
    }

    struct ConstantSystem {
        factor: VolFactorDynamics,
        h: ConstantField,
    }

    impl GeneralSystem for ConstantSystem {
        fn estimates(&self) -> EstimateSet {
            EstimateSet {
                density_2d: false,
                functional: Functional::Local,
            }
        }
        fn h(&self) -> &dyn BoundedField {
            &self.h
        }
        fn v(&self) -> &dyn BoundedField {
            &self.h
        }
        fn drift(&self, _: f64, _: (f64, f64), _: f64, _: f64, _: f64) -> f64 {
            0.7
        }
        fn diffusion(&self, _: f64, _: (f64, f64), _: f64, e1: f64, e2: f64) -> f64 {
            (e2 / e1).sqrt()
        }
        fn factor(&self) -> &VolFactorDynamics {
            &self.factor
        }
        fn correlation(&self) -> f64 {
            0.0
        }
    }

    #[test]
    fn general_interface_with_constant_field() {
        let kappa = 1.7;
        let sys = ConstantSystem {
            factor: VolFactorDynamics::tanh_reverting(1.0, 0.4).unwrap(),
            h: ConstantField::new(kappa).unwrap(),
        };
        for e1 in [0.1, 1.0, 3.3] {
            let e = Estimates {
                density: 0.2,
                marginal: e1,
                weighted_h: kappa * e1,
                weighted_v: kappa * e1,
            };
            let (b, sigma) = general_coefficients(&sys, 0.0, (0.0, 0.0), &e).unwrap();
            assert_eq!(b, 0.7);
            assert!((sigma - kappa.sqrt()).abs() < 1e-15);
        }
        let bad = Estimates {
            density: 0.2,
            marginal: 1.0,
            weighted_h: 2.0,
            weighted_v: 1.7,
        };
        assert!(matches!(
            general_coefficients(&sys, 0.0, (0.0, 0.0), &bad),
            Err(Error::CoefficientDomain { .. })
        ));
    }

    proptest! {
        #[test]
        fn lsv_through_general_interface_matches(
            t in 0.0..2.0f64, x1 in -1.0..1.0f64, y in -3.0..3.0f64,
            p_x in 0.0..5.0f64, rho in 0.5..2.0f64, theta in -1.0..0.0f64, floor in 0.01..3.0f64,
        ) {
            let s = spec(theta, floor, 0.25);
            let pv1 = rho * p_x;
            let direct = lsv_drift_diffusion(&s, t, x1, y, p_x, pv1).unwrap();
            let e = Estimates { density: 0.0, marginal: p_x, weighted_h: pv1, weighted_v: pv1 };
            let general = general_coefficients(&s, t, (x1, y), &e).unwrap();
            prop_assert!((direct.0 - general.0).abs() <= 1e-14);
            prop_assert!((direct.1 - general.1).abs() <= 1e-14);
            // b = -½σ² up to rounding
            prop_assert!((direct.0 + 0.5 * direct.1 * direct.1).abs() <= 4.0 * f64::EPSILON * direct.0.abs());
        }

        #[test]
        fn ratio_and_sigma_bounds(
            p_x in 0.0..50.0f64, rho in 0.5..2.0f64, y in -4.0..4.0f64, floor in 1e-3..10.0f64,
        ) {
            let s = spec(-0.5, floor, 0.2);
            let pv1 = rho * p_x;
            let v = s.v().eval(0.0, 0.0, y);
            let r = leverage_ratio(floor, p_x, v, pv1);
            prop_assert!(r >= 0.25 * (1.0 - 1e-12) && r <= 4.0 * (1.0 + 1e-12));
            let (_, sigma) = lsv_drift_diffusion(&s, 0.0, 0.0, y, p_x, pv1).unwrap();
            let (lo, hi) = s.sigma_squared_bounds();
            prop_assert!(sigma * sigma >= lo * (1.0 - 1e-12) && sigma * sigma <= hi * (1.0 + 1e-12));
        }

        #[test]
        fn ratio_monotone_in_density(
            p_x in 0.01..20.0f64, rho in 0.5..2.0f64, v in 0.5..2.0f64, floor in 0.01..5.0f64,
        ) {
            let h = 1e-6 * p_x;
            let r = |p: f64| leverage_ratio(floor, p, v, rho * p);
            let slope = (r(p_x + h) - r(p_x - h)) / (2.0 * h);
            if v > rho + 1e-6 {
                prop_assert!(slope > 0.0);
            } else if v < rho - 1e-6 {
                prop_assert!(slope < 0.0);
            }
        }
    }
}
