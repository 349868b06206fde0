//! Euler-Maruyama simulation of the interacting particle systems.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::{
    drift_diffusion_from_parts, general_coefficients, validate_model, BoundedField, Estimates,
    Functional, GeneralSystem, LsvModelSpec, ValidationGrid, VolFactorDynamics,
};
use crate::ensemble::ParticleEnsemble;
use crate::error::{Error, Result};
use crate::kernel::{
    bilinear, density_2d_on_grid, grid_sums, silverman, KernelFamily, KernelSpec, UniformGrid, Weights,
    DEFAULT_GRID_POINTS, GRID_PADDING,
};
use crate::market::LocalVolSurface;
use crate::rng::{Domain, StreamKey};

/// Side of the tensor grid used for 2D density estimates.
pub const DENSITY_2D_POINTS: usize = 128;

/// Stdev standing in for a point-mass initial spot.
pub const DETERMINISTIC_SPOT_EPS: f64 = 1e-4;

/// Independent Gaussians for `X0 - log S0` and `Y0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialLaw {
    pub spot: f64,
    pub x_mean: f64,
    pub x_std: f64,
    pub y_mean: f64,
    pub y_std: f64,
}

impl Default for InitialLaw {
    fn default() -> Self {
        Self {
            spot: 1.0,
            x_mean: 0.0,
            x_std: DETERMINISTIC_SPOT_EPS,
            y_mean: 0.0,
            y_std: 0.2,
        }
    }
}

impl InitialLaw {
    /// `X0 = log S0` smeared by `eps`, default factor law.
    pub fn deterministic_spot(spot: f64, eps: f64) -> Self {
        Self {
            spot,
            x_std: eps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.spot > 0.0) || !self.spot.is_finite() {
            return Err(Error::config("initial.spot", "spot must be positive and finite"));
        }
        // a point mass has no density; keep a strictly positive spread
        if !(self.x_std > 0.0) || !self.x_std.is_finite() {
            return Err(Error::config("initial.x_std", "must be positive and finite"));
        }
        if !(self.y_std > 0.0) || !self.y_std.is_finite() {
            return Err(Error::config("initial.y_std", "must be positive and finite"));
        }
        if !self.x_mean.is_finite() || !self.y_mean.is_finite() {
            return Err(Error::config("initial", "means must be finite"));
        }
        Ok(())
    }

    pub fn log_spot(&self) -> f64 {
        self.spot.ln()
    }
}

/// Kernel bandwidth: fixed, or Silverman's rule on the current X sample every step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BandwidthRepr", into = "BandwidthRepr")]
pub enum BandwidthChoice {
    Auto,
    Fixed(f64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum BandwidthRepr {
    Value(f64),
    Word(String),
}

impl TryFrom<BandwidthRepr> for BandwidthChoice {
    type Error = String;

    fn try_from(repr: BandwidthRepr) -> std::result::Result<Self, String> {
        match repr {
            BandwidthRepr::Value(v) => Ok(BandwidthChoice::Fixed(v)),
            BandwidthRepr::Word(w) if w == "auto" => Ok(BandwidthChoice::Auto),
            BandwidthRepr::Word(w) => Err(format!("bandwidth must be a number or \"auto\", got \"{w}\"")),
        }
    }
}

impl From<BandwidthChoice> for BandwidthRepr {
    fn from(choice: BandwidthChoice) -> Self {
        match choice {
            BandwidthChoice::Auto => BandwidthRepr::Word("auto".into()),
            BandwidthChoice::Fixed(v) => BandwidthRepr::Value(v),
        }
    }
}

/// Steps at which the ensemble is stored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RecordSchedule {
    /// Initial and terminal state.
    #[default]
    Endpoints,
    All,
    Steps(Vec<usize>),
}

impl RecordSchedule {
    /// Sorted, deduplicated step indices.
    pub fn resolve(&self, steps: usize) -> Result<Vec<usize>> {
        let mut out = match self {
            RecordSchedule::Endpoints => vec![0, steps],
            RecordSchedule::All => (0..=steps).collect(),
            RecordSchedule::Steps(s) => s.clone(),
        };
        if let Some(&bad) = out.iter().find(|&&s| s > steps) {
            return Err(Error::config("record", format!("step {bad} is beyond the last step {steps}")));
        }
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub particles: usize,
    pub steps: usize,
    pub horizon: f64,
    #[serde(default = "auto_bandwidth")]
    pub bandwidth: BandwidthChoice,
    #[serde(default)]
    pub kernel: KernelFamily,
    pub seed: u64,
    #[serde(default = "default_grid_size")]
    pub grid_size: usize,
    #[serde(default)]
    pub record: RecordSchedule,
    /// Worker threads; `None` uses the global pool.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

fn auto_bandwidth() -> BandwidthChoice {
    BandwidthChoice::Auto
}

fn default_grid_size() -> usize {
    DEFAULT_GRID_POINTS
}

impl SimConfig {
    pub fn new(particles: usize, steps: usize, horizon: f64, seed: u64) -> Self {
        Self {
            particles,
            steps,
            horizon,
            bandwidth: BandwidthChoice::Auto,
            kernel: KernelFamily::Gaussian,
            seed,
            grid_size: DEFAULT_GRID_POINTS,
            record: RecordSchedule::Endpoints,
            workers: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::config("steps", "need at least one step"));
        }
        self.validate_common()
    }

    fn validate_common(&self) -> Result<()> {
        if self.particles < 1 {
            return Err(Error::config("particles", "need at least one particle"));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::config("horizon", "must be positive and finite"));
        }
        match self.bandwidth {
            BandwidthChoice::Auto if self.particles < 2 => {
                return Err(Error::config("bandwidth", "\"auto\" needs at least two particles"));
            }
            BandwidthChoice::Fixed(d) if !(d > 0.0) || !d.is_finite() => {
                return Err(Error::config("bandwidth", format!("must be positive, got {d}")));
            }
            _ => {}
        }
        if self.grid_size < 2 {
            return Err(Error::config("grid_size", "need at least two grid points"));
        }
        if self.workers == Some(0) {
            return Err(Error::config("workers", "must be at least 1"));
        }
        self.record.resolve(self.steps)?;
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time_at(&self, step: usize) -> f64 {
        step as f64 * self.dt()
    }

    fn kernel_for(&self, x1: &[f64]) -> Result<KernelSpec> {
        let delta = match self.bandwidth {
            BandwidthChoice::Fixed(d) => d,
            BandwidthChoice::Auto => silverman(x1)?.value,
        };
        KernelSpec::new(self.kernel, delta)
    }
}

/// Runs `f` on a dedicated pool of `workers` threads, or on the global pool.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match workers {
        None => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::config("workers", e.to_string()))?
            .install(f),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BrownianIncrement {
    pub dw: f64,
    pub db: f64,
}

/// `dW = √dt Z1`, `dB = √dt (θ Z1 + √(1-θ²) Z2)` from the particle's stream at `step`.
#[inline]
pub fn correlated_increments(key: &StreamKey, id: u64, step: usize, theta: f64, dt: f64) -> BrownianIncrement {
    let (z1, z2) = key.normal_pair(id, step as u64);
    let s = dt.sqrt();
    BrownianIncrement {
        dw: s * z1,
        db: s * (theta * z1 + (1.0 - theta * theta).sqrt() * z2),
    }
}

/// i.i.d. draws from the initial law; particle `i` gets stream id `i`.
pub fn sample_initial(law: &InitialLaw, n: usize, seed: u64) -> Result<ParticleEnsemble> {
    law.validate()?;
    if n < 1 {
        return Err(Error::config("particles", "need at least one particle"));
    }
    let key = StreamKey::new(seed, Domain::Initial);
    let x0 = law.log_spot() + law.x_mean;
    let (x1, x2): (Vec<f64>, Vec<f64>) = (0..n as u64)
        .into_par_iter()
        .map(|id| {
            let (a, b) = key.normal_pair(id, 0);
            (x0 + law.x_std * a, law.y_mean + law.y_std * b)
        })
        .unzip();
    ParticleEnsemble::new(x1, x2, 0.0)
}

/// Stored ensembles and the bandwidths used along the way.
#[derive(Debug, Clone, PartialEq)]
pub struct PathRecorder {
    snapshots: Vec<ParticleEnsemble>,
    bandwidths: Vec<f64>,
}

impl PathRecorder {
    pub fn snapshots(&self) -> &[ParticleEnsemble] {
        &self.snapshots
    }

    pub fn snapshot_at_step(&self, step: usize) -> Option<&ParticleEnsemble> {
        self.snapshots.iter().find(|s| s.step() == step)
    }

    pub fn terminal(&self) -> &ParticleEnsemble {
        self.snapshots.last().expect("recorder holds at least one snapshot")
    }

    /// `S = e^X` at the last snapshot.
    pub fn terminal_spots(&self) -> Vec<f64> {
        spots(self.terminal())
    }

    /// Bandwidth per simulated step (empty for the local-vol reference).
    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }
}

pub fn spots(ensemble: &ParticleEnsemble) -> Vec<f64> {
    ensemble.x1().iter().map(|x| x.exp()).collect()
}

/// Writes `particle_id,x1,x2` rows.
pub fn write_snapshot_csv<W: Write>(ensemble: &ParticleEnsemble, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["particle_id", "x1", "x2"])?;
    for ((id, x1), x2) in ensemble.ids().iter().zip(ensemble.x1()).zip(ensemble.x2()) {
        w.write_record([id.to_string(), format!("{x1:?}"), format!("{x2:?}")])?;
    }
    w.flush()?;
    Ok(())
}

/// Binary snapshot: little-endian `u64` count, then `count` rows of three `f64`
/// (`particle_id`, `x1`, `x2`), row-major.
pub fn write_snapshot_binary<W: Write>(ensemble: &ParticleEnsemble, mut writer: W) -> Result<()> {
    writer.write_all(&(ensemble.len() as u64).to_le_bytes())?;
    for ((&id, x1), x2) in ensemble.ids().iter().zip(ensemble.x1()).zip(ensemble.x2()) {
        writer.write_all(&(id as f64).to_le_bytes())?;
        writer.write_all(&x1.to_le_bytes())?;
        writer.write_all(&x2.to_le_bytes())?;
    }
    Ok(())
}

/// Reads the binary snapshot layout back (time and step are not stored).
pub fn read_snapshot_binary<R: Read>(mut reader: R) -> Result<ParticleEnsemble> {
    let mut word = [0u8; 8];
    reader.read_exact(&mut word)?;
    let n = u64::from_le_bytes(word) as usize;
    let (mut ids, mut x1, mut x2) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        reader.read_exact(&mut word)?;
        ids.push(f64::from_le_bytes(word) as u64);
        reader.read_exact(&mut word)?;
        x1.push(f64::from_le_bytes(word));
        reader.read_exact(&mut word)?;
        x2.push(f64::from_le_bytes(word));
    }
    ParticleEnsemble::with_ids(x1, x2, ids, 0.0, 0)
}

/// `v(t, X_i, Y_i)` per particle, checked against the declared bounds.
fn particle_field(field: &dyn BoundedField, t: f64, x1: &[f64], x2: &[f64]) -> Result<Vec<f64>> {
    let values: Vec<f64> = x1.par_iter().zip(x2).map(|(&x, &y)| field.eval(t, x, y)).collect();
    let (low, high) = field.bounds();
    if let Some(i) = values.iter().position(|v| !(*v >= low && *v <= high)) {
        return Err(Error::CoefficientBounds {
            name: field.name().to_string(),
            t,
            x1: x1[i],
            x2: x2[i],
            value: values[i],
            low,
            high,
        });
    }
    Ok(values)
}

/// `(p̂_1, (p̂ w)_1)` interpolated at each particle; `values` are the particle weights
/// when the field does not depend on x1.
fn local_estimates(
    kernel: &KernelSpec,
    grid_size: usize,
    field: &dyn BoundedField,
    t: f64,
    x1: &[f64],
    x2: &[f64],
    values: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let grid = UniformGrid::covering(x1, GRID_PADDING * kernel.bandwidth(), grid_size)?;
    let weights = if field.depends_on_x1() {
        Weights::Field { field, t, x2 }
    } else {
        let (low, high) = field.bounds();
        Weights::PerParticle {
            values,
            center: 0.5 * (low + high),
        }
    };
    let (den, num) = grid_sums(kernel, &grid, x1, Some(weights))?;
    let num = num.expect("numerator requested");
    Ok(x1
        .par_iter()
        .map(|&x| (grid.interpolate(&den, x), grid.interpolate(&num, x)))
        .unzip())
}

fn first_non_finite(x1: &[f64], x2: &[f64]) -> Option<usize> {
    x1.iter().zip(x2).position(|(a, b)| !a.is_finite() || !b.is_finite())
}

/// One explicit step of the calibrated particle system with a given kernel.
pub fn step_interacting(
    ensemble: &ParticleEnsemble,
    spec: &LsvModelSpec,
    kernel: &KernelSpec,
    grid_size: usize,
    dt: f64,
    key: &StreamKey,
) -> Result<ParticleEnsemble> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::Input(format!("time step must be positive, got {dt}")));
    }
    let t = ensemble.time();
    let step = ensemble.step();
    let (x1, x2, ids) = (ensemble.x1(), ensemble.x2(), ensemble.ids());
    let v = particle_field(spec.v(), t, x1, x2)?;
    let (p, pv) = local_estimates(kernel, grid_size, spec.v(), t, x1, x2, &v)?;
    let slice = spec.local_vol().at_time(t);
    let floor = spec.floor();
    let theta = spec.correlation();
    let factor = spec.dynamics();
    let (nx1, nx2): (Vec<f64>, Vec<f64>) = (0..ensemble.len())
        .into_par_iter()
        .map(|i| {
            let (b, sigma) = drift_diffusion_from_parts(slice.value(x1[i]), floor, p[i], v[i], pv[i]);
            let inc = correlated_increments(key, ids[i], step, theta, dt);
            advance(x1[i], x2[i], t, dt, b, sigma, factor, inc)
        })
        .unzip();
    finish_step(nx1, nx2, ids.to_vec(), t + dt, step + 1)
}

#[inline]
#[allow(clippy::too_many_arguments)]
fn advance(
    x: f64,
    y: f64,
    t: f64,
    dt: f64,
    b: f64,
    sigma: f64,
    factor: &VolFactorDynamics,
    inc: BrownianIncrement,
) -> (f64, f64) {
    (
        x + b * dt + sigma * inc.dw,
        y + factor.drift(t, y) * dt + factor.diffusion(t, y) * inc.db,
    )
}

fn finish_step(x1: Vec<f64>, x2: Vec<f64>, ids: Vec<u64>, time: f64, step: usize) -> Result<ParticleEnsemble> {
    if let Some(i) = first_non_finite(&x1, &x2) {
        return Err(Error::BlowUp {
            step,
            particle: ids[i] as usize,
        });
    }
    Ok(ParticleEnsemble::from_parts(x1, x2, ids, time, step))
}

/// Sorts particles by stream id so that estimator sums do not depend on the caller's order.
/// Returns the canonical ensemble and `order[k]` = caller index of canonical slot `k`.
fn canonical(ensemble: &ParticleEnsemble) -> Result<(ParticleEnsemble, Vec<usize>)> {
    let mut order: Vec<usize> = (0..ensemble.len()).collect();
    order.sort_by_key(|&i| ensemble.ids()[i]);
    if order.windows(2).any(|w| ensemble.ids()[w[0]] == ensemble.ids()[w[1]]) {
        return Err(Error::Input("particle stream ids must be unique".into()));
    }
    Ok((ensemble.permuted(&order)?, order))
}

fn restore(ensemble: &ParticleEnsemble, order: &[usize]) -> ParticleEnsemble {
    let mut inverse = vec![0; order.len()];
    for (k, &i) in order.iter().enumerate() {
        inverse[i] = k;
    }
    ensemble.permuted(&inverse).expect("inverse of a permutation")
}

/// Drives `step` over the configured horizon, recording per schedule.
fn run(
    config: &SimConfig,
    start: &ParticleEnsemble,
    mut step: impl FnMut(&ParticleEnsemble, usize) -> Result<(ParticleEnsemble, Option<f64>)>,
) -> Result<PathRecorder> {
    let schedule = config.record.resolve(config.steps)?;
    let (mut state, order) = canonical(start)?;
    let state_time = |s: &ParticleEnsemble, k: usize| {
        ParticleEnsemble::from_parts(s.x1().to_vec(), s.x2().to_vec(), s.ids().to_vec(), config.time_at(k), k)
    };
    state = state_time(&state, 0);
    let mut snapshots = Vec::with_capacity(schedule.len());
    let mut bandwidths = Vec::with_capacity(config.steps);
    let mut next = schedule.iter().peekable();
    for k in 0..=config.steps {
        if next.peek() == Some(&&k) {
            snapshots.push(restore(&state, &order));
            next.next();
        }
        if k == config.steps {
            break;
        }
        let (mut advanced, delta) = step(&state, k)?;
        advanced = state_time(&advanced, k + 1);
        bandwidths.extend(delta);
        state = advanced;
        log::debug!("step {}/{} done", k + 1, config.steps);
    }
    Ok(PathRecorder { snapshots, bandwidths })
}

/// Validates the model on the standard grid over the run horizon.
pub fn validate_for_run(spec: &LsvModelSpec, horizon: f64) -> Result<()> {
    let grid = ValidationGrid::standard(horizon, spec.initial().log_spot());
    validate_model(spec, &grid).map(|_| ())
}

/// Simulates the calibrated model from its initial law.
pub fn simulate(spec: &LsvModelSpec, config: &SimConfig) -> Result<PathRecorder> {
    config.validate()?;
    validate_for_run(spec, config.horizon)?;
    with_workers(config.workers, || {
        let start = sample_initial(spec.initial(), config.particles, config.seed)?;
        simulate_from_unchecked(spec, config, &start)
    })
}

/// Simulates the calibrated model from a given ensemble (ids select the random streams).
pub fn simulate_from(spec: &LsvModelSpec, config: &SimConfig, start: &ParticleEnsemble) -> Result<PathRecorder> {
    let mut config = config.clone();
    config.particles = start.len();
    config.validate()?;
    validate_for_run(spec, config.horizon)?;
    with_workers(config.workers, || simulate_from_unchecked(spec, &config, start))
}

fn simulate_from_unchecked(spec: &LsvModelSpec, config: &SimConfig, start: &ParticleEnsemble) -> Result<PathRecorder> {
    let key = StreamKey::new(config.seed, Domain::Increments);
    let dt = config.dt();
    run(config, start, |state, _| {
        let kernel = config.kernel_for(state.x1())?;
        let next = step_interacting(state, spec, &kernel, config.grid_size, dt, &key)?;
        Ok((next, Some(kernel.bandwidth())))
    })
}

/// `dX = -½σ_D² dt + σ_D dW` on the same initial and increment streams as [`simulate`].
///
/// `x2` carries the initial factor values unchanged. Zero steps are allowed.
pub fn simulate_local_vol_reference(
    local_vol: &LocalVolSurface,
    initial: &InitialLaw,
    config: &SimConfig,
) -> Result<PathRecorder> {
    config.validate_common()?;
    with_workers(config.workers, || {
        let start = sample_initial(initial, config.particles, config.seed)?;
        let key = StreamKey::new(config.seed, Domain::Increments);
        let dt = config.dt();
        run(config, &start, |state, k| {
            let t = state.time();
            let slice = local_vol.at_time(t);
            let ids = state.ids();
            let x1: Vec<f64> = state
                .x1()
                .par_iter()
                .zip(ids)
                .map(|(&x, &id)| {
                    let (b, sigma) = drift_diffusion_from_parts(slice.value(x), 1.0, 1.0, 1.0, 1.0);
                    // θ only affects dB, which the reference does not use
                    let inc = correlated_increments(&key, id, k, 0.0, dt);
                    x + b * dt + sigma * inc.dw
                })
                .collect();
            Ok((finish_step(x1, state.x2().to_vec(), ids.to_vec(), t + dt, k + 1)?, None))
        })
    })
}

/// Estimates requested by a general system at every particle.
fn general_estimates(
    system: &dyn GeneralSystem,
    kernel: &KernelSpec,
    grid_size: usize,
    t: f64,
    x1: &[f64],
    x2: &[f64],
) -> Result<Vec<Estimates>> {
    let n = x1.len();
    let set = system.estimates();
    let density: Vec<f64> = if set.density_2d {
        let pad = GRID_PADDING * kernel.bandwidth();
        let g1 = UniformGrid::covering(x1, pad, DENSITY_2D_POINTS)?;
        let g2 = UniformGrid::covering(x2, pad, DENSITY_2D_POINTS)?;
        let f = density_2d_on_grid(kernel, &g1, &g2, x1, x2);
        x1.par_iter().zip(x2).map(|(&a, &b)| bilinear(&g1, &g2, &f, a, b)).collect()
    } else {
        vec![0.0; n]
    };
    let h = system.h();
    let v = system.v();
    let same = std::ptr::addr_eq(h as *const dyn BoundedField, v as *const dyn BoundedField);
    match set.functional {
        Functional::Local => {
            let hv = particle_field(h, t, x1, x2)?;
            let (p, ph) = local_estimates(kernel, grid_size, h, t, x1, x2, &hv)?;
            let pv = if same {
                ph.clone()
            } else {
                let vv = particle_field(v, t, x1, x2)?;
                local_estimates(kernel, grid_size, v, t, x1, x2, &vv)?.1
            };
            Ok((0..n)
                .map(|i| Estimates {
                    density: density[i],
                    marginal: p[i],
                    weighted_h: ph[i],
                    weighted_v: pv[i],
                })
                .collect())
        }
        Functional::Global => {
            let mean = |values: Vec<f64>| values.iter().sum::<f64>() / n as f64;
            let eh = mean(particle_field(h, t, x1, x2)?);
            let ev = if same { eh } else { mean(particle_field(v, t, x1, x2)?) };
            Ok((0..n)
                .map(|i| Estimates {
                    density: density[i],
                    marginal: 1.0,
                    weighted_h: eh,
                    weighted_v: ev,
                })
                .collect())
        }
    }
}

/// Simulates a general interacting system `(b°, σ°, h, v, λ, β, θ)`.
pub fn simulate_general(system: &dyn GeneralSystem, initial: &InitialLaw, config: &SimConfig) -> Result<PathRecorder> {
    config.validate()?;
    let theta = system.correlation();
    if !(-1.0..=1.0).contains(&theta) {
        return Err(Error::config("correlation", format!("correlation must lie in [-1, 1], got {theta}")));
    }
    with_workers(config.workers, || {
        let start = sample_initial(initial, config.particles, config.seed)?;
        let key = StreamKey::new(config.seed, Domain::Increments);
        let dt = config.dt();
        let factor = system.factor();
        run(config, &start, |state, k| {
            let t = state.time();
            let kernel = config.kernel_for(state.x1())?;
            let (x1, x2, ids) = (state.x1(), state.x2(), state.ids());
            let estimates = general_estimates(system, &kernel, config.grid_size, t, x1, x2)?;
            let coeffs: Vec<(f64, f64)> = (0..x1.len())
                .into_par_iter()
                .map(|i| general_coefficients(system, t, (x1[i], x2[i]), &estimates[i]))
                .collect::<Result<_>>()?;
            let (nx1, nx2): (Vec<f64>, Vec<f64>) = (0..x1.len())
                .into_par_iter()
                .map(|i| {
                    let inc = correlated_increments(&key, ids[i], k, theta, dt);
                    advance(x1[i], x2[i], t, dt, coeffs[i].0, coeffs[i].1, factor, inc)
                })
                .unzip();
            Ok((finish_step(nx1, nx2, ids.to_vec(), t + dt, k + 1)?, Some(kernel.bandwidth())))
        })
    })
}
