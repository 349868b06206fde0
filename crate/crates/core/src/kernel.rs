//! Mollifiers and the density / conditional-expectation estimators built on
//! the empirical measure of a particle ensemble.
//!
//! A kernel `G_δ(u) = G(u/δ)/δ` is non-negative with unit mass. The 2D product
//! kernel is `G_δ(x1)·G_δ(x2)`. Estimators come in two flavours:
//!
//! * exact: direct `O(N·Q)` sums over all particles, used as the test oracle;
//! * binned: each particle is scattered onto the grid points inside its kernel
//!   window (Gaussian truncated at 8δ). On uniform grids the Gaussian weights along
//!   the window are produced by a multiplicative recurrence, so no transcendental is
//!   evaluated per grid point.
//!
//! Particles are processed in fixed-size chunks whose partial grids are combined in
//! chunk order, so results do not depend on the worker count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::BoundedField;
use crate::ensemble::ParticleEnsemble;
use crate::error::{Error, Result};

/// Truncation radius of the Gaussian in binned mode, in bandwidths.
pub const GAUSSIAN_TRUNCATION: f64 = 8.0;
/// Default number of estimator grid points.
pub const DEFAULT_GRID_POINTS: usize = 512;
/// Estimator grids span the particle range padded by this many bandwidths.
pub const GRID_PADDING: f64 = 6.0;
pub const BANDWIDTH_FLOOR: f64 = 1e-4;
/// Denominators below this are treated as vacuum.
pub const VACUUM_DENSITY: f64 = 1e-300;

const CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    #[default]
    Gaussian,
    Epanechnikov,
    Quartic,
}

impl KernelFamily {
    /// Unnormalized profile on the unit scale.
    #[inline]
    fn shape(self, u: f64) -> f64 {
        match self {
            KernelFamily::Gaussian => (-0.5 * u * u).exp(),
            KernelFamily::Epanechnikov => {
                if u.abs() < 1.0 {
                    1.0 - u * u
                } else {
                    0.0
                }
            }
            KernelFamily::Quartic => {
                if u.abs() < 1.0 {
                    let s = 1.0 - u * u;
                    s * s
                } else {
                    0.0
                }
            }
        }
    }

    fn normalization(self) -> f64 {
        match self {
            KernelFamily::Gaussian => 1.0 / (2.0 * std::f64::consts::PI).sqrt(),
            KernelFamily::Epanechnikov => 0.75,
            KernelFamily::Quartic => 15.0 / 16.0,
        }
    }

    /// Support (or truncation) radius on the unit scale.
    fn support(self) -> f64 {
        match self {
            KernelFamily::Gaussian => GAUSSIAN_TRUNCATION,
            KernelFamily::Epanechnikov | KernelFamily::Quartic => 1.0,
        }
    }
}

/// Kernel family plus bandwidth δ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    family: KernelFamily,
    bandwidth: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(Error::config(
                "kernel.bandwidth",
                format!("bandwidth must be positive and finite, got {bandwidth}"),
            ));
        }
        Ok(Self { family, bandwidth })
    }

    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        Self::new(KernelFamily::Gaussian, bandwidth)
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// `G_δ(u)`.
    #[inline]
    pub fn value(&self, u: f64) -> f64 {
        self.family.shape(u / self.bandwidth) * self.family.normalization() / self.bandwidth
    }

    /// Radius beyond which binned sums ignore a particle.
    pub fn radius(&self) -> f64 {
        self.family.support() * self.bandwidth
    }

    /// Product kernel `G_δ(u1)·G_δ(u2)`.
    #[inline]
    pub fn value_2d(&self, u1: f64, u2: f64) -> f64 {
        self.value(u1) * self.value(u2)
    }
}

/// Uniform grid `start + j·step`, `j < len`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformGrid {
    start: f64,
    step: f64,
    len: usize,
}

impl UniformGrid {
    pub fn new(start: f64, step: f64, len: usize) -> Result<Self> {
        if len < 2 || !(step > 0.0) || !start.is_finite() || !step.is_finite() {
            return Err(Error::Input(format!(
                "uniform grid needs len >= 2 and a positive step (len {len}, step {step})"
            )));
        }
        Ok(Self { start, step, len })
    }

    /// `len` points from `lo` to `hi` inclusive.
    pub fn spanning(lo: f64, hi: f64, len: usize) -> Result<Self> {
        if len < 2 {
            return Err(Error::Input("uniform grid needs at least two points".into()));
        }
        Self::new(lo, (hi - lo) / (len - 1) as f64, len)
    }

    /// Grid over `[min(xs) - pad, max(xs) + pad]`.
    pub fn covering(xs: &[f64], pad: f64, len: usize) -> Result<Self> {
        let (lo, hi) = xs
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Input("cannot cover an empty or non-finite sample".into()));
        }
        Self::spanning(lo - pad, hi + pad, len)
    }

    /// Recognizes a sorted point list as uniform (relative spacing tolerance 1e-9).
    pub fn from_points(points: &[f64]) -> Option<Self> {
        if points.len() < 2 {
            return None;
        }
        let step = (points[points.len() - 1] - points[0]) / (points.len() - 1) as f64;
        if !(step > 0.0) {
            return None;
        }
        let uniform = points
            .iter()
            .enumerate()
            .all(|(j, &p)| (p - (points[0] + j as f64 * step)).abs() <= 1e-9 * step);
        uniform.then_some(Self {
            start: points[0],
            step,
            len: points.len(),
        })
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn end(&self) -> f64 {
        self.point(self.len - 1)
    }

    #[inline]
    pub fn point(&self, j: usize) -> f64 {
        self.start + j as f64 * self.step
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.len).map(|j| self.point(j)).collect()
    }

    /// Cell index and weight of the right node for linear interpolation; flat outside.
    #[inline]
    fn locate(&self, x: f64) -> (usize, f64) {
        let s = (x - self.start) / self.step;
        if !(s > 0.0) {
            return (0, 0.0);
        }
        let last = (self.len - 1) as f64;
        if s >= last {
            return (self.len - 2, 1.0);
        }
        let i = s.floor();
        (i as usize, s - i)
    }

    /// Linear interpolation of node `values`, flat beyond the ends.
    #[inline]
    pub fn interpolate(&self, values: &[f64], x: f64) -> f64 {
        let (i, w) = self.locate(x);
        values[i] * (1.0 - w) + values[i + 1] * w
    }

    /// Index range of nodes within `radius` of `x`, or `None` if empty.
    #[inline]
    fn window(&self, x: f64, radius: f64) -> Option<(usize, usize)> {
        let lo = ((x - radius - self.start) / self.step).ceil();
        let hi = ((x + radius - self.start) / self.step).floor();
        if hi < 0.0 || lo > (self.len - 1) as f64 {
            return None;
        }
        let lo = lo.max(0.0) as usize;
        let hi = (hi as usize).min(self.len - 1);
        (lo <= hi).then_some((lo, hi))
    }
}

/// Calls `f(j, profile)` for each grid node in the kernel window of `x`, where
/// `profile` is the unnormalized kernel shape at `(node_j - x)/δ`.
#[inline]
fn scatter(spec: &KernelSpec, grid: &UniformGrid, x: f64, mut f: impl FnMut(usize, f64)) {
    let Some((lo, hi)) = grid.window(x, spec.radius()) else {
        return;
    };
    let delta = spec.bandwidth;
    match spec.family {
        KernelFamily::Gaussian => {
            // exp(-(u0 + k h)^2 / 2) = exp(-u0^2/2) * prod_{i<k} exp(-(2 u0 h + (2i+1) h^2)/2)
            let h = grid.step / delta;
            let u0 = (grid.point(lo) - x) / delta;
            let mut value = (-0.5 * u0 * u0).exp();
            let mut ratio = (-(u0 * h + 0.5 * h * h)).exp();
            let decay = (-h * h).exp();
            for j in lo..=hi {
                f(j, value);
                value *= ratio;
                ratio *= decay;
            }
        }
        family => {
            for j in lo..=hi {
                f(j, family.shape((grid.point(j) - x) / delta));
            }
        }
    }
}

/// Per-particle weighting of the numerator sum.
#[derive(Clone, Copy)]
pub(crate) enum Weights<'a> {
    /// Precomputed weight per particle; sums are accumulated around `center`.
    PerParticle { values: &'a [f64], center: f64 },
    /// `v(t, node x1, Y_i)`: the field is evaluated at the grid node, not at the particle.
    Field {
        field: &'a dyn BoundedField,
        t: f64,
        x2: &'a [f64],
    },
}

/// Unnormalized kernel sums on a uniform grid: `(Σ G, Σ w·G)` scaled to density units.
pub(crate) fn grid_sums(
    spec: &KernelSpec,
    grid: &UniformGrid,
    x1: &[f64],
    weights: Option<Weights<'_>>,
) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    let n = x1.len();
    let len = grid.len();
    let with_numerator = weights.is_some();
    let partials: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let range = chunk * CHUNK..((chunk + 1) * CHUNK).min(n);
            let mut den = vec![0.0; len];
            let mut num = if with_numerator { vec![0.0; len] } else { Vec::new() };
            match weights {
                None => {
                    for &x in &x1[range] {
                        scatter(spec, grid, x, |j, g| den[j] += g);
                    }
                }
                Some(Weights::PerParticle { values, center }) => {
                    for i in range {
                        let wi = values[i] - center;
                        scatter(spec, grid, x1[i], |j, g| {
                            den[j] += g;
                            num[j] += wi * g;
                        });
                    }
                }
                Some(Weights::Field { field, t, x2 }) => {
                    let (low, high) = field.bounds();
                    let center = 0.5 * (low + high);
                    let mut violation = None;
                    for i in range {
                        let y = x2[i];
                        scatter(spec, grid, x1[i], |j, g| {
                            let node = grid.point(j);
                            let v = field.eval(t, node, y);
                            if !(v >= low && v <= high) && violation.is_none() {
                                violation = Some((node, y, v));
                            }
                            den[j] += g;
                            num[j] += (v - center) * g;
                        });
                    }
                    if let Some((node, y, v)) = violation {
                        return Err(bounds_error(field, t, node, y, v));
                    }
                }
            }
            Ok((den, num))
        })
        .collect();

    let scale = spec.family.normalization() / (spec.bandwidth * n as f64);
    let mut den = vec![0.0; len];
    let mut num = if with_numerator { Some(vec![0.0; len]) } else { None };
    for partial in partials {
        let (d, m) = partial?;
        den.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
        if let Some(num) = num.as_mut() {
            num.iter_mut().zip(&m).for_each(|(a, b)| *a += b);
        }
    }
    den.iter_mut().for_each(|v| *v *= scale);
    if let Some(num) = num.as_mut() {
        // centring keeps a constant weight exact: num = center * den
        let center = match weights {
            Some(Weights::PerParticle { center, .. }) => center,
            Some(Weights::Field { field, .. }) => {
                let (low, high) = field.bounds();
                0.5 * (low + high)
            }
            None => 0.0,
        };
        num.iter_mut().zip(&den).for_each(|(v, d)| *v = center * d + *v * scale);
    }
    Ok((den, num))
}

fn bounds_error(field: &dyn BoundedField, t: f64, x1: f64, x2: f64, value: f64) -> Error {
    let (low, high) = field.bounds();
    Error::CoefficientBounds {
        name: field.name().to_string(),
        t,
        x1,
        x2,
        value,
        low,
        high,
    }
}

fn check_query_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Input("query grid is empty".into()));
    }
    if let Some(i) = grid.windows(2).position(|w| !(w[1] > w[0])) {
        return Err(Error::Input(format!(
            "query grid must be strictly increasing (violated at index {})",
            i + 1
        )));
    }
    if grid.iter().any(|x| !x.is_finite()) {
        return Err(Error::Input("query grid has non-finite points".into()));
    }
    Ok(())
}

/// Kernel sums at arbitrary sorted query points using particles sorted by x1.
fn gathered_sums(
    spec: &KernelSpec,
    query: &[f64],
    x1: &[f64],
    weight: Option<&(dyn Fn(usize, f64) -> f64 + Sync)>,
) -> (Vec<f64>, Vec<f64>) {
    let mut order: Vec<usize> = (0..x1.len()).collect();
    order.sort_by(|&a, &b| x1[a].total_cmp(&x1[b]));
    let sorted: Vec<f64> = order.iter().map(|&i| x1[i]).collect();
    let radius = spec.radius();
    let scale = spec.family.normalization() / (spec.bandwidth * x1.len() as f64);
    query
        .par_iter()
        .map(|&q| {
            let lo = sorted.partition_point(|&x| x < q - radius);
            let hi = sorted.partition_point(|&x| x <= q + radius);
            let (mut den, mut num) = (0.0, 0.0);
            for k in lo..hi {
                let g = spec.family.shape((q - sorted[k]) / spec.bandwidth);
                den += g;
                if let Some(w) = weight {
                    num += w(order[k], q) * g;
                }
            }
            (den * scale, num * scale)
        })
        .unzip()
}

/// Estimated first marginal `p̂_1` on a query grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityEstimate1D {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub bandwidth: f64,
}

impl DensityEstimate1D {
    /// Trapezoid integral over the query grid.
    pub fn integral(&self) -> f64 {
        trapezoid(&self.grid, &self.values)
    }
}

/// `(p̂v)_1`, `p̂_1` and the Nadaraya-Watson ratio on a query grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalFieldEstimate {
    pub grid: Vec<f64>,
    pub numerator: Vec<f64>,
    pub denominator: Vec<f64>,
    pub ratio: Vec<f64>,
}

pub(crate) fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| 0.5 * (xs[1] - xs[0]) * (ys[0] + ys[1]))
        .sum()
}

/// `p̂_1(x1) = (1/N) Σ G_δ(x1 - X_i)` on `query_grid` (binned evaluation).
pub fn marginal_density_1d(
    particles: &ParticleEnsemble,
    spec: &KernelSpec,
    query_grid: &[f64],
) -> Result<DensityEstimate1D> {
    check_query_grid(query_grid)?;
    let values = match UniformGrid::from_points(query_grid) {
        Some(grid) => grid_sums(spec, &grid, particles.x1(), None)?.0,
        None => gathered_sums(spec, query_grid, particles.x1(), None).0,
    };
    Ok(DensityEstimate1D {
        grid: query_grid.to_vec(),
        values,
        bandwidth: spec.bandwidth,
    })
}

/// Brute-force `p̂_1` over every particle, without truncation.
pub fn marginal_density_1d_exact(
    particles: &ParticleEnsemble,
    spec: &KernelSpec,
    query_grid: &[f64],
) -> Result<DensityEstimate1D> {
    check_query_grid(query_grid)?;
    let n = particles.len() as f64;
    let values = query_grid
        .iter()
        .map(|&q| particles.x1().iter().map(|&x| spec.value(q - x)).sum::<f64>() / n)
        .collect();
    Ok(DensityEstimate1D {
        grid: query_grid.to_vec(),
        values,
        bandwidth: spec.bandwidth,
    })
}

/// `(1/N) Σ G_δ(x1 - X_i)·G_δ(x2 - Y_i)` at one point.
pub fn mollified_density_2d(particles: &ParticleEnsemble, spec: &KernelSpec, query: (f64, f64)) -> f64 {
    let sum: f64 = particles
        .x1()
        .iter()
        .zip(particles.x2())
        .map(|(&x, &y)| spec.value_2d(query.0 - x, query.1 - y))
        .sum();
    sum / particles.len() as f64
}

fn nadaraya_watson(numerator: &[f64], denominator: &[f64], bounds: (f64, f64)) -> Vec<f64> {
    let (low, high) = bounds;
    numerator
        .iter()
        .zip(denominator)
        .map(|(&num, &den)| {
            if den >= VACUUM_DENSITY {
                num / den
            } else if den > 0.0 {
                (num / den).clamp(low, high)
            } else {
                0.5 * (low + high)
            }
        })
        .collect()
}

fn field_weights(field: &dyn BoundedField, t: f64, particles: &ParticleEnsemble) -> Result<Option<Vec<f64>>> {
    if field.depends_on_x1() {
        return Ok(None);
    }
    let (low, high) = field.bounds();
    let mut weights = Vec::with_capacity(particles.len());
    for (&x, &y) in particles.x1().iter().zip(particles.x2()) {
        let v = field.eval(t, x, y);
        if !(v >= low && v <= high) {
            return Err(bounds_error(field, t, x, y, v));
        }
        weights.push(v);
    }
    Ok(Some(weights))
}

/// Conditional field estimate with `v` evaluated at the query x1 (binned evaluation).
pub fn conditional_field(
    particles: &ParticleEnsemble,
    v: &dyn BoundedField,
    t: f64,
    spec: &KernelSpec,
    query_grid: &[f64],
) -> Result<ConditionalFieldEstimate> {
    check_query_grid(query_grid)?;
    let (denominator, numerator) = match UniformGrid::from_points(query_grid) {
        Some(grid) => {
            let per_particle = field_weights(v, t, particles)?;
            let weights = match &per_particle {
                Some(w) => Weights::PerParticle {
                    values: w,
                    center: 0.5 * (v.bounds().0 + v.bounds().1),
                },
                None => Weights::Field {
                    field: v,
                    t,
                    x2: particles.x2(),
                },
            };
            let (den, num) = grid_sums(spec, &grid, particles.x1(), Some(weights))?;
            (den, num.expect("numerator requested"))
        }
        None => {
            let x2 = particles.x2();
            let (low, high) = v.bounds();
            let center = 0.5 * (low + high);
            let violation = std::sync::Mutex::new(None);
            let weight = |i: usize, q: f64| {
                let value = v.eval(t, q, x2[i]);
                if !(value >= low && value <= high) {
                    violation.lock().unwrap().get_or_insert((q, x2[i], value));
                }
                value - center
            };
            let (den, num) = gathered_sums(spec, query_grid, particles.x1(), Some(&weight));
            if let Some((q, y, value)) = violation.into_inner().unwrap() {
                return Err(bounds_error(v, t, q, y, value));
            }
            let num = num.iter().zip(&den).map(|(m, d)| center * d + m).collect();
            (den, num)
        }
    };
    let ratio = nadaraya_watson(&numerator, &denominator, v.bounds());
    Ok(ConditionalFieldEstimate {
        grid: query_grid.to_vec(),
        numerator,
        denominator,
        ratio,
    })
}

/// Brute-force conditional field over every particle.
pub fn conditional_field_exact(
    particles: &ParticleEnsemble,
    v: &dyn BoundedField,
    t: f64,
    spec: &KernelSpec,
    query_grid: &[f64],
) -> Result<ConditionalFieldEstimate> {
    check_query_grid(query_grid)?;
    let n = particles.len() as f64;
    let (low, high) = v.bounds();
    let center = 0.5 * (low + high);
    let mut numerator = Vec::with_capacity(query_grid.len());
    let mut denominator = Vec::with_capacity(query_grid.len());
    for &q in query_grid {
        let (mut num, mut den) = (0.0, 0.0);
        for (&x, &y) in particles.x1().iter().zip(particles.x2()) {
            let g = spec.value(q - x);
            let value = v.eval(t, q, y);
            if !(value >= low && value <= high) {
                return Err(bounds_error(v, t, q, y, value));
            }
            num += g * (value - center);
            den += g;
        }
        numerator.push(center * (den / n) + num / n);
        denominator.push(den / n);
    }
    let ratio = nadaraya_watson(&numerator, &denominator, v.bounds());
    Ok(ConditionalFieldEstimate {
        grid: query_grid.to_vec(),
        numerator,
        denominator,
        ratio,
    })
}

/// 2D product-kernel density on a tensor grid, row-major `[i1 * len2 + i2]` (binned).
pub fn density_2d_on_grid(
    spec: &KernelSpec,
    grid1: &UniformGrid,
    grid2: &UniformGrid,
    x1: &[f64],
    x2: &[f64],
) -> Vec<f64> {
    let n = x1.len();
    let (len1, len2) = (grid1.len(), grid2.len());
    let partials: Vec<Vec<f64>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let mut acc = vec![0.0; len1 * len2];
            let mut row: Vec<(usize, f64)> = Vec::new();
            for i in chunk * CHUNK..((chunk + 1) * CHUNK).min(n) {
                row.clear();
                scatter(spec, grid2, x2[i], |j, g| row.push((j, g)));
                if row.is_empty() {
                    continue;
                }
                scatter(spec, grid1, x1[i], |j1, g1| {
                    let base = j1 * len2;
                    for &(j2, g2) in &row {
                        acc[base + j2] += g1 * g2;
                    }
                });
            }
            acc
        })
        .collect();
    let norm = spec.family.normalization() / spec.bandwidth;
    let scale = norm * norm / n as f64;
    let mut out = vec![0.0; len1 * len2];
    for partial in partials {
        out.iter_mut().zip(&partial).for_each(|(a, b)| *a += b);
    }
    out.iter_mut().for_each(|v| *v *= scale);
    out
}

/// Bilinear interpolation of a row-major tensor-grid field; flat outside.
pub fn bilinear(grid1: &UniformGrid, grid2: &UniformGrid, values: &[f64], x1: f64, x2: f64) -> f64 {
    let (i, w1) = grid1.locate(x1);
    let (j, w2) = grid2.locate(x2);
    let len2 = grid2.len();
    let v00 = values[i * len2 + j];
    let v01 = values[i * len2 + j + 1];
    let v10 = values[(i + 1) * len2 + j];
    let v11 = values[(i + 1) * len2 + j + 1];
    (1.0 - w1) * ((1.0 - w2) * v00 + w2 * v01) + w1 * ((1.0 - w2) * v10 + w2 * v11)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    X1,
    X2,
}

/// Rule-of-thumb bandwidth; `degenerate` is set when the sample has no spread.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bandwidth {
    pub value: f64,
    pub degenerate: bool,
}

/// Silverman's rule `1.06·s·N^(-1/5)`, floored at [`BANDWIDTH_FLOOR`].
pub fn default_bandwidth(particles: &ParticleEnsemble, axis: Axis) -> Result<Bandwidth> {
    let xs = match axis {
        Axis::X1 => particles.x1(),
        Axis::X2 => particles.x2(),
    };
    silverman(xs)
}

pub(crate) fn silverman(xs: &[f64]) -> Result<Bandwidth> {
    let n = xs.len();
    if n < 2 {
        return Err(Error::Input("default bandwidth needs at least two particles".into()));
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    if xs.iter().all(|&x| x == xs[0]) {
        log::warn!("all {n} samples coincide; using the bandwidth floor {BANDWIDTH_FLOOR}");
        return Ok(Bandwidth {
            value: BANDWIDTH_FLOOR,
            degenerate: true,
        });
    }
    Ok(Bandwidth {
        value: (1.06 * sd * (n as f64).powf(-0.2)).max(BANDWIDTH_FLOOR),
        degenerate: false,
    })
}
