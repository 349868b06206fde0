//! Finite-difference Fokker-Planck solver for frozen coefficients.
//!
//! Solves `∂_t p = ∂_i ∂_j (a^{ij} p) - ∂_i (b^i p)` on a truncated rectangle with
//! no-flux boundaries. Each step applies explicit advection and the explicit
//! cross term, then backward-Euler diffusion along each axis. Every operator is
//! written in flux form with zero boundary fluxes, so discrete mass is conserved.

use std::io::Write;

use serde::Serialize;

use crate::coefficients::{DiffusionMatrix, VolFactorDynamics};
use crate::ensemble::ParticleEnsemble;
use crate::error::{Error, Result};
use crate::kernel::{density_2d_on_grid, grid_sums, KernelSpec, UniformGrid};

/// Fraction of each axis treated as the boundary band.
pub const BOUNDARY_BAND: f64 = 0.05;
/// Largest mass allowed in the boundary band at the end of a solve.
pub const BOUNDARY_MASS_LIMIT: f64 = 1e-4;
/// Negative values above this are rounding; below it the scheme is broken.
const NEGATIVE_TOLERANCE: f64 = 1e-12;
/// Time comparisons between particle snapshots and grids.
const TIME_TOLERANCE: f64 = 1e-9;

/// Coefficients `(b, a)` of a linear Fokker-Planck equation.
pub trait FrozenCoefficients: Sync {
    fn drift(&self, t: f64, x1: f64, x2: f64) -> (f64, f64);
    fn diffusion(&self, t: f64, x1: f64, x2: f64) -> DiffusionMatrix;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantCoefficients {
    pub drift: (f64, f64),
    pub diffusion: DiffusionMatrix,
}

impl FrozenCoefficients for ConstantCoefficients {
    fn drift(&self, _: f64, _: f64, _: f64) -> (f64, f64) {
        self.drift
    }

    fn diffusion(&self, _: f64, _: f64, _: f64) -> DiffusionMatrix {
        self.diffusion
    }
}

/// Density on a tensor grid, row-major `[i1 * n2 + i2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FpGrid {
    pub grid1: UniformGrid,
    pub grid2: UniformGrid,
    pub density: Vec<f64>,
    pub time: f64,
    /// Total mass removed by clipping negative values.
    pub clipped_mass: f64,
}

impl FpGrid {
    pub fn new(grid1: UniformGrid, grid2: UniformGrid, density: Vec<f64>, time: f64) -> Result<Self> {
        if density.len() != grid1.len() * grid2.len() {
            return Err(Error::Input("density length does not match the grid".into()));
        }
        if density.iter().any(|p| !p.is_finite()) {
            return Err(Error::Input("density has non-finite values".into()));
        }
        Ok(Self {
            grid1,
            grid2,
            density,
            time,
            clipped_mass: 0.0,
        })
    }

    /// Product Gaussian sampled at the nodes and normalised to unit discrete mass.
    pub fn gaussian(grid1: UniformGrid, grid2: UniformGrid, mean: (f64, f64), std: (f64, f64)) -> Result<Self> {
        if !(std.0 > 0.0 && std.1 > 0.0) {
            return Err(Error::Input("initial stdevs must be positive".into()));
        }
        let g1 = gaussian_nodes(&grid1, mean.0, std.0);
        let g2 = gaussian_nodes(&grid2, mean.1, std.1);
        let density = g1.iter().flat_map(|a| g2.iter().map(move |b| a * b)).collect();
        let mut out = Self::new(grid1, grid2, density, 0.0)?;
        let mass = out.mass();
        out.density.iter_mut().for_each(|p| *p /= mass);
        Ok(out)
    }

    pub fn cell_area(&self) -> f64 {
        self.grid1.step() * self.grid2.step()
    }

    #[inline]
    pub fn value(&self, i1: usize, i2: usize) -> f64 {
        self.density[i1 * self.grid2.len() + i2]
    }

    pub fn mass(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.cell_area()
    }

    /// Mass in the outer band of either axis.
    pub fn boundary_mass(&self, band: f64) -> f64 {
        let (n1, n2) = (self.grid1.len(), self.grid2.len());
        let (b1, b2) = (band_width(n1, band), band_width(n2, band));
        let mut sum = 0.0;
        for i in 0..n1 {
            for j in 0..n2 {
                if i < b1 || i >= n1 - b1 || j < b2 || j >= n2 - b2 {
                    sum += self.value(i, j);
                }
            }
        }
        sum * self.cell_area()
    }

    pub fn marginal_x1(&self) -> Vec<f64> {
        let n2 = self.grid2.len();
        self.density.chunks(n2).map(|row| row.iter().sum::<f64>() * self.grid2.step()).collect()
    }

    pub fn marginal_x2(&self) -> Vec<f64> {
        let n2 = self.grid2.len();
        let mut out = vec![0.0; n2];
        for row in self.density.chunks(n2) {
            out.iter_mut().zip(row).for_each(|(o, p)| *o += p * self.grid1.step());
        }
        out
    }

    /// `Σ |p - q| dx1 dx2` against a density on the same grid.
    pub fn l1_distance(&self, other: &FpGrid) -> Result<f64> {
        if self.grid1 != other.grid1 || self.grid2 != other.grid2 {
            return Err(Error::Input("densities live on different grids".into()));
        }
        Ok(l1(&self.density, &other.density) * self.cell_area())
    }

    /// Writes `x1,x2,p` rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["x1", "x2", "p"])?;
        for i in 0..self.grid1.len() {
            for j in 0..self.grid2.len() {
                w.write_record([
                    format!("{:?}", self.grid1.point(i)),
                    format!("{:?}", self.grid2.point(j)),
                    format!("{:?}", self.value(i, j)),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn band_width(n: usize, band: f64) -> usize {
    ((n as f64 * band).ceil() as usize).max(1)
}

fn gaussian_nodes(grid: &UniformGrid, mean: f64, std: f64) -> Vec<f64> {
    grid.points()
        .iter()
        .map(|x| (-0.5 * ((x - mean) / std).powi(2)).exp())
        .collect()
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum()
}

/// Solves `(I - dτ L) p_new = p` for the 1D flux-form operator
/// `L p = ∂_x ∂_x (a p)` with zero boundary flux (Thomas algorithm).
fn implicit_diffusion(p: &mut [f64], a: &[f64], dtau: f64, dx: f64) {
    let n = p.len();
    let r = dtau / (dx * dx);
    let mut lower = vec![0.0; n];
    let mut diag = vec![1.0; n];
    let mut upper = vec![0.0; n];
    for i in 0..n {
        let faces = usize::from(i > 0) + usize::from(i + 1 < n);
        diag[i] += r * a[i] * faces as f64;
        if i > 0 {
            lower[i] = -r * a[i - 1];
        }
        if i + 1 < n {
            upper[i] = -r * a[i + 1];
        }
    }
    // forward sweep
    for i in 1..n {
        let w = lower[i] / diag[i - 1];
        diag[i] -= w * upper[i - 1];
        p[i] -= w * p[i - 1];
    }
    p[n - 1] /= diag[n - 1];
    for i in (0..n - 1).rev() {
        p[i] = (p[i] - upper[i] * p[i + 1]) / diag[i];
    }
}

/// Advective flux divergence `-∂_x (b p)` with zero boundary flux, accumulated into `out`.
/// Faces with cell Péclet number `|b| dx / 2a <= 1` use central fluxes, the rest upwind.
#[allow(clippy::too_many_arguments)]
fn advect(p: &[f64], b: &[f64], a: &[f64], dx: f64, out: &mut [f64], stride: usize, base: usize, len: usize) {
    let mut previous = 0.0;
    for k in 0..len {
        let flux = if k + 1 < len {
            let (l, r) = (base + k * stride, base + (k + 1) * stride);
            let face = 0.5 * (b[l] + b[r]);
            if face.abs() * dx <= a[l] + a[r] {
                0.5 * (b[l] * p[l] + b[r] * p[r])
            } else {
                face.max(0.0) * p[l] + face.min(0.0) * p[r]
            }
        } else {
            0.0
        };
        out[base + k * stride] -= (flux - previous) / dx;
        previous = flux;
    }
}

/// Explicit stability bound on `dτ` for advection and the cross term.
fn explicit_rate(b1: &[f64], b2: &[f64], a12: &[f64], dx1: f64, dx2: f64) -> f64 {
    b1.iter()
        .zip(b2)
        .zip(a12)
        .map(|((u, v), c)| u.abs() / dx1 + v.abs() / dx2 + 2.0 * c.abs() / (dx1 * dx2))
        .fold(0.0, f64::max)
}

fn clip(p: &mut [f64], cell: f64) -> Result<f64> {
    let mut removed = 0.0;
    for v in p.iter_mut() {
        if *v < 0.0 {
            removed -= *v * cell;
            *v = 0.0;
        }
        if !v.is_finite() {
            return Err(Error::Input("Fokker-Planck solve produced non-finite values".into()));
        }
    }
    Ok(removed)
}

fn check_boundary(mass: f64) -> Result<()> {
    if mass > BOUNDARY_MASS_LIMIT {
        return Err(Error::DomainTooSmall {
            boundary_mass: mass,
            limit: BOUNDARY_MASS_LIMIT,
        });
    }
    Ok(())
}

/// Number of steps and the step actually used to reach `horizon` with steps no longer than `dtau`.
fn time_steps(horizon: f64, dtau: f64) -> Result<(usize, f64)> {
    if !(horizon >= 0.0) || !horizon.is_finite() {
        return Err(Error::config("horizon", "must be finite and non-negative"));
    }
    if !(dtau > 0.0) || !dtau.is_finite() {
        return Err(Error::config("dtau", "must be positive"));
    }
    let steps = (horizon / dtau - 1e-9).ceil().max(0.0) as usize;
    Ok((steps, if steps == 0 { 0.0 } else { horizon / steps as f64 }))
}

/// Advances `p0` by `horizon` with time steps no longer than `dtau`.
pub fn fp_solve(coeff: &dyn FrozenCoefficients, p0: &FpGrid, horizon: f64, dtau: f64) -> Result<FpGrid> {
    let (steps, dtau) = time_steps(horizon, dtau)?;
    let (g1, g2) = (p0.grid1, p0.grid2);
    let (n1, n2) = (g1.len(), g2.len());
    let (dx1, dx2) = (g1.step(), g2.step());
    let cell = dx1 * dx2;
    let mut p = p0.density.clone();
    let mut clipped = p0.clipped_mass;
    let size = n1 * n2;
    let (mut b1, mut b2) = (vec![0.0; size], vec![0.0; size]);
    let (mut a11, mut a12, mut a22) = (vec![0.0; size], vec![0.0; size], vec![0.0; size]);

    for step in 0..steps {
        let t = p0.time + step as f64 * dtau;
        for i in 0..n1 {
            let x1 = g1.point(i);
            for j in 0..n2 {
                let x2 = g2.point(j);
                let k = i * n2 + j;
                (b1[k], b2[k]) = coeff.drift(t, x1, x2);
                let a = coeff.diffusion(t, x1, x2);
                let (lo, _) = a.eigenvalues();
                if !(lo > 0.0) {
                    return Err(Error::NonElliptic {
                        t,
                        y: x2,
                        sigma: (2.0 * a.a11).max(0.0).sqrt(),
                        beta: (2.0 * a.a22).max(0.0).sqrt(),
                        min_eigenvalue: lo,
                    });
                }
                (a11[k], a12[k], a22[k]) = (a.a11, a.a12, a.a22);
            }
        }
        let rate = explicit_rate(&b1, &b2, &a12, dx1, dx2);
        if dtau * rate > 1.0 {
            return Err(Error::Cfl {
                dt: dtau,
                suggested: 0.9 / rate,
            });
        }

        // explicit part: hybrid advection and 2 ∂_1 ∂_2 (a12 p) in flux form along x1
        let mut rhs = vec![0.0; size];
        for j in 0..n2 {
            advect(&p, &b1, &a11, dx1, &mut rhs, n2, j, n1);
        }
        for i in 0..n1 {
            advect(&p, &b2, &a22, dx2, &mut rhs, 1, i * n2, n2);
        }
        if a12.iter().any(|&c| c != 0.0) {
            let q: Vec<f64> = a12.iter().zip(&p).map(|(c, v)| c * v).collect();
            let dq2 = |i: usize, j: usize| {
                let (jm, jp) = (j.saturating_sub(1), (j + 1).min(n2 - 1));
                (q[i * n2 + jp] - q[i * n2 + jm]) / ((jp - jm) as f64 * dx2)
            };
            for j in 0..n2 {
                let mut previous = 0.0;
                for i in 0..n1 {
                    let flux = if i + 1 < n1 { 0.5 * (dq2(i, j) + dq2(i + 1, j)) } else { 0.0 };
                    rhs[i * n2 + j] += 2.0 * (flux - previous) / dx1;
                    previous = flux;
                }
            }
        }
        p.iter_mut().zip(&rhs).for_each(|(v, r)| *v += dtau * r);

        // implicit diffusion, one axis at a time
        let mut column = vec![0.0; n1];
        let mut coeffs = vec![0.0; n1];
        for j in 0..n2 {
            for i in 0..n1 {
                column[i] = p[i * n2 + j];
                coeffs[i] = a11[i * n2 + j];
            }
            implicit_diffusion(&mut column, &coeffs, dtau, dx1);
            for i in 0..n1 {
                p[i * n2 + j] = column[i];
            }
        }
        for i in 0..n1 {
            implicit_diffusion(&mut p[i * n2..(i + 1) * n2], &a22[i * n2..(i + 1) * n2], dtau, dx2);
        }

        if let Some(v) = p.iter().find(|&&v| v < -NEGATIVE_TOLERANCE * 1e6) {
            log::warn!("step {step}: density dipped to {v:e} before clipping");
        }
        clipped += clip(&mut p, cell)?;
    }

    let out = FpGrid {
        grid1: g1,
        grid2: g2,
        density: p,
        time: p0.time + horizon,
        clipped_mass: clipped,
    };
    check_boundary(out.boundary_mass(BOUNDARY_BAND))?;
    Ok(out)
}

/// One-dimensional density on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FpGrid1D {
    pub grid: UniformGrid,
    pub density: Vec<f64>,
    pub time: f64,
}

impl FpGrid1D {
    /// Gaussian sampled at the nodes, normalised to unit discrete mass.
    pub fn gaussian(grid: UniformGrid, mean: f64, std: f64) -> Result<Self> {
        if !(std > 0.0) {
            return Err(Error::Input("initial stdev must be positive".into()));
        }
        let mut density = gaussian_nodes(&grid, mean, std);
        let mass = density.iter().sum::<f64>() * grid.step();
        density.iter_mut().for_each(|p| *p /= mass);
        Ok(Self { grid, density, time: 0.0 })
    }

    pub fn mass(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.grid.step()
    }

    pub fn boundary_mass(&self, band: f64) -> f64 {
        let n = self.grid.len();
        let b = band_width(n, band);
        (self.density[..b].iter().sum::<f64>() + self.density[n - b..].iter().sum::<f64>()) * self.grid.step()
    }

    pub fn l1_distance(&self, other: &[f64]) -> f64 {
        l1(&self.density, other) * self.grid.step()
    }
}

/// `∂_t p = ∂_yy (a p) - ∂_y (λ p)` with `a = ½β²`.
pub fn fp_solve_1d(
    drift: &dyn Fn(f64, f64) -> f64,
    diffusion: &dyn Fn(f64, f64) -> f64,
    p0: &FpGrid1D,
    horizon: f64,
    dtau: f64,
) -> Result<FpGrid1D> {
    let (steps, dtau) = time_steps(horizon, dtau)?;
    let grid = p0.grid;
    let n = grid.len();
    let dx = grid.step();
    let mut p = p0.density.clone();
    let (mut b, mut a) = (vec![0.0; n], vec![0.0; n]);
    for step in 0..steps {
        let t = p0.time + step as f64 * dtau;
        for i in 0..n {
            let y = grid.point(i);
            b[i] = drift(t, y);
            a[i] = diffusion(t, y);
            if !(a[i] > 0.0) {
                return Err(Error::NonElliptic {
                    t,
                    y,
                    sigma: f64::NAN,
                    beta: (2.0 * a[i]).max(0.0).sqrt(),
                    min_eigenvalue: a[i],
                });
            }
        }
        let rate = b.iter().map(|v| v.abs()).fold(0.0, f64::max) / dx;
        if dtau * rate > 1.0 {
            return Err(Error::Cfl {
                dt: dtau,
                suggested: 0.9 / rate,
            });
        }
        let mut rhs = vec![0.0; n];
        advect(&p, &b, &a, dx, &mut rhs, 1, 0, n);
        p.iter_mut().zip(&rhs).for_each(|(v, r)| *v += dtau * r);
        implicit_diffusion(&mut p, &a, dtau, dx);
        clip(&mut p, dx)?;
    }
    let out = FpGrid1D {
        grid,
        density: p,
        time: p0.time + horizon,
    };
    check_boundary(out.boundary_mass(BOUNDARY_BAND))?;
    Ok(out)
}

/// Marginal law of the factor `Y` under its own dynamics, on a domain of
/// `mean ± 8` stdevs of the driftless solution (widened by the drift bound).
pub fn factor_marginal(
    dynamics: &VolFactorDynamics,
    y_mean: f64,
    y_std: f64,
    horizon: f64,
    points: usize,
    dtau: f64,
) -> Result<FpGrid1D> {
    let beta_max = dynamics.diffusion_bounds().1;
    let spread = (y_std * y_std + beta_max * beta_max * horizon).sqrt();
    let half = 8.0 * spread + dynamics.drift_bound() * horizon;
    let grid = UniformGrid::spanning(y_mean - half, y_mean + half, points)?;
    let p0 = FpGrid1D::gaussian(grid, y_mean, y_std)?;
    fp_solve_1d(
        &|t, y| dynamics.drift(t, y),
        &|t, y| {
            let beta = dynamics.diffusion(t, y);
            0.5 * beta * beta
        },
        &p0,
        horizon,
        dtau,
    )
}

fn check_time(ensemble: &ParticleEnsemble, time: f64) -> Result<()> {
    if (ensemble.time() - time).abs() > TIME_TOLERANCE * time.abs().max(1.0) {
        return Err(Error::Input(format!(
            "particle snapshot at t = {} but the grid density is at t = {}",
            ensemble.time(),
            time
        )));
    }
    Ok(())
}

/// L1 distance on the grid between the mollified particle density and `fp`.
pub fn compare_particle_density(ensemble: &ParticleEnsemble, kernel: &KernelSpec, fp: &FpGrid) -> Result<f64> {
    check_time(ensemble, fp.time)?;
    let estimate = density_2d_on_grid(kernel, &fp.grid1, &fp.grid2, ensemble.x1(), ensemble.x2());
    Ok(l1(&estimate, &fp.density) * fp.cell_area())
}

/// L1 distance between the mollified `Y` marginal of the particles and a 1D density.
pub fn compare_factor_marginal(ensemble: &ParticleEnsemble, kernel: &KernelSpec, fp: &FpGrid1D) -> Result<f64> {
    check_time(ensemble, fp.time)?;
    let (estimate, _) = grid_sums(kernel, &fp.grid, ensemble.x2(), None)?;
    Ok(fp.l1_distance(&estimate))
}

/// Summary of an oracle run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleGap {
    pub case: String,
    pub l1: f64,
    pub tolerance: f64,
    pub initial_mass: f64,
    pub final_mass: f64,
    pub boundary_mass: f64,
}

impl OracleGap {
    pub fn passed(&self) -> bool {
        self.l1 <= self.tolerance
    }
}

/// Heat-kernel self-test: `b = 0`, `a = ½I`, Gaussian start with stdev `s0`.
pub fn heat_kernel_check(points: usize, horizon: f64, s0: f64, steps: usize) -> Result<OracleGap> {
    heat_kernel_check_on(points, horizon, s0, steps, None).map(|(gap, _)| gap)
}

/// Heat-kernel self-test on `[-half_width, half_width]²`; the default width is eight terminal stdevs.
pub fn heat_kernel_check_on(
    points: usize,
    horizon: f64,
    s0: f64,
    steps: usize,
    half_width: Option<f64>,
) -> Result<(OracleGap, FpGrid)> {
    let var = s0 * s0 + horizon;
    let half = half_width.unwrap_or(8.0 * var.sqrt());
    let grid = UniformGrid::spanning(-half, half, points)?;
    let p0 = FpGrid::gaussian(grid, grid, (0.0, 0.0), (s0, s0))?;
    let coeff = ConstantCoefficients {
        drift: (0.0, 0.0),
        diffusion: DiffusionMatrix {
            a11: 0.5,
            a12: 0.0,
            a22: 0.5,
        },
    };
    let out = fp_solve(&coeff, &p0, horizon, horizon / steps.max(1) as f64)?;
    let exact = gaussian_density_grid(&grid, &grid, var.sqrt(), var.sqrt());
    let gap = OracleGap {
        case: "heat_kernel".into(),
        l1: l1(&out.density, &exact) * out.cell_area(),
        tolerance: 0.02,
        initial_mass: p0.mass(),
        final_mass: out.mass(),
        boundary_mass: out.boundary_mass(BOUNDARY_BAND),
    };
    Ok((gap, out))
}

/// Centered product Gaussian density (not renormalised).
pub fn gaussian_density_grid(g1: &UniformGrid, g2: &UniformGrid, s1: f64, s2: f64) -> Vec<f64> {
    let norm = 1.0 / (std::f64::consts::TAU * s1 * s2);
    let e1 = gaussian_nodes(g1, 0.0, s1);
    let e2 = gaussian_nodes(g2, 0.0, s2);
    e1.iter().flat_map(|a| e2.iter().map(move |b| norm * a * b)).collect()
}
