//! Calibration and convergence diagnostics.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, RngCore};
use serde::Serialize;

use crate::coefficients::LsvModelSpec;
use crate::engine::{simulate, PathRecorder, SimConfig};
use crate::ensemble::ParticleEnsemble;
use crate::error::{Error, Result};
use crate::fp::OracleGap;
use crate::rng::{derive_seed, standard_normal, Domain, StreamKey};

/// Points of the common quantile grid used when sample sizes differ.
pub const QUANTILE_POINTS: usize = 4096;
/// Default number of random directions for sliced W1.
pub const SLICED_PROJECTIONS: usize = 64;

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Mean accumulated around the first value, so constant inputs come back exactly.
fn shifted_mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut it = xs.into_iter();
    let Some(first) = it.next() else {
        return f64::NAN;
    };
    let (mut sum, mut n) = (0.0, 1usize);
    for x in it {
        sum += x - first;
        n += 1;
    }
    first + sum / n as f64
}

/// Empirical Wasserstein distance of order `e` between two 1D samples.
pub fn wasserstein_1d(a: &[f64], b: &[f64], e: f64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Input("Wasserstein distance needs non-empty samples".into()));
    }
    if !(e >= 1.0) || !e.is_finite() {
        return Err(Error::config("order", format!("Wasserstein order must be >= 1, got {e}")));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::Input("samples must be finite".into()));
    }
    let (sa, sb) = (sorted(a), sorted(b));
    let cost = |d: f64| if e == 1.0 { d.abs() } else { d.abs().powf(e) };
    let mean = if sa.len() == sb.len() {
        sa.iter().zip(&sb).map(|(x, y)| cost(x - y)).sum::<f64>() / sa.len() as f64
    } else {
        let quantile = |s: &[f64], u: f64| s[((u * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1];
        (0..QUANTILE_POINTS)
            .map(|k| {
                let u = (k as f64 + 0.5) / QUANTILE_POINTS as f64;
                cost(quantile(&sa, u) - quantile(&sb, u))
            })
            .sum::<f64>()
            / QUANTILE_POINTS as f64
    };
    Ok(if e == 1.0 { mean } else { mean.powf(1.0 / e) })
}

/// Sliced W1 between two ensembles: mean over seeded random directions of the 1D W1
/// of the projected samples.
pub fn sliced_wasserstein(a: &ParticleEnsemble, b: &ParticleEnsemble, projections: usize, seed: u64) -> Result<f64> {
    if projections == 0 {
        return Err(Error::config("projections", "need at least one projection"));
    }
    let key = StreamKey::new(seed, Domain::Auxiliary);
    let mut total = 0.0;
    for k in 0..projections as u64 {
        let mut rng = key.rng(k, 0);
        let angle = std::f64::consts::PI * rng.gen::<f64>();
        let (s, c) = angle.sin_cos();
        let project = |e: &ParticleEnsemble| -> Vec<f64> { e.x1().iter().zip(e.x2()).map(|(x, y)| c * x + s * y).collect() };
        total += wasserstein_1d(&project(a), &project(b), 1.0)?;
    }
    Ok(total / projections as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepricingRow {
    pub strike: f64,
    pub maturity: f64,
    pub price: f64,
    pub stderr: f64,
    pub target: f64,
    pub z_score: f64,
}

/// Monte Carlo call prices `mean((S - K)^+)` from the snapshot at `step`.
///
/// z-scores divide by `max(stderr, ε)` so a payoff without spread still yields a finite score.
pub fn reprice_calls(recorder: &PathRecorder, strikes: &[f64], step: usize, targets: &[f64]) -> Result<Vec<RepricingRow>> {
    if strikes.is_empty() {
        return Err(Error::config("strikes", "strike list is empty"));
    }
    if targets.len() != strikes.len() {
        return Err(Error::Input("need one target price per strike".into()));
    }
    let snapshot = recorder
        .snapshot_at_step(step)
        .ok_or_else(|| Error::Input(format!("no snapshot recorded at step {step}")))?;
    let spots: Vec<f64> = snapshot.x1().iter().map(|x| x.exp()).collect();
    let n = spots.len() as f64;
    Ok(strikes
        .iter()
        .zip(targets)
        .map(|(&strike, &target)| {
            let payoffs: Vec<f64> = spots.iter().map(|s| (s - strike).max(0.0)).collect();
            let price = payoffs.iter().sum::<f64>() / n;
            let var = if payoffs.len() > 1 {
                payoffs.iter().map(|p| (p - price).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            let stderr = (var / n).sqrt();
            RepricingRow {
                strike,
                maturity: snapshot.time(),
                price,
                stderr,
                target,
                z_score: (price - target) / stderr.max(f64::EPSILON),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChaosRow {
    pub particles: usize,
    /// Mean over trials of the Wasserstein distance between terminal X samples of the N-run and the reference run.
    pub mean_w1: f64,
    pub std_w1: f64,
    /// Same for the Y samples.
    pub mean_w1_y: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChaosFit {
    pub slope: f64,
    pub intercept: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChaosTable {
    pub reference_particles: usize,
    pub rows: Vec<ChaosRow>,
    /// Least-squares fit of `log W1` against `log N`; absent with a single N.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit: Option<ChaosFit>,
}

/// Least-squares line through `(x, y)`.
pub fn fit_line(x: &[f64], y: &[f64]) -> Option<ChaosFit> {
    if x.len() < 2 || x.len() != y.len() {
        return None;
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    Some(ChaosFit {
        slope,
        intercept: my - slope * mx,
    })
}

/// Seeds for trial `trial`: the reference run and rung `rung` of the N list.
pub fn chaos_seeds(master: u64, trial: usize, rung: Option<usize>) -> u64 {
    let tag = match rung {
        None => 2 * trial as u64,
        Some(r) => ((r as u64 + 1) << 32) | (2 * trial as u64 + 1),
    };
    derive_seed(master, tag)
}

/// Propagation-of-chaos study: terminal X-marginal `W_order` of N-runs against an independent N_ref run.
pub fn chaos_study(
    spec: &LsvModelSpec,
    base: &SimConfig,
    particles: &[usize],
    reference_particles: usize,
    trials: usize,
    order: f64,
) -> Result<ChaosTable> {
    if particles.is_empty() {
        return Err(Error::config("particles", "N list is empty"));
    }
    if particles.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config("particles", "N list must be strictly increasing"));
    }
    let largest = *particles.last().expect("non-empty");
    if reference_particles < 4 * largest {
        return Err(Error::config(
            "reference_particles",
            format!("need N_ref >= 4 * max N = {}, got {reference_particles}", 4 * largest),
        ));
    }
    if trials == 0 {
        return Err(Error::config("trials", "need at least one trial"));
    }
    let mut w1 = vec![Vec::with_capacity(trials); particles.len()];
    let mut w1_y = vec![Vec::with_capacity(trials); particles.len()];
    for trial in 0..trials {
        let reference = run_terminal(spec, base, reference_particles, chaos_seeds(base.seed, trial, None))?;
        for (rung, &n) in particles.iter().enumerate() {
            let run = run_terminal(spec, base, n, chaos_seeds(base.seed, trial, Some(rung)))?;
            w1[rung].push(wasserstein_1d(run.x1(), reference.x1(), order)?);
            w1_y[rung].push(wasserstein_1d(run.x2(), reference.x2(), order)?);
            log::info!("chaos trial {trial} N = {n}: W1 = {}", w1[rung][trial]);
        }
    }
    let rows: Vec<ChaosRow> = particles
        .iter()
        .zip(w1.iter().zip(&w1_y))
        .map(|(&n, (xs, ys))| {
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let std = if xs.len() > 1 {
                (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
            } else {
                0.0
            };
            ChaosRow {
                particles: n,
                mean_w1: mean,
                std_w1: std,
                mean_w1_y: ys.iter().sum::<f64>() / ys.len() as f64,
                trials,
            }
        })
        .collect();
    let logs: (Vec<f64>, Vec<f64>) = rows.iter().map(|r| ((r.particles as f64).ln(), r.mean_w1.ln())).unzip();
    let fit = fit_line(&logs.0, &logs.1);
    Ok(ChaosTable {
        reference_particles,
        rows,
        fit,
    })
}

fn run_terminal(spec: &LsvModelSpec, base: &SimConfig, n: usize, seed: u64) -> Result<ParticleEnsemble> {
    let mut config = base.clone();
    config.particles = n;
    config.seed = seed;
    config.record = crate::engine::RecordSchedule::Endpoints;
    Ok(simulate(spec, &config)?.terminal().clone())
}

/// Test statistic on a k-tuple of particle states.
pub type TupleStatistic<'a> = &'a (dyn Fn(&[(f64, f64)]) -> f64 + Sync);

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeResult {
    pub k: usize,
    /// Mean over trials of (coupled statistic - product-of-marginals statistic).
    pub gap: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub trials: usize,
}

/// Time-averaged `φ` over disjoint k-tuples within one run.
fn coupled_statistic(run: &PathRecorder, k: usize, phi: TupleStatistic<'_>) -> f64 {
    shifted_mean(run.snapshots().iter().map(|s| {
        let tuples = s.len() / k;
        shifted_mean((0..tuples).map(|m| {
            let tuple: Vec<(f64, f64)> = (m * k..(m + 1) * k).map(|i| (s.x1()[i], s.x2()[i])).collect();
            phi(&tuple)
        }))
    }))
}

/// Time-averaged `φ` over tuples drawn one particle from each of `k` independent runs.
fn product_statistic(runs: &[&PathRecorder], phi: TupleStatistic<'_>) -> f64 {
    let steps = runs[0].snapshots().len();
    shifted_mean((0..steps).map(|t| {
        let n = runs.iter().map(|r| r.snapshots()[t].len()).min().unwrap_or(0);
        shifted_mean((0..n).map(|m| {
            let tuple: Vec<(f64, f64)> = runs
                .iter()
                .map(|r| {
                    let s = &r.snapshots()[t];
                    (s.x1()[m], s.x2()[m])
                })
                .collect();
            phi(&tuple)
        }))
    }))
}

/// Gap between the k-particle statistic of coupled runs and the same statistic on
/// tuples assembled from independent runs, with a percentile bootstrap CI over trials.
///
/// Trial `r` pairs `coupled[r]` with `independent[r..r+k]` (cyclically).
pub fn pairwise_independence_probe(
    coupled: &[PathRecorder],
    independent: &[PathRecorder],
    k: usize,
    phi: TupleStatistic<'_>,
    resamples: usize,
    seed: u64,
) -> Result<ProbeResult> {
    if k < 2 {
        return Err(Error::config("k", "need k >= 2"));
    }
    if coupled.is_empty() || independent.len() < k {
        return Err(Error::Input(format!(
            "need at least one coupled run and {k} independent runs, got {} and {}",
            coupled.len(),
            independent.len()
        )));
    }
    let steps = coupled[0].snapshots().len();
    if coupled.iter().chain(independent).any(|r| r.snapshots().len() != steps) {
        return Err(Error::Input("runs record different numbers of snapshots".into()));
    }
    if coupled.iter().any(|r| r.snapshots().iter().any(|s| s.len() < k)) {
        return Err(Error::Input(format!("coupled runs need at least {k} particles")));
    }
    let gaps: Vec<f64> = coupled
        .iter()
        .enumerate()
        .map(|(r, run)| {
            let group: Vec<&PathRecorder> = (0..k).map(|j| &independent[(r + j) % independent.len()]).collect();
            coupled_statistic(run, k, phi) - product_statistic(&group, phi)
        })
        .collect();
    let gap = shifted_mean(gaps.iter().copied());
    let (ci_low, ci_high) = bootstrap_ci(&gaps, resamples, seed);
    Ok(ProbeResult {
        k,
        gap,
        ci_low,
        ci_high,
        trials: gaps.len(),
    })
}

/// 95% percentile bootstrap interval of the mean.
pub fn bootstrap_ci(values: &[f64], resamples: usize, seed: u64) -> (f64, f64) {
    if values.len() < 2 || resamples == 0 {
        let m = shifted_mean(values.iter().copied());
        return (m, m);
    }
    let mut rng = StreamKey::new(seed, Domain::Auxiliary).rng(u64::MAX, 0);
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| shifted_mean((0..n).map(|_| values[(rng.next_u64() % n as u64) as usize])))
        .collect();
    means.sort_by(f64::total_cmp);
    let at = |q: f64| means[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    (at(0.025), at(0.975))
}

/// Seeded standard normal sample.
pub fn gaussian_sample(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = StreamKey::new(seed, Domain::Auxiliary).rng(0, 0);
    (0..n).map(|_| standard_normal(&mut rng)).collect()
}

/// Report of one diagnostics run. Contains no wall-clock data.
#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct DiagnosticsReport {
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub repricing: Vec<RepricingRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chaos: Option<ChaosTable>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub oracle_gaps: Vec<OracleGap>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeResult>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl DiagnosticsReport {
    pub fn write_json<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer_pretty(writer, self)?;
        Ok(())
    }

    /// `report.json` plus one CSV per non-empty table.
    pub fn write_all(&self, dir: &Path) -> Result<Vec<String>> {
        let mut written = vec!["report.json".to_string()];
        let mut json = std::fs::File::create(dir.join("report.json"))?;
        self.write_json(&mut json)?;
        json.write_all(b"\n")?;
        if !self.repricing.is_empty() {
            write_rows(&dir.join("repricing.csv"), &self.repricing)?;
            written.push("repricing.csv".into());
        }
        if let Some(chaos) = &self.chaos {
            write_rows(&dir.join("chaos.csv"), &chaos.rows)?;
            written.push("chaos.csv".into());
        }
        if !self.oracle_gaps.is_empty() {
            write_rows(&dir.join("oracle.csv"), &self.oracle_gaps)?;
            written.push("oracle.csv".into());
        }
        Ok(written)
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{simulate_local_vol_reference, InitialLaw};
    use crate::market::{bs_call_price, BsParams, LocalVolSurface};
    use proptest::prelude::*;

    #[test]
    fn wasserstein_basics() {
        let a = gaussian_sample(1000, 1);
        assert_eq!(wasserstein_1d(&a, &a, 1.0).unwrap(), 0.0);
        assert_eq!(wasserstein_1d(&[0.3], &[-1.2], 1.0).unwrap(), 1.5);
        assert_eq!(wasserstein_1d(&[0.3], &[-1.2], 2.5).unwrap(), 1.5);
        for e in [1.0, 2.0, 3.0] {
            let shifted: Vec<f64> = a.iter().map(|x| x + 0.75).collect();
            assert!((wasserstein_1d(&a, &shifted, e).unwrap() - 0.75).abs() < 1e-12);
        }
        let reversed: Vec<f64> = a.iter().rev().copied().collect();
        assert_eq!(wasserstein_1d(&a, &reversed, 1.0).unwrap(), 0.0);
        assert!(wasserstein_1d(&[], &a, 1.0).is_err());
        assert!(wasserstein_1d(&a, &a, 0.5).is_err());
    }

    #[test]
    fn unequal_sizes_use_quantiles() {
        let a = gaussian_sample(2000, 2);
        let b = gaussian_sample(3000, 3);
        let shifted: Vec<f64> = b.iter().map(|x| x + 0.5).collect();
        let d0 = wasserstein_1d(&a, &b, 1.0).unwrap();
        let d1 = wasserstein_1d(&a, &shifted, 1.0).unwrap();
        assert!(d0 < 0.1);
        assert!((d1 - 0.5).abs() <= d0 + 1e-12);
    }

    proptest! {
        #[test]
        fn metric_axioms(seed in 0u64..1000, n in 1usize..60, e in 1.0..3.0f64) {
            let a = gaussian_sample(n, seed);
            let b: Vec<f64> = gaussian_sample(n, seed + 1).iter().map(|x| 2.0 * x).collect();
            let c: Vec<f64> = gaussian_sample(n, seed + 2).iter().map(|x| x + 1.0).collect();
            let ab = wasserstein_1d(&a, &b, e).unwrap();
            prop_assert_eq!(ab, wasserstein_1d(&b, &a, e).unwrap());
            prop_assert!(ab <= wasserstein_1d(&a, &c, e).unwrap() + wasserstein_1d(&c, &b, e).unwrap() + 1e-12);
            prop_assert!(ab > 0.0);
        }
    }

    #[test]
    fn sliced_distance() {
        let law = InitialLaw {
            x_std: 0.3,
            ..InitialLaw::default()
        };
        let a = crate::engine::sample_initial(&law, 2000, 1).unwrap();
        assert_eq!(sliced_wasserstein(&a, &a, SLICED_PROJECTIONS, 4).unwrap(), 0.0);
        let b = crate::engine::sample_initial(&law, 2000, 2).unwrap();
        let d = sliced_wasserstein(&a, &b, SLICED_PROJECTIONS, 4).unwrap();
        assert!(d > 0.0 && d < 0.05);
        assert_eq!(d, sliced_wasserstein(&a, &b, SLICED_PROJECTIONS, 4).unwrap());
    }

    fn reference(n: usize, seed: u64) -> PathRecorder {
        simulate_local_vol_reference(
            &LocalVolSurface::flat(0.2).unwrap(),
            &InitialLaw::default(),
            &SimConfig::new(n, 50, 1.0, seed),
        )
        .unwrap()
    }

    #[test]
    fn repricing_limits() {
        let n = 100_000;
        let run = reference(n, 3);
        let atm = bs_call_price(&BsParams::new(1.0, 0.2, 1.0, 1.0).unwrap());
        let rows = reprice_calls(&run, &[0.0, 1.0, 100.0], 50, &[1.0, atm, 0.0]).unwrap();
        assert!(rows[0].z_score.abs() <= 3.0, "{:?}", rows[0]);
        assert!(rows[1].z_score.abs() <= 3.0, "{:?}", rows[1]);
        assert!(rows[2].price <= 1e-8);
        assert!(rows.iter().all(|r| r.z_score.is_finite() && r.maturity == 1.0));
        assert!(reprice_calls(&run, &[1.0], 7, &[atm]).is_err());
        assert!(reprice_calls(&run, &[], 50, &[]).is_err());
    }

    #[test]
    fn stderr_scales_with_sample_size() {
        let small = reprice_calls(&reference(10_000, 5), &[1.0], 50, &[0.0]).unwrap()[0].stderr;
        let large = reprice_calls(&reference(40_000, 5), &[1.0], 50, &[0.0]).unwrap()[0].stderr;
        assert!((small / large / 2.0 - 1.0).abs() <= 0.2);
    }

    #[test]
    fn line_fit() {
        let x = [1.0, 2.0, 3.0];
        let fit = fit_line(&x, &[1.0, -1.0, -3.0]).unwrap();
        assert!((fit.slope + 2.0).abs() < 1e-14 && (fit.intercept - 3.0).abs() < 1e-14);
        assert!(fit_line(&[1.0], &[1.0]).is_none());
    }

    #[test]
    fn probe_constant_statistic_is_exact() {
        let runs: Vec<PathRecorder> = (0..4).map(|s| reference(101, s)).collect();
        let phi = |_: &[(f64, f64)]| 0.3;
        let r = pairwise_independence_probe(&runs[..2], &runs[2..], 2, &phi, 100, 1).unwrap();
        assert_eq!(r.gap, 0.0);
        assert_eq!((r.ci_low, r.ci_high), (0.0, 0.0));
        assert!(pairwise_independence_probe(&runs[..2], &runs[2..3], 2, &phi, 100, 1).is_err());
    }

    #[test]
    fn bootstrap_interval_covers_mean() {
        let v = gaussian_sample(200, 9);
        let (lo, hi) = bootstrap_ci(&v, 500, 2);
        let m = v.iter().sum::<f64>() / 200.0;
        assert!(lo < m && m < hi);
        assert!(hi - lo < 0.5);
        assert_eq!(bootstrap_ci(&v, 500, 2), (lo, hi));
    }

    #[test]
    fn chaos_preconditions() {
        let spec = LsvModelSpec::new(
            std::sync::Arc::new(LocalVolSurface::flat(0.2).unwrap()),
            std::sync::Arc::new(crate::coefficients::ClipExpField::new(0.5, 2.0).unwrap()),
            crate::coefficients::VolFactorDynamics::tanh_reverting(1.0, 0.4).unwrap(),
            -0.5,
            0.5,
            InitialLaw::default(),
        )
        .unwrap();
        let base = SimConfig::new(10, 5, 0.1, 1);
        assert!(chaos_study(&spec, &base, &[200, 100], 800, 1, 1.0).is_err());
        assert!(chaos_study(&spec, &base, &[100, 200], 700, 1, 1.0).is_err());
        let single = chaos_study(&spec, &base, &[100], 400, 1, 1.0).unwrap();
        assert!(single.fit.is_none());
        assert_eq!(single.rows.len(), 1);
        let json = serde_json::to_string(&single).unwrap();
        assert!(!json.contains("fit"));
        assert_eq!(single, chaos_study(&spec, &base, &[100], 400, 1, 1.0).unwrap());
    }
}
