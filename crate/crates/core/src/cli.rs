//! Subcommands of the `mkvlsv` binary.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::coefficients::{check_ellipticity, ValidationGrid};
use crate::config::{
    load, CalibrationConfig, ChaosConfig, DupireConfig, FactorCase, FpOracleConfig, HeatCase, ModelConfig,
    SimulateConfig, SnapshotFormat,
};
use crate::diagnostics::{chaos_study, reprice_calls, DiagnosticsReport};
use crate::engine::{simulate, write_snapshot_binary, write_snapshot_csv, InitialLaw, RecordSchedule, SimConfig};
use crate::error::{Error, Result};
use crate::fp::{compare_factor_marginal, factor_marginal, heat_kernel_check_on, OracleGap};
use crate::kernel::{silverman, KernelSpec};
use crate::market::{dupire_local_vol, CallSurface, LocalVolSurface};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "MKVLSV_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Dupire,
    CalibrationCheck,
    ChaosStudy,
    FpOracle,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Dupire => "dupire",
            Command::CalibrationCheck => "calibration-check",
            Command::ChaosStudy => "chaos-study",
            Command::FpOracle => "fp-oracle",
        }
    }
}

/// Exit status for a failed run: 2 for rejected input, 3 for runtime failures.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_validation() {
        2
    } else {
        3
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OutputFile {
    pub path: String,
    pub sha256: String,
}

/// Wall-clock details; everything outside this section is reproducible.
#[derive(Debug, Clone, Serialize)]
pub struct ManifestMetadata {
    pub started_at: String,
    pub wall_seconds: f64,
    pub workers: Option<usize>,
    pub version: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub command: &'static str,
    pub config: Value,
    pub summary: BTreeMap<String, Value>,
    pub outputs: Vec<OutputFile>,
    pub metadata: ManifestMetadata,
}

/// Combines the configured worker count with the environment cap.
pub fn effective_workers(configured: Option<usize>, env: Option<&str>) -> Result<Option<usize>> {
    let cap = match env {
        None => None,
        Some(raw) => match raw.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Some(n),
            _ => return Err(Error::config(THREADS_ENV, format!("expected a positive integer, got {raw:?}"))),
        },
    };
    Ok(match (configured, cap) {
        (Some(w), Some(c)) => Some(w.min(c)),
        (w, c) => w.or(c),
    })
}

fn apply_workers(sim: &mut SimConfig) -> Result<()> {
    let env = std::env::var(THREADS_ENV).ok();
    sim.workers = effective_workers(sim.workers, env.as_deref())?;
    Ok(())
}

fn load_config<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.is_file() {
        return Err(Error::config("--config", format!("cannot read {}", path.display())));
    }
    load(path)
}

struct Outputs {
    dir: PathBuf,
    files: Vec<OutputFile>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
        let path = self.dir.join(name);
        let mut w = BufWriter::new(File::create(&path)?);
        f(&mut w)?;
        w.flush()?;
        drop(w);
        self.record(name)
    }

    fn record(&mut self, name: &str) -> Result<()> {
        let bytes = std::fs::read(self.dir.join(name))?;
        self.files.push(OutputFile {
            path: name.to_string(),
            sha256: format!("{:x}", Sha256::digest(&bytes)),
        });
        Ok(())
    }
}

/// Runs `command` and writes its artifacts plus `manifest.json` into `out_dir`.
pub fn run(command: Command, config_path: &Path, out_dir: &Path) -> Result<Manifest> {
    let started = Instant::now();
    let started_at = chrono::Utc::now().to_rfc3339();
    let base = config_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let (config, summary, outputs, workers) = match command {
        Command::Simulate => cmd_simulate(load_config(config_path)?, &base, out_dir)?,
        Command::Dupire => cmd_dupire(load_config(config_path)?, &base, out_dir)?,
        Command::CalibrationCheck => cmd_calibration_check(load_config(config_path)?, &base, out_dir)?,
        Command::ChaosStudy => cmd_chaos_study(load_config(config_path)?, &base, out_dir)?,
        Command::FpOracle => cmd_fp_oracle(load_config(config_path)?, out_dir)?,
    };
    let manifest = Manifest {
        command: command.name(),
        config,
        summary,
        outputs: outputs.files,
        metadata: ManifestMetadata {
            started_at,
            wall_seconds: started.elapsed().as_secs_f64(),
            workers,
            version: env!("CARGO_PKG_VERSION"),
        },
    };
    let mut file = BufWriter::new(File::create(out_dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(&mut file, &manifest)?;
    file.write_all(b"\n")?;
    file.flush()?;
    Ok(manifest)
}

type CommandOutput = (Value, BTreeMap<String, Value>, Outputs, Option<usize>);

fn model_summary(model: &ModelConfig, spec: &crate::coefficients::LsvModelSpec, horizon: f64) -> Result<BTreeMap<String, Value>> {
    let bounds = check_ellipticity(spec, &ValidationGrid::standard(horizon, model.initial.log_spot()))?;
    let lv = spec.local_vol();
    let mut s = BTreeMap::new();
    s.insert("ellipticity_m".into(), json!(bounds.m));
    s.insert("ellipticity_M".into(), json!(bounds.big_m));
    s.insert("local_vol_clamp_activations".into(), json!(lv.clamp_activations()));
    s.insert("local_vol_degenerate_nodes".into(), json!(lv.degenerate_nodes()));
    s.insert("correlation".into(), json!(model.correlation));
    s.insert("floor".into(), json!(model.floor));
    Ok(s)
}

fn run_summary(s: &mut BTreeMap<String, Value>, sim: &SimConfig, bandwidths: &[f64]) {
    s.insert("seed".into(), json!(sim.seed));
    s.insert("particles".into(), json!(sim.particles));
    s.insert("steps".into(), json!(sim.steps));
    s.insert("horizon".into(), json!(sim.horizon));
    s.insert("delta".into(), serde_json::to_value(sim.bandwidth).unwrap_or(Value::Null));
    if let (Some(first), Some(last)) = (bandwidths.first(), bandwidths.last()) {
        s.insert("delta_first_step".into(), json!(first));
        s.insert("delta_last_step".into(), json!(last));
    }
}

fn echo<T: Serialize>(config: &T) -> Value {
    serde_json::to_value(config).unwrap_or(Value::Null)
}

fn cmd_simulate(mut config: SimulateConfig, base: &Path, out_dir: &Path) -> Result<CommandOutput> {
    apply_workers(&mut config.simulation)?;
    config.simulation.validate()?;
    let spec = config.model.build(base)?;
    let mut summary = model_summary(&config.model, &spec, config.simulation.horizon)?;
    let recorder = simulate(&spec, &config.simulation)?;
    let mut outputs = Outputs::new(out_dir)?;
    for snapshot in recorder.snapshots() {
        let stem = format!("snapshot_step{:06}", snapshot.step());
        if matches!(config.snapshot_format, SnapshotFormat::Csv | SnapshotFormat::Both) {
            outputs.write(&format!("{stem}.csv"), |w| write_snapshot_csv(snapshot, w))?;
        }
        if matches!(config.snapshot_format, SnapshotFormat::Binary | SnapshotFormat::Both) {
            outputs.write(&format!("{stem}.bin"), |w| write_snapshot_binary(snapshot, w))?;
        }
    }
    run_summary(&mut summary, &config.simulation, recorder.bandwidths());
    let workers = config.simulation.workers.take();
    Ok((echo(&config), summary, outputs, workers))
}

fn cmd_dupire(config: DupireConfig, base: &Path, out_dir: &Path) -> Result<CommandOutput> {
    let surface = CallSurface::read_csv_path(config.spot, &crate::config::resolve(base, &config.prices_csv))?;
    let lv: LocalVolSurface = dupire_local_vol(&surface, config.clamp)?;
    let mut outputs = Outputs::new(out_dir)?;
    outputs.write("local_vol.csv", |w| lv.write_csv(w))?;
    let (lo, hi) = lv.value_range();
    let mut summary = BTreeMap::new();
    summary.insert("maturities".into(), json!(lv.maturities().len()));
    summary.insert("strikes".into(), json!(lv.strikes().len()));
    summary.insert("clamp_activations".into(), json!(lv.clamp_activations()));
    summary.insert("degenerate_nodes".into(), json!(lv.degenerate_nodes()));
    summary.insert("min_local_vol".into(), json!(lo));
    summary.insert("max_local_vol".into(), json!(hi));
    Ok((echo(&config), summary, outputs, None))
}

fn cmd_calibration_check(mut config: CalibrationConfig, base: &Path, out_dir: &Path) -> Result<CommandOutput> {
    if config.strikes.is_empty() {
        return Err(Error::config("strikes", "strike list is empty"));
    }
    if let Some(k) = config.strikes.iter().find(|k| !(**k > 0.0) || !k.is_finite()) {
        return Err(Error::config("strikes", format!("strikes must be positive, got {k}")));
    }
    apply_workers(&mut config.simulation)?;
    config.simulation.record = RecordSchedule::Endpoints;
    config.simulation.validate()?;
    let spec = config.model.build(base)?;
    let targets = config.target_prices(base, config.simulation.horizon)?;
    let mut summary = model_summary(&config.model, &spec, config.simulation.horizon)?;
    let recorder = simulate(&spec, &config.simulation)?;
    let rows = reprice_calls(&recorder, &config.strikes, config.simulation.steps, &targets)?;
    let max_z = rows.iter().map(|r| r.z_score.abs()).fold(0.0, f64::max);
    let max_err = rows.iter().map(|r| (r.price - r.target).abs()).fold(0.0, f64::max);
    run_summary(&mut summary, &config.simulation, recorder.bandwidths());
    summary.insert("max_abs_z".into(), json!(max_z));
    summary.insert("max_abs_price_error".into(), json!(max_err));
    let report = DiagnosticsReport {
        repricing: rows,
        metadata: summary.clone(),
        ..Default::default()
    };
    let mut outputs = Outputs::new(out_dir)?;
    for name in report.write_all(out_dir)? {
        outputs.record(&name)?;
    }
    let workers = config.simulation.workers.take();
    Ok((echo(&config), summary, outputs, workers))
}

fn cmd_chaos_study(mut config: ChaosConfig, base: &Path, out_dir: &Path) -> Result<CommandOutput> {
    apply_workers(&mut config.simulation)?;
    let mut check = config.simulation.clone();
    check.particles = config.particles.first().copied().unwrap_or(0);
    check.validate()?;
    let spec = config.model.build(base)?;
    let mut summary = model_summary(&config.model, &spec, config.simulation.horizon)?;
    let table = chaos_study(
        &spec,
        &config.simulation,
        &config.particles,
        config.reference_particles,
        config.trials,
        config.order,
    )?;
    summary.insert("seed".into(), json!(config.simulation.seed));
    summary.insert("order".into(), json!(config.order));
    summary.insert("reference_particles".into(), json!(config.reference_particles));
    summary.insert("trials".into(), json!(config.trials));
    if let Some(fit) = table.fit {
        summary.insert("slope".into(), json!(fit.slope));
    }
    let report = DiagnosticsReport {
        chaos: Some(table),
        metadata: summary.clone(),
        ..Default::default()
    };
    let mut outputs = Outputs::new(out_dir)?;
    for name in report.write_all(out_dir)? {
        outputs.record(&name)?;
    }
    let workers = config.simulation.workers.take();
    Ok((echo(&config), summary, outputs, workers))
}

/// Particle factor marginal against the 1D oracle.
pub fn factor_case_gap(case: &FactorCase, workers: Option<usize>) -> Result<OracleGap> {
    let initial = InitialLaw {
        y_mean: case.y_mean,
        y_std: case.y_std,
        ..InitialLaw::default()
    };
    let model = ModelConfig {
        local_vol: crate::config::LocalVolSource::Flat(0.2),
        v: Default::default(),
        factor: case.factor,
        correlation: 0.0,
        floor: 1.0,
        initial,
    };
    let spec = model.build(Path::new("."))?;
    let mut sim = SimConfig::new(case.particles, case.steps, case.horizon, case.seed);
    sim.workers = workers;
    let recorder = simulate(&spec, &sim)?;
    let terminal = recorder.terminal();
    let oracle = factor_marginal(spec.dynamics(), case.y_mean, case.y_std, case.horizon, case.points, case.dtau)?;
    let kernel = KernelSpec::gaussian(silverman(terminal.x2())?.value)?;
    let l1 = compare_factor_marginal(terminal, &kernel, &oracle)?;
    Ok(OracleGap {
        case: "factor_marginal".into(),
        l1,
        tolerance: case.tolerance,
        initial_mass: 1.0,
        final_mass: oracle.mass(),
        boundary_mass: oracle.boundary_mass(crate::fp::BOUNDARY_BAND),
    })
}

fn cmd_fp_oracle(config: FpOracleConfig, out_dir: &Path) -> Result<CommandOutput> {
    if config.heat_kernel.is_none() && config.factor_marginal.is_none() {
        return Err(Error::config("fp-oracle", "configure at least one of heat_kernel, factor_marginal"));
    }
    let workers = effective_workers(None, std::env::var(THREADS_ENV).ok().as_deref())?;
    let mut outputs = Outputs::new(out_dir)?;
    let mut gaps = Vec::new();
    if let Some(case) = config.heat_kernel {
        let HeatCase {
            points,
            horizon,
            s0,
            steps,
            half_width,
        } = case;
        let (gap, density) = heat_kernel_check_on(points, horizon, s0, steps, half_width)?;
        outputs.write("heat_density.csv", |w| density.write_csv(w))?;
        gaps.push(gap);
    }
    if let Some(case) = &config.factor_marginal {
        gaps.push(factor_case_gap(case, workers)?);
    }
    let mut summary = BTreeMap::new();
    for gap in &gaps {
        summary.insert(format!("{}_l1", gap.case), json!(gap.l1));
        summary.insert(format!("{}_mass_change", gap.case), json!(gap.final_mass - gap.initial_mass));
        summary.insert(format!("{}_passed", gap.case), json!(gap.passed()));
    }
    let report = DiagnosticsReport {
        oracle_gaps: gaps,
        metadata: summary.clone(),
        ..Default::default()
    };
    for name in report.write_all(out_dir)? {
        outputs.record(&name)?;
    }
    Ok((echo(&config), summary, outputs, workers))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worker_cap() {
        assert_eq!(effective_workers(None, None).unwrap(), None);
        assert_eq!(effective_workers(Some(8), Some("4")).unwrap(), Some(4));
        assert_eq!(effective_workers(Some(2), Some("4")).unwrap(), Some(2));
        assert_eq!(effective_workers(None, Some("3")).unwrap(), Some(3));
        assert!(effective_workers(None, Some("0")).is_err());
        assert!(effective_workers(None, Some("many")).is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::config("x", "y")), 2);
        assert_eq!(
            exit_code(&Error::DomainTooSmall {
                boundary_mass: 1.0,
                limit: 1e-4
            }),
            3
        );
    }
}
