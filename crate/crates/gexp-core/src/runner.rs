//! Experiment dispatch: a validated config in, a report (plus optional
//! CSV side files) out.
//!
//! The CLI binary and the C ABI both run through [`run`], so a config
//! produces the same report no matter the entry point. Per-path CSV rows
//! are emitted in path order from per-path-seeded streams, which makes
//! the files byte-identical across worker counts.

use std::path::PathBuf;
use std::time::Instant;

use serde::Serialize;
use serde_json::Value;

use crate::config::{ExperimentKind, RunConfig};
use crate::error::{GexpError, Result};
use crate::expectation::{g_expectation, RecursionDiagnostics};
use crate::gheat::solve_gheat;
use crate::girsanov::{novikov_check, verify_girsanov, NovikovVerdict, WeightedExpectationSpec};
use crate::model::{ControlPolicy, CylinderFunctional, PathBundle};
use crate::montecarlo::{
    capacity, per_path_values, simulate_law, upper_expectation_battery, BundleParams,
    ControlFamily, PathEvent, UpperExpectation,
};
use crate::report::{csv_file, csv_quote, write_grid_csv, Report, RunMetadata};
use crate::stochcalc::{girsanov_transform, Integrand};
use std::io::Write;

/// Flag-level options the config file does not carry.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides the config's seed; the report hash covers the effective
    /// value.
    pub seed: Option<u64>,
    /// Overrides the config's path count.
    pub paths: Option<usize>,
    /// Base path for CSV side files (the report path works well); `None`
    /// disables dumping.
    pub dump_base: Option<PathBuf>,
}

/// What a run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    /// The complete report, envelope included, ready to serialize.
    pub report: Value,
    /// Mirror of the envelope's `pass` field: false means the experiment
    /// ran to completion but its own acceptance checks failed.
    pub pass: bool,
    /// CSV side files written.
    pub csv_files: Vec<PathBuf>,
}

/// Runs one experiment end to end. Every random stream derives from the
/// effective seed, which is logged together with the config hash so any
/// reported number can be reproduced.
pub fn run(mut config: RunConfig, opts: &RunOptions) -> Result<RunOutcome> {
    if let Some(seed) = opts.seed {
        log::info!("seed override: {} -> {seed}", config.seed);
        config.seed = seed;
    }
    if let Some(paths) = opts.paths {
        match config.paths {
            Some(old) => log::info!("paths override: {old} -> {paths}"),
            None => log::info!("paths set from the command line: {paths}"),
        }
        config.paths = Some(paths);
    }
    config.validate()?;
    let config_sha256 = config.sha256();
    log::info!(
        "running `{}` with seed {} (config sha256 {config_sha256})",
        config.experiment,
        config.seed
    );

    let start = Instant::now();
    let mut sink = CsvSink {
        base: opts.dump_base.clone(),
        files: Vec::new(),
    };
    let (results, pass) = dispatch(&config, &mut sink)?;
    let meta = RunMetadata {
        tool: format!("gexp {}", env!("CARGO_PKG_VERSION")),
        experiment: config.experiment,
        config_sha256,
        seed: config.seed,
        threads: rayon::current_num_threads(),
        runtime_seconds: start.elapsed().as_secs_f64(),
        pass,
    };
    Ok(RunOutcome {
        report: serde_json::to_value(Report { meta, results })?,
        pass,
        csv_files: sink.files,
    })
}

fn dispatch(config: &RunConfig, sink: &mut CsvSink) -> Result<(Value, bool)> {
    match config.experiment {
        ExperimentKind::Gheat => run_gheat(config, sink),
        ExperimentKind::Expect => run_expect(config, sink),
        ExperimentKind::Mc => run_mc(config, sink),
        ExperimentKind::Capacity => run_capacity(config, sink),
        ExperimentKind::Girsanov => run_girsanov(config, sink),
        ExperimentKind::Novikov => run_novikov(config, sink),
    }
}

// ---------------------------------------------------------------------------
// CSV side files
// ---------------------------------------------------------------------------

struct CsvSink {
    base: Option<PathBuf>,
    files: Vec<PathBuf>,
}

impl CsvSink {
    fn enabled(&self) -> bool {
        self.base.is_some()
    }

    /// Derives `<base stem>.<suffix>.csv` next to the base path.
    fn path(&mut self, suffix: &str) -> PathBuf {
        let base = self.base.as_ref().expect("caller checked enabled()");
        let stem = base
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "report".to_string());
        let path = base.with_file_name(format!("{stem}.{suffix}.csv"));
        self.files.push(path.clone());
        path
    }
}

/// Path dumps replay each policy's walk outside the estimator, so they are
/// only offered where the replay provably matches: deterministic-schedule
/// policies. State-fed policies (feedback, table-guided) see different
/// states in the plain and the transformed sweeps.
fn require_deterministic_schedules(family: &ControlFamily, what: &str) -> Result<()> {
    for p in family.policies() {
        if !matches!(p, ControlPolicy::Deterministic { .. }) {
            return Err(GexpError::Config(format!(
                "{what} path dumps need deterministic-schedule policies, but `{}` is \
                 state-fed; rerun without --dump-paths or with a schedule-only family",
                p.label()
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// gheat
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct GheatRow {
    label: String,
    time: f64,
    value_at_origin: f64,
    n_nodes: usize,
    half_width: f64,
    dt: f64,
}

fn run_gheat(config: &RunConfig, sink: &mut CsvSink) -> Result<(Value, bool)> {
    let theta = config.build_theta()?;
    let battery = config.build_battery(&theta)?;
    let params = config.plan(theta.dim()).solver_params();
    let mut rows = Vec::with_capacity(battery.len());
    for (i, f) in battery.iter().enumerate() {
        let t = f.times()[0];
        let grid = params.resolve_grid(&theta, t)?;
        let dt = params.dt(&theta, &grid);
        let u = solve_gheat(&theta, f, &grid, t, dt)?;
        if sink.enabled() {
            write_grid_csv(&sink.path(&format!("slice{i}")), &u)?;
        }
        rows.push(GheatRow {
            label: f.label().to_string(),
            time: t,
            value_at_origin: u.at_origin(),
            n_nodes: grid.n_nodes(),
            half_width: grid.half_width(),
            dt,
        });
    }
    Ok((serde_json::to_value(rows)?, true))
}

// ---------------------------------------------------------------------------
// expect
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct ExpectRow {
    label: String,
    value: f64,
    diagnostics: RecursionDiagnostics,
}

fn run_expect(config: &RunConfig, sink: &mut CsvSink) -> Result<(Value, bool)> {
    if sink.enabled() {
        return Err(GexpError::Config(
            "experiment `expect` has no bulk data to dump; drop --dump-paths".to_string(),
        ));
    }
    let theta = config.build_theta()?;
    let battery = config.build_battery(&theta)?;
    let plan = config.plan(theta.dim());
    let mut rows = Vec::with_capacity(battery.len());
    for f in &battery {
        let r = g_expectation(&theta, f, &plan)?;
        rows.push(ExpectRow {
            label: f.label().to_string(),
            value: r.value,
            diagnostics: r.diagnostics,
        });
    }
    Ok((serde_json::to_value(rows)?, true))
}

// ---------------------------------------------------------------------------
// mc
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct McRow {
    label: String,
    #[serde(flatten)]
    upper: UpperExpectation,
}

fn run_mc(config: &RunConfig, sink: &mut CsvSink) -> Result<(Value, bool)> {
    let theta = config.build_theta()?;
    let grid = config.build_grid()?;
    let battery = config.build_battery(&theta)?;
    let family = config.build_family(&theta, &grid, &battery)?;
    let params = BundleParams::new(grid, theta.dim(), config.build_paths()?, config.seed)?;
    let uppers = upper_expectation_battery(&family, &battery, &params)?;
    if sink.enabled() {
        dump_mc_paths(sink, &family, &battery, &params)?;
    }
    let rows: Vec<McRow> = battery
        .iter()
        .zip(uppers)
        .map(|(f, upper)| McRow {
            label: f.label().to_string(),
            upper,
        })
        .collect();
    Ok((serde_json::to_value(rows)?, true))
}

/// One long-format CSV: a row per (policy, functional, path). The values
/// are exactly the estimator's per-path inputs: the plain estimator feeds
/// policies the controlled path itself, and so does [`simulate_law`].
fn dump_mc_paths(
    sink: &mut CsvSink,
    family: &ControlFamily,
    battery: &[CylinderFunctional],
    params: &BundleParams,
) -> Result<()> {
    let mut w = csv_file(&sink.path("paths"), "policy,functional,path,value")?;
    for policy in family.policies() {
        let bundle = simulate_law(policy, params)?;
        let pl = csv_quote(policy.label()).into_owned();
        for f in battery {
            let values = per_path_values(f, &bundle)?;
            let fl = csv_quote(f.label()).into_owned();
            for (m, v) in values.iter().enumerate() {
                writeln!(w, "{pl},{fl},{m},{v}")?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// capacity
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct CapacityResults {
    event: PathEvent,
    capacity: UpperExpectation,
}

fn run_capacity(config: &RunConfig, sink: &mut CsvSink) -> Result<(Value, bool)> {
    let theta = config.build_theta()?;
    let grid = config.build_grid()?;
    let family = config.build_family(&theta, &grid, &[])?;
    let event = config.build_event()?;
    let params = BundleParams::new(grid, theta.dim(), config.build_paths()?, config.seed)?;
    let cap = capacity(&family, &event, &params)?;
    if sink.enabled() {
        dump_capacity_paths(sink, &family, &event, &params)?;
    }
    Ok((
        serde_json::to_value(CapacityResults {
            event,
            capacity: cap,
        })?,
        true,
    ))
}

fn event_hit(event: &PathEvent, bundle: &PathBundle, m: usize) -> bool {
    let n = bundle.grid().n_steps();
    let over = |coord: usize, f: &dyn Fn(f64) -> bool| -> bool {
        (0..=n).any(|k| f(bundle.point(m, k)[coord]))
    };
    match *event {
        PathEvent::WholeSpace => true,
        PathEvent::Empty => false,
        PathEvent::FinalAbove { coord, level } => bundle.point(m, n)[coord] > level,
        PathEvent::FinalBelow { coord, level } => bundle.point(m, n)[coord] < level,
        PathEvent::RunningMaxAbove { coord, level } => over(coord, &|x| x > level),
        PathEvent::RunningMinBelow { coord, level } => over(coord, &|x| x < level),
    }
}

fn dump_capacity_paths(
    sink: &mut CsvSink,
    family: &ControlFamily,
    event: &PathEvent,
    params: &BundleParams,
) -> Result<()> {
    let mut w = csv_file(&sink.path("paths"), "policy,path,hit")?;
    for policy in family.policies() {
        let bundle = simulate_law(policy, params)?;
        let pl = csv_quote(policy.label()).into_owned();
        for m in 0..params.n_paths {
            writeln!(w, "{pl},{m},{}", u8::from(event_hit(event, &bundle, m)))?;
        }
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// girsanov
// ---------------------------------------------------------------------------

fn run_girsanov(config: &RunConfig, sink: &mut CsvSink) -> Result<(Value, bool)> {
    let theta = config.build_theta()?;
    let grid = config.build_grid()?;
    let battery = config.build_battery(&theta)?;
    let family = config.build_family(&theta, &grid, &battery)?;
    let params = BundleParams::new(grid, theta.dim(), config.build_paths()?, config.seed)?;
    let integrand = config.build_integrand(theta.dim())?;
    let plan = config.plan(theta.dim());
    let spec = WeightedExpectationSpec {
        theta,
        integrand,
        family,
        battery,
        params,
    };
    let report = verify_girsanov(
        &spec,
        config.epsilon_or_default(),
        config.tolerances.pde,
        Some(&plan),
    )?;
    let pass = report.overall_pass;
    if sink.enabled() {
        dump_transform_paths(sink, &spec.family, &spec.integrand, &spec.params)?;
    }
    Ok((serde_json::to_value(report)?, pass))
}

/// Per-path terminal state of the measure change under each policy:
/// log-density and recentred endpoint.
fn dump_transform_paths(
    sink: &mut CsvSink,
    family: &ControlFamily,
    integrand: &Integrand,
    params: &BundleParams,
) -> Result<()> {
    require_deterministic_schedules(family, "girsanov")?;
    let d = params.dim;
    let n = params.grid.n_steps();
    let header = match d {
        1 => "policy,path,log_density,b_hat_1",
        _ => "policy,path,log_density,b_hat_1,b_hat_2",
    };
    let mut w = csv_file(&sink.path("paths"), header)?;
    for policy in family.policies() {
        let bundle = simulate_law(policy, params)?;
        let transform = girsanov_transform(integrand, &bundle)?;
        let pl = csv_quote(policy.label()).into_owned();
        for m in 0..params.n_paths {
            write!(w, "{pl},{m},{}", transform.log_density(m, n))?;
            for &x in transform.b_hat(m, n) {
                write!(w, ",{x}")?;
            }
            writeln!(w)?;
        }
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// novikov
// ---------------------------------------------------------------------------

fn run_novikov(config: &RunConfig, sink: &mut CsvSink) -> Result<(Value, bool)> {
    let theta = config.build_theta()?;
    let grid = config.build_grid()?;
    let family = config.build_family(&theta, &grid, &[])?;
    let params = BundleParams::new(grid, theta.dim(), config.build_paths()?, config.seed)?;
    let integrand = config.build_integrand(theta.dim())?;
    let epsilon = config.epsilon_or_default();
    let report = novikov_check(&theta, &integrand, epsilon, &family, &params)?;
    let pass = report.verdict == NovikovVerdict::SatisfiedAtDeskScale;
    if sink.enabled() {
        dump_novikov_paths(sink, &family, &integrand, epsilon, &params)?;
    }
    Ok((serde_json::to_value(report)?, pass))
}

/// Per-path realized quadratic form and the exponent of the moment being
/// checked, ½(1+ε)·∫h·(d⟨B⟩h), kept in log scale so the file stays finite
/// even when the moment itself overflows.
fn dump_novikov_paths(
    sink: &mut CsvSink,
    family: &ControlFamily,
    integrand: &Integrand,
    epsilon: f64,
    params: &BundleParams,
) -> Result<()> {
    require_deterministic_schedules(family, "novikov")?;
    let c = 0.5 * (1.0 + epsilon);
    let n = params.grid.n_steps();
    let mut w = csv_file(&sink.path("paths"), "policy,path,qv_form,log_moment")?;
    for policy in family.policies() {
        let bundle = simulate_law(policy, params)?;
        let transform = girsanov_transform(integrand, &bundle)?;
        let pl = csv_quote(policy.label()).into_owned();
        for m in 0..params.n_paths {
            let qv = transform.qv_form(m, n);
            writeln!(w, "{pl},{m},{qv},{}", c * qv)?;
        }
    }
    w.flush()?;
    Ok(())
}
