use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::initial::synthesize;
use super::output::write_outputs;
use crate::energy::{energy_report, monitor_apriori, AprioriSummary, Audit, AuditReport, EnergyReport, AUDIT_TOL};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::integrator::{advance, StepControl, Termination};
use crate::model::{validate_state, ModelParams, PerturbationState};
use crate::par::{self, Execution};

/// Process exit status of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitStatus {
    Clean,
    GuardViolation,
    StepFailure,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        match self {
            ExitStatus::Clean => 0,
            ExitStatus::GuardViolation => 2,
            ExitStatus::StepFailure => 3,
        }
    }

    fn of(termination: &Termination, guard_violations: usize) -> Self {
        match termination {
            Termination::Completed if guard_violations == 0 => ExitStatus::Clean,
            Termination::Completed | Termination::GuardViolation { .. } => ExitStatus::GuardViolation,
            Termination::StepFailure { .. } | Termination::MaxSteps { .. } => ExitStatus::StepFailure,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LyapunovSummary {
    pub alpha: f64,
    pub initial: f64,
    #[serde(rename = "final")]
    pub last: f64,
    /// `L(t_end) / L(0)`
    pub ratio: f64,
    /// Largest `L(t_{i+1}) / L(t_i)` over consecutive samples.
    pub max_step_ratio: f64,
}

/// Everything recorded about one run; serialised as `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub config: RunConfig,
    pub exit_status: ExitStatus,
    pub exit_code: i32,
    pub termination: Termination,
    pub steps: usize,
    pub t_final: f64,
    pub guard_violations: usize,
    pub rows: usize,
    pub dt_min: Option<f64>,
    pub dt_max: Option<f64>,
    /// `None` when the series is empty or `E(0) = 0`; the reason is in
    /// `apriori_error`.
    pub apriori: Option<AprioriSummary>,
    pub apriori_error: Option<String>,
    pub lyapunov: Option<LyapunovSummary>,
    pub cum_dissipation_monotone: bool,
    pub initial_audits: Vec<AuditReport>,
    pub final_audits: Vec<AuditReport>,
    /// Samples or audits that could not be evaluated.
    pub monitor_errors: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub series: Vec<EnergyReport>,
    pub summary: Summary,
    pub final_state: PerturbationState,
    pub params: ModelParams,
}

impl RunOutcome {
    pub fn exit_status(&self) -> ExitStatus {
        self.summary.exit_status
    }
}

fn run_audits(
    audits: &[Audit],
    state: &PerturbationState,
    params: &ModelParams,
    errors: &mut Vec<String>,
) -> Vec<AuditReport> {
    if !validate_state(state, params).admissible {
        if !audits.is_empty() {
            errors.push(format!("audits skipped at t = {}: state inadmissible", state.t));
        }
        return Vec::new();
    }
    audits
        .iter()
        .filter_map(|a| match a.run(state, params, AUDIT_TOL) {
            Ok(r) => Some(r),
            Err(e) => {
                errors.push(format!("audit {} at t = {}: {e}", a.name(), state.t));
                None
            }
        })
        .collect()
}

/// Run the configured experiment in memory.
///
/// The initial state is synthesised without an admissibility check so that
/// oversized data end as a guard violation rather than an error.
pub fn simulate(config: &RunConfig) -> Result<RunOutcome> {
    config.validate()?;
    let grid = config.build_grid()?;
    simulate_on(config, &grid)
}

fn simulate_on(config: &RunConfig, grid: &Grid) -> Result<RunOutcome> {
    let params = config.params;
    let ic = &config.ic;
    let alpha = config.monitor.alpha;
    let initial = synthesize(grid, ic.preset, ic.amplitude, config.kmax(), ic.seed)?;
    let mut monitor_errors = Vec::new();
    let initial_audits = run_audits(&config.monitor.audits, &initial, &params, &mut monitor_errors);

    let mut series: Vec<EnergyReport> = Vec::new();
    let mut sample = |state: &PerturbationState, errors: &mut Vec<String>| {
        if series.last().is_some_and(|r| r.t >= state.t) {
            return;
        }
        match energy_report(state, &params, alpha, series.last()) {
            Ok(r) => series.push(r),
            Err(e) => errors.push(format!("sample at t = {}: {e}", state.t)),
        }
    };
    sample(&initial, &mut monitor_errors);
    let control: StepControl = config.step_control();
    let mut observer_errors = Vec::new();
    let run = advance(initial, &params, &control, config.monitor.stride, |state, step| {
        if step > 0 {
            sample(state, &mut observer_errors);
        }
    })?;
    monitor_errors.extend(observer_errors);

    let final_audits = if matches!(run.termination, Termination::Completed) {
        run_audits(&config.monitor.audits, &run.state, &params, &mut monitor_errors)
    } else {
        Vec::new()
    };
    let (apriori, apriori_error) = match monitor_apriori(&series) {
        Ok(s) => (Some(s), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let lyapunov = match (series.first(), series.last()) {
        (Some(first), Some(last)) if first.lyapunov > 0.0 => Some(LyapunovSummary {
            alpha,
            initial: first.lyapunov,
            last: last.lyapunov,
            ratio: last.lyapunov / first.lyapunov,
            max_step_ratio: series
                .windows(2)
                .map(|w| w[1].lyapunov / w[0].lyapunov)
                .fold(f64::NEG_INFINITY, f64::max),
        }),
        _ => None,
    };
    let exit_status = ExitStatus::of(&run.termination, run.guard_violations);
    let dts = run.log.iter().map(|r| r.dt);
    let summary = Summary {
        schema_version: super::config::SCHEMA_VERSION,
        config: config.clone(),
        exit_status,
        exit_code: exit_status.code(),
        termination: run.termination.clone(),
        steps: run.log.len(),
        t_final: run.state.t,
        guard_violations: run.guard_violations,
        rows: series.len(),
        dt_min: dts.clone().reduce(f64::min),
        dt_max: dts.reduce(f64::max),
        apriori,
        apriori_error,
        lyapunov,
        cum_dissipation_monotone: series.windows(2).all(|w| w[1].cum_dissipation >= w[0].cum_dissipation),
        initial_audits,
        final_audits,
        monitor_errors,
    };
    Ok(RunOutcome {
        series,
        summary,
        final_state: run.state,
        params,
    })
}

/// [`simulate`] followed by [`write_outputs`] into `config.output.dir`.
/// Guard violations and step failures still write every output.
pub fn run_experiment(config: &RunConfig) -> Result<RunOutcome> {
    let outcome = simulate(config)?;
    write_outputs(&outcome, config)?;
    Ok(outcome)
}

/// Audits on the synthesised initial condition, without time stepping.
pub fn audit_initial_condition(config: &RunConfig) -> Result<Vec<AuditReport>> {
    config.validate()?;
    let grid = config.build_grid()?;
    let state = super::initial::make_initial_condition(config, &grid, &config.params)?;
    config
        .monitor
        .audits
        .iter()
        .map(|a| a.run(&state, &config.params, AUDIT_TOL))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub amplitude: f64,
    pub observed_c: Option<f64>,
    pub max_energy_ratio: Option<f64>,
    pub bounds_failed: bool,
    pub exit_status: ExitStatus,
    pub completed: bool,
    pub t_final: f64,
    pub dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Pairs of completed rows `(i, j)`, `i < j`, with
    /// `observed_c[j] < observed_c[i] − 1e-9`.
    pub trend_violations: Vec<(usize, usize)>,
}

/// One run per amplitude (shared seed), each writing into its own
/// subdirectory `delta_<index>` of `config.output.dir`. Runs execute
/// concurrently; guard violations are recorded, not raised.
pub fn sweep_amplitude(config: &RunConfig, amplitudes: &[f64], exec: Execution) -> Result<SweepTable> {
    config.validate()?;
    if amplitudes.is_empty() {
        return Err(Error::Config("amplitude list is empty".into()));
    }
    if amplitudes.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::Config("amplitudes must be ascending".into()));
    }
    let jobs: Vec<(usize, RunConfig)> = amplitudes
        .iter()
        .enumerate()
        .map(|(i, &amp)| {
            let mut c = config.clone();
            c.ic.amplitude = amp;
            c.output.dir = config.output.dir.join(format!("delta_{i:03}"));
            (i, c)
        })
        .collect();
    for (_, c) in &jobs {
        c.validate()?;
    }
    let results = par::map(exec, jobs, |(_, c)| run_experiment(&c).map(|o| (c, o)));
    let mut rows = Vec::with_capacity(amplitudes.len());
    for r in results {
        let (c, outcome) = r?;
        let s = &outcome.summary;
        rows.push(SweepRow {
            amplitude: c.ic.amplitude,
            observed_c: s.apriori.as_ref().map(|a| a.observed_c),
            max_energy_ratio: s.apriori.as_ref().map(|a| a.max_energy_ratio),
            bounds_failed: s.guard_violations > 0,
            exit_status: s.exit_status,
            completed: matches!(s.termination, Termination::Completed),
            t_final: s.t_final,
            dir: c.output.dir,
        });
    }
    let mut trend_violations = Vec::new();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            if let (true, true, Some(ci), Some(cj)) = (
                rows[i].completed,
                rows[j].completed,
                rows[i].observed_c,
                rows[j].observed_c,
            ) {
                if cj < ci - 1e-9 {
                    trend_violations.push((i, j));
                }
            }
        }
    }
    let table = SweepTable { rows, trend_violations };
    super::output::write_sweep(&table, &config.output.dir)?;
    Ok(table)
}

/// `‖x − y‖` in `L²` over all unknowns.
pub fn state_distance(x: &PerturbationState, y: &PerturbationState) -> Result<f64> {
    if x.grid != y.grid {
        return Err(Error::Config("states live on different grids".into()));
    }
    let mut total = 0.0;
    for (f, g) in x.fields().into_iter().zip(y.fields()) {
        let d = f.axpy(-1.0, g);
        total += x.grid.integrate(&d.mul(&d))?;
    }
    Ok(total.sqrt())
}

/// Observed order `ln(‖y₁−y₂‖/‖y₂−y₃‖)/ln r` for solutions computed with steps
/// `dt, dt/r, dt/r²`.
pub fn richardson_order(
    coarse: &PerturbationState,
    mid: &PerturbationState,
    fine: &PerturbationState,
    ratio: f64,
) -> Result<f64> {
    let d12 = state_distance(coarse, mid)?;
    let d23 = state_distance(mid, fine)?;
    if !(d12 > 0.0 && d23 > 0.0) {
        return Err(Error::Degenerate(format!("successive differences {d12:e}, {d23:e}")));
    }
    Ok((d12 / d23).ln() / ratio.ln())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DtRefinement {
    pub dts: Vec<f64>,
    /// `‖y_i − y_{i+1}‖`
    pub differences: Vec<f64>,
    /// Order from each consecutive triple.
    pub orders: Vec<f64>,
}

/// Advance `state` to `t_end` with each fixed step in `dts` (a geometric
/// sequence, at least three entries) and estimate the temporal order.
pub fn dt_refinement(
    state: &PerturbationState,
    params: &ModelParams,
    t_end: f64,
    dts: &[f64],
    exec: Execution,
) -> Result<DtRefinement> {
    if dts.len() < 3 {
        return Err(Error::Config(format!(
            "need at least three time steps, got {}",
            dts.len()
        )));
    }
    let ratio = dts[0] / dts[1];
    if !(ratio > 1.0) || dts.windows(2).any(|w| ((w[0] / w[1]) / ratio - 1.0).abs() > 1e-9) {
        return Err(Error::Config("time steps must decrease by a constant ratio".into()));
    }
    let finals = par::map(exec, dts.to_vec(), |dt| {
        let control = StepControl::new(t_end).with_dt(dt);
        let run = advance(state.clone(), params, &control, usize::MAX, |_, _| {})?;
        match run.termination {
            Termination::Completed => Ok(run.state),
            other => Err(Error::Degenerate(format!("dt = {dt}: run ended with {other:?}"))),
        }
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let differences = finals
        .windows(2)
        .map(|w| state_distance(&w[0], &w[1]))
        .collect::<Result<Vec<_>>>()?;
    let orders = finals
        .windows(3)
        .map(|w| richardson_order(&w[0], &w[1], &w[2], ratio))
        .collect::<Result<Vec<_>>>()?;
    Ok(DtRefinement {
        dts: dts.to_vec(),
        differences,
        orders,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolutionRow {
    pub n: usize,
    pub audits: Vec<AuditReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementTable {
    pub resolutions: Vec<ResolutionRow>,
    pub time: Option<DtRefinement>,
}

/// Audit residuals of the configured initial condition at each resolution,
/// and the temporal order of the configured run over `dts`.
pub fn refinement_study(
    config: &RunConfig,
    resolutions: &[usize],
    dts: &[f64],
    exec: Execution,
) -> Result<RefinementTable> {
    config.validate()?;
    if resolutions.len() < 3 && dts.len() < 3 {
        return Err(Error::Config(
            "need at least three resolutions or three time steps".into(),
        ));
    }
    if !resolutions.is_empty() && resolutions.len() < 3 {
        return Err(Error::Config(format!(
            "need at least three resolutions, got {}",
            resolutions.len()
        )));
    }
    if !dts.is_empty() && dts.len() < 3 {
        return Err(Error::Config(format!(
            "need at least three time steps, got {}",
            dts.len()
        )));
    }
    let params = config.params;
    let mut rows = Vec::new();
    for &n in resolutions {
        let mut c = config.clone();
        c.grid.n = n;
        c.validate()?;
        let grid = c.build_grid()?.with_execution(exec);
        let state = super::initial::make_initial_condition(&c, &grid, &params)?;
        let audits = Audit::ALL
            .iter()
            .map(|a| a.run(&state, &params, AUDIT_TOL))
            .collect::<Result<_>>()?;
        rows.push(ResolutionRow { n, audits });
    }
    let time = if dts.is_empty() {
        None
    } else {
        let grid = config.build_grid()?.with_execution(exec);
        let state = super::initial::make_initial_condition(config, &grid, &params)?;
        Some(dt_refinement(&state, &params, config.time.t_end, dts, exec)?)
    };
    let table = RefinementTable {
        resolutions: rows,
        time,
    };
    super::output::write_json(&config.output.dir, "refinement.json", &table)?;
    Ok(table)
}
