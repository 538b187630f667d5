//! Classical four-stage Runge–Kutta stepping with stability-derived step size
//! and admissibility guards evaluated at every stage.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    compute_rhs, rhs_unguarded, validate_state, AdmissibilityReport, ModelParams, PerturbationState, Tendency,
};

/// Extent of the RK4 stability region on the negative real axis.
pub const RK4_REAL_BOUND: f64 = 2.785;
/// Extent of the RK4 stability region on the imaginary axis (rounded down).
pub const RK4_IMAG_BOUND: f64 = 2.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GuardMode {
    #[default]
    Abort,
    Report,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepControl {
    pub dt: Option<f64>,
    pub safety: f64,
    pub t_end: f64,
    pub max_steps: usize,
    pub guard_mode: GuardMode,
}

impl StepControl {
    pub fn new(t_end: f64) -> Self {
        Self {
            dt: None,
            safety: 0.9,
            t_end,
            max_steps: 1_000_000,
            guard_mode: GuardMode::Abort,
        }
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = Some(dt);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(Error::Config(format!(
                "time.t_end must be positive, got {}",
                self.t_end
            )));
        }
        if !(self.safety > 0.0 && self.safety <= 1.0) {
            return Err(Error::Config(format!(
                "time.safety must lie in (0, 1], got {}",
                self.safety
            )));
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(Error::Config(format!("time.dt must be positive, got {dt}")));
            }
        }
        if self.max_steps == 0 {
            return Err(Error::Config("time.max_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Stability bound for explicit RK4 without the safety factor.
///
/// Diffusive limit `2.785/(ν_max |κ|²_max)` with `ν_max = 2/min ρ` (the
/// momentum operator `(Δu + ∇div u)/ρ` reaches `2|κ|²/ρ` on longitudinal
/// modes) and advective limit `2.8/(sup|u|·|κ|_max)`; `|κ|_max` is the largest
/// retained wavevector magnitude.
pub fn stability_bound(state: &PerturbationState, params: &ModelParams) -> f64 {
    let kmax = state.grid.max_retained_wavenumber();
    let rho_min = state.a.min() + params.rho_bar;
    let nu_max = 2.0 / rho_min;
    let diffusive = RK4_REAL_BOUND / (nu_max * kmax * kmax);
    let speed = (0..state.grid.len())
        .map(|p| state.u.iter().map(|u| u.values[p].powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let advective = RK4_IMAG_BOUND / (speed * kmax + 1e-30);
    diffusive.min(advective)
}

/// `safety · stability_bound` for an admissible state.
pub fn stable_dt(state: &PerturbationState, params: &ModelParams, control: &StepControl) -> Result<f64> {
    let report = validate_state(state, params);
    if !report.admissible {
        return Err(Error::Inadmissible(Box::new(report)));
    }
    Ok(control.safety * stability_bound(state, params))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepFailure {
    /// A stage state left the admissibility window.
    Guard { stage: usize, report: AdmissibilityReport },
    /// A stage produced non-finite or otherwise unusable values.
    Numerical { stage: usize, message: String },
}

fn rhs(
    state: &PerturbationState,
    params: &ModelParams,
    guard: GuardMode,
    stage: usize,
) -> std::result::Result<Tendency, StepFailure> {
    let result = match guard {
        GuardMode::Abort => compute_rhs(state, params),
        GuardMode::Report => rhs_unguarded(state, params),
    };
    result.map_err(|e| match e {
        Error::Inadmissible(report) => StepFailure::Guard { stage, report: *report },
        other => StepFailure::Numerical {
            stage,
            message: other.to_string(),
        },
    })
}

fn rk4(
    state: &PerturbationState,
    dt: f64,
    params: &ModelParams,
    guard: GuardMode,
) -> std::result::Result<PerturbationState, StepFailure> {
    let k1 = rhs(state, params, guard, 1)?;
    let k2 = rhs(&state.advanced(&k1, 0.5 * dt), params, guard, 2)?;
    let k3 = rhs(&state.advanced(&k2, 0.5 * dt), params, guard, 3)?;
    let k4 = rhs(&state.advanced(&k3, dt), params, guard, 4)?;
    let incr = Tendency::combine(&[(&k1, 1.0), (&k2, 2.0), (&k3, 2.0), (&k4, 1.0)]);
    let mut next = state.advanced(&incr, dt / 6.0);
    next.t = state.t + dt;
    if !next.all_finite() {
        return Err(StepFailure::Numerical {
            stage: 4,
            message: "non-finite state after update".into(),
        });
    }
    Ok(next)
}

/// One classical RK4 step; every stage must be admissible.
pub fn rk4_step(
    state: &PerturbationState,
    dt: f64,
    params: &ModelParams,
) -> std::result::Result<PerturbationState, StepFailure> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(StepFailure::Numerical {
            stage: 0,
            message: format!("step size must be positive, got {dt}"),
        });
    }
    rk4(state, dt, params, GuardMode::Abort)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Time at the end of the step.
    pub t: f64,
    pub dt: f64,
    /// Stability bound (without safety) at the start of the step.
    pub dt_bound: f64,
    pub guard_ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Termination {
    Completed,
    GuardViolation {
        t: f64,
        step: usize,
        stage: usize,
        report: AdmissibilityReport,
    },
    StepFailure {
        t: f64,
        step: usize,
        stage: usize,
        message: String,
    },
    MaxSteps {
        steps: usize,
    },
}

#[derive(Clone, Debug)]
pub struct Advance {
    /// Last state reached (the initial state if nothing was accepted).
    pub state: PerturbationState,
    pub log: Vec<StepRecord>,
    pub termination: Termination,
    /// Guard violations recorded in report mode.
    pub guard_violations: usize,
}

/// Step from `state` to `control.t_end`.
///
/// `observer` sees the initial state, every `stride`-th accepted state and the
/// final state. The last step is shortened to land exactly on `t_end`.
pub fn advance(
    state: PerturbationState,
    params: &ModelParams,
    control: &StepControl,
    stride: usize,
    mut observer: impl FnMut(&PerturbationState, usize),
) -> Result<Advance> {
    control.validate()?;
    params.validate()?;
    if stride == 0 {
        return Err(Error::Config("monitor.stride must be at least 1".into()));
    }

    let mut state = state;
    let mut log = Vec::new();
    let mut guard_violations = 0;
    let initial = validate_state(&state, params);
    if !initial.admissible {
        if control.guard_mode == GuardMode::Abort || !initial.finite {
            return Ok(Advance {
                termination: Termination::GuardViolation {
                    t: state.t,
                    step: 0,
                    stage: 0,
                    report: initial,
                },
                state,
                log,
                guard_violations: 1,
            });
        }
        guard_violations += 1;
    }
    observer(&state, 0);

    let t_end = control.t_end;
    let mut step = 0;
    let mut last_observed = 0;
    let termination = loop {
        if state.t >= t_end {
            break Termination::Completed;
        }
        if step >= control.max_steps {
            break Termination::MaxSteps { steps: step };
        }
        let bound = stability_bound(&state, params);
        let mut dt = control.dt.unwrap_or(control.safety * bound);
        let remaining = t_end - state.t;
        let last = remaining <= dt * (1.0 + 1e-9);
        if last {
            dt = remaining;
        }
        match rk4(&state, dt, params, control.guard_mode) {
            Ok(mut next) => {
                step += 1;
                if last {
                    next.t = t_end;
                }
                let report = validate_state(&next, params);
                if !report.admissible {
                    if control.guard_mode == GuardMode::Abort {
                        let t = next.t;
                        state = next;
                        log.push(StepRecord {
                            step,
                            t,
                            dt,
                            dt_bound: bound,
                            guard_ok: false,
                        });
                        break Termination::GuardViolation {
                            t,
                            step,
                            stage: 0,
                            report,
                        };
                    }
                    guard_violations += 1;
                }
                log.push(StepRecord {
                    step,
                    t: next.t,
                    dt,
                    dt_bound: bound,
                    guard_ok: report.admissible,
                });
                state = next;
                if step % stride == 0 || state.t >= t_end {
                    observer(&state, step);
                    last_observed = step;
                }
            }
            Err(StepFailure::Guard { stage, report }) => {
                break Termination::GuardViolation {
                    t: state.t,
                    step: step + 1,
                    stage,
                    report,
                };
            }
            Err(StepFailure::Numerical { stage, message }) => {
                break Termination::StepFailure {
                    t: state.t,
                    step: step + 1,
                    stage,
                    message,
                };
            }
        }
    };
    if last_observed != step && state.all_finite() {
        observer(&state, step);
    }
    Ok(Advance {
        state,
        log,
        termination,
        guard_violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use std::f64::consts::PI;

    #[test]
    fn stable_dt_formula() {
        let g = Grid::new(1, 32, 2.0 * PI).unwrap();
        let p = ModelParams::default();
        let s = PerturbationState::equilibrium(&g);
        let c = StepControl::new(1.0);
        let dt = stable_dt(&s, &p, &c).unwrap();
        // |κ|_max = 10, ν_max = 2: 0.9·2.785/(2·100)
        assert!((dt - 0.9 * 2.785 / 200.0).abs() < 1e-15);

        let g2 = Grid::new(1, 64, 2.0 * PI).unwrap();
        let dt2 = stable_dt(&PerturbationState::equilibrium(&g2), &p, &c).unwrap();
        assert!((dt2 / dt - (10.0f64 / 21.0).powi(2)).abs() < 1e-14);
    }

    #[test]
    fn stable_dt_is_stable_for_the_fastest_mode() {
        // The stiffest linear mode is longitudinal velocity at |κ|_max with
        // eigenvalue −2|κ|²/ρ; RK4's stability polynomial must stay ≤ 1 there.
        let g = Grid::new(2, 32, 2.0 * PI).unwrap();
        let p = ModelParams::default();
        let dt = stable_dt(&PerturbationState::equilibrium(&g), &p, &StepControl::new(1.0)).unwrap();
        let kmax = g.max_retained_wavenumber();
        let z = -2.0 * kmax * kmax / p.rho_bar * dt;
        let r = 1.0 + z + z * z / 2.0 + z.powi(3) / 6.0 + z.powi(4) / 24.0;
        assert!(r.abs() <= 1.0, "z = {z}, R = {r}");
    }

    #[test]
    fn advective_limit_is_inactive_without_flow() {
        let g = Grid::new(2, 16, 2.0 * PI).unwrap();
        let p = ModelParams::default();
        let s = PerturbationState::equilibrium(&g);
        let k = g.max_retained_wavenumber();
        assert!((stability_bound(&s, &p) - 2.785 / (2.0 * k * k)).abs() < 1e-15);

        let mut fast = s.clone();
        fast.u[0] = g.constant(50.0);
        assert!((stability_bound(&fast, &p) - 2.8 / (50.0 * k)).abs() < 1e-12);
    }

    #[test]
    fn stable_dt_rejects_inadmissible() {
        let g = Grid::new(1, 16, 2.0 * PI).unwrap();
        let mut s = PerturbationState::equilibrium(&g);
        s.m = g.constant(2.0);
        assert!(stable_dt(&s, &ModelParams::default(), &StepControl::new(1.0)).is_err());
    }

    #[test]
    fn control_validation() {
        let mut c = StepControl::new(1.0);
        assert!(c.validate().is_ok());
        c.safety = 1.5;
        assert!(c.validate().is_err());
        c = StepControl::new(0.0);
        assert!(c.validate().is_err());
        c = StepControl::new(1.0).with_dt(-0.1);
        assert!(c.validate().is_err());
    }

    #[test]
    fn equilibrium_step_is_exact() {
        let g = Grid::new(2, 16, 2.0 * PI).unwrap();
        let p = ModelParams::default();
        let s = PerturbationState::equilibrium(&g);
        let next = rk4_step(&s, 0.37, &p).unwrap();
        assert_eq!(next.sup_deviation(), 0.0);
        assert_eq!(next.t, 0.37);
        assert!(rk4_step(&s, 0.0, &p).is_err());
    }

    #[test]
    fn isolated_enthalpy_mode_follows_the_stability_polynomial() {
        // With only h = cos x every coupling vanishes and h_t = Δh/ρ̄ = −h, so
        // one step multiplies the mode by 1 + z + z²/2 + z³/6 + z⁴/24, z = −0.1.
        let g = Grid::new(1, 16, 2.0 * PI).unwrap();
        let p = ModelParams::default();
        let mut s = PerturbationState::equilibrium(&g);
        s.h = g.field_from_fn(|x| x[0].cos());
        let next = rk4_step(&s, 0.1, &p).unwrap();
        let factor = 1.0 - 0.1 + 0.005 - 0.1f64.powi(3) / 6.0 + 0.1f64.powi(4) / 24.0;
        let err = next.h.zip_map(&s.h, |x, y| x - factor * y).sup_abs();
        assert!(err < 1e-15, "{err:e}");
        assert!((factor - 0.904_837_5).abs() < 1e-15);
        for f in [&next.a, &next.u[0], &next.m, &next.eps] {
            assert_eq!(f.sup_abs(), 0.0);
        }
    }

    #[test]
    fn fixed_dt_step_count_and_observers() {
        let g = Grid::new(1, 8, 2.0 * PI).unwrap();
        let p = ModelParams::default();
        let control = StepControl::new(1.0).with_dt(0.25);
        let mut seen = Vec::new();
        let out = advance(PerturbationState::equilibrium(&g), &p, &control, 1, |s, _| {
            seen.push(s.t)
        })
        .unwrap();
        assert_eq!(out.log.len(), 4);
        assert_eq!(out.termination, Termination::Completed);
        assert_eq!(seen, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(out.state.t, 1.0);
    }

    #[test]
    fn last_step_is_clipped() {
        let g = Grid::new(1, 8, 2.0 * PI).unwrap();
        let p = ModelParams::default();
        let control = StepControl::new(1.0).with_dt(0.3);
        let mut seen = Vec::new();
        let out = advance(PerturbationState::equilibrium(&g), &p, &control, 2, |s, _| {
            seen.push(s.t)
        })
        .unwrap();
        assert_eq!(out.log.len(), 4);
        assert!((out.log[3].dt - 0.1).abs() < 1e-12);
        assert_eq!(out.state.t, 1.0);
        assert_eq!(seen.len(), 3);
        assert_eq!(*seen.last().unwrap(), 1.0);
    }

    #[test]
    fn inadmissible_start_aborts_immediately() {
        let g = Grid::new(1, 16, 2.0 * PI).unwrap();
        let p = ModelParams::default();
        let mut s = PerturbationState::equilibrium(&g);
        s.a = g.constant(-0.6);
        let mut calls = 0;
        let out = advance(s, &p, &StepControl::new(1.0), 1, |_, _| calls += 1).unwrap();
        assert_eq!(calls, 0);
        assert!(out.log.is_empty());
        match out.termination {
            Termination::GuardViolation { step, report, .. } => {
                assert_eq!(step, 0);
                assert!(!report.rho_ok);
                assert!((report.rho_min - 0.4).abs() < 1e-15);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn report_mode_continues_past_violations() {
        let g = Grid::new(1, 8, 2.0 * PI).unwrap();
        let p = ModelParams::default();
        let mut s = PerturbationState::equilibrium(&g);
        s.a = g.constant(-0.6);
        let mut control = StepControl::new(0.5).with_dt(0.25);
        control.guard_mode = GuardMode::Report;
        let out = advance(s, &p, &control, 1, |_, _| {}).unwrap();
        assert_eq!(out.termination, Termination::Completed);
        assert_eq!(out.guard_violations, 3);
        assert!(out.log.iter().all(|r| !r.guard_ok));
    }

    #[test]
    fn max_steps_is_reported() {
        let g = Grid::new(1, 8, 2.0 * PI).unwrap();
        let mut control = StepControl::new(1.0).with_dt(0.1);
        control.max_steps = 3;
        let out = advance(
            PerturbationState::equilibrium(&g),
            &ModelParams::default(),
            &control,
            1,
            |_, _| {},
        )
        .unwrap();
        assert_eq!(out.termination, Termination::MaxSteps { steps: 3 });
    }

    #[test]
    fn adaptive_steps_respect_the_bound() {
        let g = Grid::new(1, 16, 2.0 * PI).unwrap();
        let p = ModelParams::default();
        let mut s = PerturbationState::equilibrium(&g);
        s.u[0] = g.field_from_fn(|x| 1e-3 * x[0].sin());
        s.a = g.field_from_fn(|x| 1e-3 * x[0].cos());
        let out = advance(s, &p, &StepControl::new(0.2), 1, |_, _| {}).unwrap();
        assert_eq!(out.termination, Termination::Completed);
        for r in &out.log {
            assert!(r.dt <= 0.9 * r.dt_bound * (1.0 + 1e-12));
        }
    }

    /// `exp(M t) x` by Taylor series (the matrices here have norm ≈ 3).
    fn expm_apply(m: &[[f64; 4]; 4], t: f64, x: [f64; 4]) -> [f64; 4] {
        let mut term = x;
        let mut sum = x;
        for j in 1..60 {
            let mut next = [0.0; 4];
            for r in 0..4 {
                for c in 0..4 {
                    next[r] += m[r][c] * term[c] * t / j as f64;
                }
            }
            term = next;
            for r in 0..4 {
                sum[r] += term[r];
            }
        }
        sum
    }

    #[test]
    fn linear_mode_matches_matrix_exponential() {
        // a = A cos x, u = U sin x, h = H cos x, m = M cos x linearised about
        // ρ̄ = k̄ = 1:  A' = −U,  U' = −2U + (f' + 2/3)A + (2/3)M,
        // H' = −H − f'U,  M' = −M − (2/3)U.
        let g = Grid::new(1, 32, 2.0 * PI).unwrap();
        let p = ModelParams::default();
        let fp = p.potential_slope(1.0).unwrap();
        let m = [
            [0.0, -1.0, 0.0, 0.0],
            [fp + 2.0 / 3.0, -2.0, 0.0, 2.0 / 3.0],
            [0.0, -fp, -1.0, 0.0],
            [0.0, -2.0 / 3.0, 0.0, -1.0],
        ];
        let u0 = 1e-6;
        let mut s = PerturbationState::equilibrium(&g);
        s.u[0] = g.field_from_fn(|x| u0 * x[0].sin());
        let out = advance(s, &p, &StepControl::new(1.0).with_dt(1e-3), 100, |_, _| {}).unwrap();
        assert_eq!(out.termination, Termination::Completed);
        let [a, u, h, mm] = expm_apply(&m, 1.0, [0.0, u0, 0.0, 0.0]);
        let check = |field: &crate::grid::ScalarField, amp: f64, trig: fn(f64) -> f64| {
            let expect = g.field_from_fn(|x| amp * trig(x[0]));
            let err = field.zip_map(&expect, |x, y| x - y).sup_abs();
            // quadratic terms contribute O(u0²)
            assert!(err <= 1e-5 * u0, "{err:e}");
        };
        check(&out.state.a, a, f64::cos);
        check(&out.state.u[0], u, f64::sin);
        check(&out.state.h, h, f64::cos);
        check(&out.state.m, mm, f64::cos);
        assert!(out.state.eps.sup_abs() <= 1e-5 * u0);
        // the pure diffusion decay e^{−2} is not the answer
        assert!((u - u0 * (-2.0f64).exp()).abs() > 1e-2 * u0);
    }
}
