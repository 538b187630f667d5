//! Sobolev norms, the energy and dissipation functionals, the Lyapunov
//! functional with weight α, and numerical audits of the exact integral
//! identities behind the a priori estimates.
//!
//! `H^s` norms use the multiplier convention
//! `‖f‖²_{H^s} = length^dim · Σ_k (1+|κ|²)^s |f̂_k|²`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, ScalarField, SpectralField};
use crate::model::{compute_rhs, field_names, validate_state, Kinematics, ModelParams, PerturbationState};

/// Default weight of the third-order terms in the Lyapunov functional.
pub const DEFAULT_ALPHA: f64 = 0.01;
/// Default relative tolerance for identity audits.
pub const AUDIT_TOL: f64 = 1e-10;

fn weighted_sum(grid: &Grid, spec: &SpectralField, weight: impl Fn(f64) -> f64) -> f64 {
    grid.volume()
        * spec
            .coeffs
            .iter()
            .enumerate()
            .map(|(idx, c)| weight(grid.kappa_sq(idx)) * c.norm_sqr())
            .sum::<f64>()
}

fn check_order(s: u32) -> Result<()> {
    if s > 4 {
        return Err(Error::Config(format!("Sobolev order must be 0..=4, got {s}")));
    }
    Ok(())
}

/// `‖f‖²_{H^s}` for `0 ≤ s ≤ 4`.
pub fn sobolev_norm_sq(grid: &Grid, f: &ScalarField, s: u32) -> Result<f64> {
    check_order(s)?;
    let spec = grid.forward(f)?;
    Ok(weighted_sum(grid, &spec, |k2| (1.0 + k2).powi(s as i32)))
}

/// `‖∇f‖²_{H^s} = Σ_j ‖∂_j f‖²_{H^s}`.
pub fn gradient_norm_sq(grid: &Grid, f: &ScalarField, s: u32) -> Result<f64> {
    check_order(s)?;
    let spec = grid.forward(f)?;
    Ok(weighted_sum(grid, &spec, |k2| k2 * (1.0 + k2).powi(s as i32)))
}

/// `Σ_{l,m,n} ‖∂_{lmn} f‖²₂`.
fn third_derivative_norm_sq(grid: &Grid, f: &ScalarField) -> Result<f64> {
    let spec = grid.forward(f)?;
    Ok(weighted_sum(grid, &spec, |k2| k2 * k2 * k2))
}

/// Per-field `H³` contributions in storage order (`a, u1..ud, h, m, eps`).
pub fn energy_components(state: &PerturbationState) -> Result<Vec<f64>> {
    state
        .fields()
        .into_iter()
        .map(|f| sobolev_norm_sq(&state.grid, f, 3))
        .collect()
}

/// `E = ‖(a, u, h, m, ε)‖²_{H³}`.
pub fn theorem_energy(state: &PerturbationState) -> Result<f64> {
    Ok(energy_components(state)?.iter().sum())
}

/// `D = ‖∇a‖²_{H²} + ‖(∇u, ∇h, ∇m, ∇ε)‖²_{H³}`.
pub fn dissipation(state: &PerturbationState) -> Result<f64> {
    let g = &state.grid;
    let mut d = gradient_norm_sq(g, &state.a, 2)?;
    for f in state.fields().into_iter().skip(1) {
        d += gradient_norm_sq(g, f, 3)?;
    }
    Ok(d)
}

/// All `dim³` ordered triples `(l, m, n)`.
fn triples(dim: usize) -> Vec<[usize; 3]> {
    let mut out = Vec::with_capacity(dim.pow(3));
    for l in 0..dim {
        for m in 0..dim {
            for n in 0..dim {
                out.push([l, m, n]);
            }
        }
    }
    out
}

/// Lyapunov functional
///
/// ```text
/// L = ‖(u, h, ∇³h, m, ∇³m, ε, ∇³ε)‖²₂ + ∫F(a)
///   + α[‖∇³u‖²₂ + ∫ f'(ρ)/ρ · (∂_{lmn}a)²]
///   + ∫[½|∇a|² + ρ²/2 ∇a·u + ½|∂_{lmn}a|² + ρ²/2 ∂_{lmn}a ∂_{lm}u^n]
/// ```
///
/// with repeated indices summed over `1..=dim`.
pub fn lyapunov(state: &PerturbationState, params: &ModelParams, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
    }
    let report = validate_state(state, params);
    if !report.admissible {
        return Err(Error::Inadmissible(Box::new(report)));
    }
    lyapunov_unguarded(state, params, alpha)
}

pub(crate) fn lyapunov_unguarded(state: &PerturbationState, params: &ModelParams, alpha: f64) -> Result<f64> {
    let g = &state.grid;
    let dim = g.dim();
    let l2 = |f: &ScalarField| -> Result<f64> { g.integrate(&f.mul(f)) };

    let mut value = 0.0;
    for u in &state.u {
        value += l2(u)?;
    }
    for f in [&state.h, &state.m, &state.eps] {
        value += l2(f)? + third_derivative_norm_sq(g, f)?;
    }

    let mut potential = g.zeros();
    for (dst, &a) in potential.values.iter_mut().zip(&state.a.values) {
        *dst = params.density_potential(a)?;
    }
    value += g.integrate(&potential)?;

    let rho = state.rho(params);
    let spec_a = g.forward(&state.a)?;
    let spec_u: Vec<SpectralField> = state.u.iter().map(|u| g.forward(u)).collect::<Result<_>>()?;
    let grad_a: Vec<ScalarField> = (0..dim)
        .map(|j| g.inverse(&g.derivative_spectral(&spec_a, &g.unit_alpha(j))?))
        .collect::<Result<_>>()?;

    let mut third_u = 0.0;
    for u in &state.u {
        third_u += third_derivative_norm_sq(g, u)?;
    }
    let slope_weight = rho.map(|r| params.f_prime(r) / r);
    let rho_sq_half = rho.map(|r| 0.5 * r * r);

    let mut weighted_third_a = 0.0;
    let mut density_terms = g.zeros();
    for j in 0..dim {
        let cross = grad_a[j].mul(&state.u[j]).mul(&rho_sq_half);
        density_terms = density_terms.axpy(0.5, &grad_a[j].mul(&grad_a[j])).axpy(1.0, &cross);
    }
    for [l, m, n] in triples(dim) {
        let d3a = g.inverse(&g.derivative_spectral(&spec_a, &g.alpha_of(&[l, m, n]))?)?;
        let d2u = g.inverse(&g.derivative_spectral(&spec_u[n], &g.alpha_of(&[l, m]))?)?;
        let sq = d3a.mul(&d3a);
        weighted_third_a += g.integrate(&sq.mul(&slope_weight))?;
        density_terms = density_terms.axpy(0.5, &sq).axpy(1.0, &d3a.mul(&d2u).mul(&rho_sq_half));
    }
    value += alpha * (third_u + weighted_third_a);
    value += g.integrate(&density_terms)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("Lyapunov functional".into()));
    }
    Ok(value)
}

/// Sup norms of the fields and first derivatives bounded by the `H³` norm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupNorms {
    pub a: f64,
    pub a_t: f64,
    pub grad_a: f64,
    pub u: f64,
    pub grad_u: f64,
    pub h: f64,
    pub grad_h: f64,
    pub m: f64,
    pub grad_m: f64,
    pub eps: f64,
    pub grad_eps: f64,
}

fn sup_of(fields: &[ScalarField]) -> f64 {
    fields.iter().map(ScalarField::sup_abs).fold(0.0, f64::max)
}

pub fn sup_norms(state: &PerturbationState, params: &ModelParams) -> Result<SupNorms> {
    let g = &state.grid;
    let kin = Kinematics::new(state, params)?;
    // a_t from continuity, −(ρ div u + u·∇a)
    let a_t = ScalarField::new(
        (0..g.len())
            .map(|p| -(kin.rho.values[p] * kin.div_u.values[p] + Kinematics::advect(&state.u, &kin.grad_a, p)))
            .collect(),
    );
    let grad_u: Vec<ScalarField> = kin.du.iter().flatten().cloned().collect();
    Ok(SupNorms {
        a: state.a.sup_abs(),
        a_t: a_t.sup_abs(),
        grad_a: sup_of(&kin.grad_a),
        u: sup_of(&state.u),
        grad_u: sup_of(&grad_u),
        h: state.h.sup_abs(),
        grad_h: sup_of(&kin.grad_h),
        m: state.m.sup_abs(),
        grad_m: sup_of(&kin.grad_m),
        eps: state.eps.sup_abs(),
        grad_eps: sup_of(&kin.grad_eps),
    })
}

/// Snapshot of the monitored functionals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub t: f64,
    #[serde(rename = "E")]
    pub energy: f64,
    #[serde(rename = "D")]
    pub dissipation: f64,
    #[serde(rename = "cumD")]
    pub cum_dissipation: f64,
    #[serde(rename = "L_alpha")]
    pub lyapunov: f64,
    pub components: Vec<(String, f64)>,
    pub rho_min: f64,
    pub rho_max: f64,
    pub k_min: f64,
    pub k_max: f64,
    pub admissible: bool,
    pub sup: SupNorms,
}

/// Evaluate every functional at `state`; `cumD` continues `prev` by the
/// trapezoidal rule.
pub fn energy_report(
    state: &PerturbationState,
    params: &ModelParams,
    alpha: f64,
    prev: Option<&EnergyReport>,
) -> Result<EnergyReport> {
    let components = energy_components(state)?;
    let energy = components.iter().sum();
    let dissipation = dissipation(state)?;
    let cum_dissipation = match prev {
        Some(p) => p.cum_dissipation + 0.5 * (state.t - p.t) * (p.dissipation + dissipation),
        None => 0.0,
    };
    let adm = validate_state(state, params);
    Ok(EnergyReport {
        t: state.t,
        energy,
        dissipation,
        cum_dissipation,
        lyapunov: lyapunov_unguarded(state, params, alpha)?,
        components: field_names(state.dim()).into_iter().zip(components).collect(),
        rho_min: adm.rho_min,
        rho_max: adm.rho_max,
        k_min: adm.k_min,
        k_max: adm.k_max,
        admissible: adm.admissible,
        sup: sup_norms(state, params)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub name: String,
    pub left: f64,
    pub right: f64,
    pub residual: f64,
    pub scale: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl AuditReport {
    fn new(name: &str, left: f64, right: f64, scale: f64, tolerance: f64) -> Self {
        let residual = (left - right).abs();
        Self {
            name: name.to_string(),
            left,
            right,
            residual,
            scale,
            tolerance,
            pass: residual <= tolerance * scale,
        }
    }

    /// `residual / scale`
    pub fn relative(&self) -> f64 {
        self.residual / self.scale
    }
}

/// Identities that can be audited at a single state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Audit {
    /// `∫ ρ/2 ∇a·(Δu − ∇div u) = 0`
    SkewPressure,
    /// `∫ u·u_t` against its integrated-by-parts expansion.
    #[serde(rename = "l2_u")]
    L2Velocity,
    #[serde(rename = "l2_h")]
    L2Enthalpy,
    #[serde(rename = "l2_m")]
    L2Kinetic,
    #[serde(rename = "l2_eps")]
    L2Dissipation,
}

impl Audit {
    pub const ALL: [Audit; 5] = [
        Audit::SkewPressure,
        Audit::L2Velocity,
        Audit::L2Enthalpy,
        Audit::L2Kinetic,
        Audit::L2Dissipation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Audit::SkewPressure => "skew_pressure",
            Audit::L2Velocity => "l2_u",
            Audit::L2Enthalpy => "l2_h",
            Audit::L2Kinetic => "l2_m",
            Audit::L2Dissipation => "l2_eps",
        }
    }

    pub fn run(self, state: &PerturbationState, params: &ModelParams, tol: f64) -> Result<AuditReport> {
        match self {
            Audit::SkewPressure => audit_skew_pressure(state, params, tol),
            _ => audit_l2_balance(state, params, self, tol),
        }
    }
}

/// `∫ ρ/2 ∇a·(Δu − ∇div u) dx`, which vanishes identically; scale
/// `∫|∇a||Δu|`.
pub fn audit_skew_pressure(state: &PerturbationState, params: &ModelParams, tol: f64) -> Result<AuditReport> {
    let g = &state.grid;
    let kin = Kinematics::new(state, params)?;
    let dim = g.dim();
    let mut integrand = g.zeros();
    let mut scale_density = g.zeros();
    for p in 0..g.len() {
        let half_rho = 0.5 * kin.rho.values[p];
        let mut dot = 0.0;
        let mut lap_sq = 0.0;
        for i in 0..dim {
            let lap = kin.lap_u[i].values[p];
            dot += kin.grad_a[i].values[p] * (lap - kin.grad_div_u[i].values[p]);
            lap_sq += lap * lap;
        }
        integrand.values[p] = half_rho * dot;
        scale_density.values[p] = kin.grad_a_sq(p).sqrt() * lap_sq.sqrt();
    }
    let left = g.integrate(&integrand)?;
    let scale = g.integrate(&scale_density)? + 1e-30;
    Ok(AuditReport::new(Audit::SkewPressure.name(), left, 0.0, scale, tol))
}

/// `∫ w·w_t` with `w_t` from the right-hand side, against the expanded
/// energy balance in which the diffusion terms have been integrated by parts
/// (the `1/ρ` weight stays inside the integrals).
pub fn audit_l2_balance(
    state: &PerturbationState,
    params: &ModelParams,
    which: Audit,
    tol: f64,
) -> Result<AuditReport> {
    let g = &state.grid;
    let dim = g.dim();
    let len = g.len();
    let tendency = compute_rhs(state, params)?;
    let kin = Kinematics::new(state, params)?;
    let rho = &kin.rho.values;
    let kk = &kin.k.values;
    let integral =
        |f: &dyn Fn(usize) -> f64| -> Result<f64> { g.integrate(&ScalarField::new((0..len).map(f).collect())) };
    let dot = |x: &[ScalarField], y: &[ScalarField], p: usize| -> f64 {
        x.iter().zip(y).map(|(a, b)| a.values[p] * b.values[p]).sum()
    };

    let (left, right) = match which {
        Audit::SkewPressure => return audit_skew_pressure(state, params, tol),
        Audit::L2Velocity => {
            let left = integral(&|p| {
                state
                    .u
                    .iter()
                    .zip(&tendency.u)
                    .map(|(u, ut)| u.values[p] * ut.values[p])
                    .sum()
            })?;
            let right = integral(&|p| {
                let r = rho[p];
                let u_p: Vec<f64> = state.u.iter().map(|u| u.values[p]).collect();
                // −u·∇u·u
                let mut convect = 0.0;
                // (∇a⊗u):∇u
                let mut grad_a_u_grad_u = 0.0;
                let mut grad_u_sq = 0.0;
                for i in 0..dim {
                    for j in 0..dim {
                        let dij = kin.du[i][j].values[p];
                        convect += u_p[j] * dij * u_p[i];
                        grad_a_u_grad_u += kin.grad_a[j].values[p] * u_p[i] * dij;
                        grad_u_sq += dij * dij;
                    }
                }
                let div = kin.div_u.values[p];
                let grad_a_dot_u = dot(&kin.grad_a, &state.u, p);
                let pressure_work = params.f_dev(r) * div;
                let coupling = (grad_a_u_grad_u + div * grad_a_dot_u) / (r * r);
                // ∇(ρk) = k∇a + ρ∇m
                let turb = 2.0 / (3.0 * r) * (kk[p] * grad_a_dot_u + r * dot(&kin.grad_m, &state.u, p));
                -convect + pressure_work + coupling - turb - (grad_u_sq + div * div) / r
            })?;
            (left, right)
        }
        Audit::L2Enthalpy => {
            let left = integral(&|p| state.h.values[p] * tendency.h.values[p])?;
            let right = integral(&|p| {
                let r = rho[p];
                let h = state.h.values[p];
                dot(&kin.grad_a, &kin.grad_h, p) * h / (r * r) - params.f_prime(r) * r * kin.div_u.values[p] * h
                    + kin.sk_point(params, p) * h / r
                    - Kinematics::advect(&state.u, &kin.grad_h, p) * h
                    - dot(&kin.grad_h, &kin.grad_h, p) / r
            })?;
            (left, right)
        }
        Audit::L2Kinetic => {
            let left = integral(&|p| state.m.values[p] * tendency.m.values[p])?;
            let right = integral(&|p| {
                let r = rho[p];
                let m = state.m.values[p];
                dot(&kin.grad_m, &kin.grad_a, p) * m / (r * r) - state.eps.values[p] * m
                    + kin.g_point(params, p) * m / r
                    - Kinematics::advect(&state.u, &kin.grad_m, p) * m
                    - dot(&kin.grad_m, &kin.grad_m, p) / r
            })?;
            (left, right)
        }
        Audit::L2Dissipation => {
            let left = integral(&|p| state.eps.values[p] * tendency.eps.values[p])?;
            let right = integral(&|p| {
                let r = rho[p];
                let e = state.eps.values[p];
                dot(&kin.grad_eps, &kin.grad_a, p) * e / (r * r)
                    + params.c1 * kin.g_point(params, p) * e * e / (r * kk[p])
                    - params.c2 * e * e * e / kk[p]
                    - Kinematics::advect(&state.u, &kin.grad_eps, p) * e
                    - dot(&kin.grad_eps, &kin.grad_eps, p) / r
            })?;
            (left, right)
        }
    };
    let scale = left.abs().max(right.abs()).max(1e-30);
    Ok(AuditReport::new(which.name(), left, right, scale, tol))
}

/// Empirical counterpart of the a priori bound `E(t) + ∫₀ᵗ D ≤ C·E(0)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AprioriSummary {
    /// `max_t (E(t) + cumD(t)) / E(0)`
    pub observed_c: f64,
    pub t_of_max: f64,
    /// `max_t E(t) / E(0)`
    pub max_energy_ratio: f64,
    /// `E(t) ≤ 2E(0)` at every sample.
    pub energy_bounded: bool,
    /// Some sample left the admissibility window.
    pub bounds_failed: bool,
}

pub fn monitor_apriori(series: &[EnergyReport]) -> Result<AprioriSummary> {
    let first = series
        .first()
        .ok_or_else(|| Error::Degenerate("empty energy series".into()))?;
    let e0 = first.energy;
    if !(e0 > 0.0) {
        return Err(Error::Degenerate(format!("initial energy is {e0}")));
    }
    let mut observed_c = f64::NEG_INFINITY;
    let mut t_of_max = first.t;
    let mut max_energy_ratio: f64 = 0.0;
    for r in series {
        let c = (r.energy + r.cum_dissipation) / e0;
        if c > observed_c {
            observed_c = c;
            t_of_max = r.t;
        }
        max_energy_ratio = max_energy_ratio.max(r.energy / e0);
    }
    Ok(AprioriSummary {
        observed_c,
        t_of_max,
        max_energy_ratio,
        energy_bounded: series.iter().all(|r| r.energy <= 2.0 * e0),
        bounds_failed: series.iter().any(|r| !r.admissible),
    })
}
