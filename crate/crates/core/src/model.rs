//! Closures, turbulence source terms and the right-hand side of the
//! perturbation system, with a cross-check against the conservative form.
//!
//! Unknowns are `a = ρ − ρ̄`, `u`, `h`, `m = k − k̄` and `ε`. Diffusion
//! coefficients are normalised to one and divided by `ρ`; pressure follows the
//! γ-law `p = Kρ^γ` and `f` is the pressure potential with `f' = p'/ρ`,
//! normalised by `f(ρ̄) = 0`.
//!
//! Every equation is evaluated pointwise from exact spectral derivatives and
//! then projected once onto the dealiased band, so the state never leaves the
//! two-thirds band once it starts there.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, ScalarField, SpectralField};
use crate::quadrature;

/// Absolute tolerance of the quadrature behind [`ModelParams::density_potential`].
pub const POTENTIAL_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelParams {
    pub rho_bar: f64,
    pub k_bar: f64,
    pub mu: f64,
    pub mu_t: f64,
    pub c1: f64,
    pub c2: f64,
    pub gamma: f64,
    pub kappa: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            rho_bar: 1.0,
            k_bar: 1.0,
            mu: 0.5,
            mu_t: 0.5,
            c1: 1.44,
            c2: 1.92,
            gamma: 1.4,
            kappa: 1.0,
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("rho_bar", self.rho_bar),
            ("k_bar", self.k_bar),
            ("mu", self.mu),
            ("mu_t", self.mu_t),
            ("c1", self.c1),
            ("c2", self.c2),
            ("kappa", self.kappa),
        ];
        for (name, v) in fields {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("params.{name} must be positive, got {v}")));
            }
        }
        if !(self.gamma > 1.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("params.gamma must exceed 1, got {}", self.gamma)));
        }
        Ok(())
    }

    /// Effective viscosity `μ_e = μ + μ_t`.
    pub fn mu_e(&self) -> f64 {
        self.mu + self.mu_t
    }

    fn check_rho(rho: f64) -> Result<()> {
        if rho > 0.0 {
            Ok(())
        } else {
            Err(Error::NonPositiveDensity(rho))
        }
    }

    /// `p = Kρ^γ`
    pub fn pressure(&self, rho: f64) -> Result<f64> {
        Self::check_rho(rho)?;
        Ok(self.kappa * rho.powf(self.gamma))
    }

    /// `p'(ρ) = Kγρ^{γ−1}`
    pub fn pressure_prime(&self, rho: f64) -> Result<f64> {
        Self::check_rho(rho)?;
        Ok(self.p_prime(rho))
    }

    /// `f'(ρ) = p'(ρ)/ρ`
    pub fn potential_slope(&self, rho: f64) -> Result<f64> {
        Self::check_rho(rho)?;
        Ok(self.f_prime(rho))
    }

    /// `f(ρ) − f(ρ̄)`
    pub fn potential_dev(&self, rho: f64) -> Result<f64> {
        Self::check_rho(rho)?;
        Ok(self.f_dev(rho))
    }

    /// `F(a) = ∫₀^a (f(s+ρ̄) − f(ρ̄))/(s+ρ̄) ds`, the potential energy density
    /// of a density perturbation. Closed form for `γ = 2`, adaptive
    /// Gauss–Kronrod otherwise.
    pub fn density_potential(&self, a: f64) -> Result<f64> {
        if !(a > -self.rho_bar) {
            return Err(Error::Vacuum {
                a,
                rho_bar: self.rho_bar,
            });
        }
        Ok(self.big_f(a))
    }

    pub(crate) fn p(&self, rho: f64) -> f64 {
        self.kappa * rho.powf(self.gamma)
    }

    pub(crate) fn p_prime(&self, rho: f64) -> f64 {
        self.kappa * self.gamma * rho.powf(self.gamma - 1.0)
    }

    pub(crate) fn f_prime(&self, rho: f64) -> f64 {
        self.kappa * self.gamma * rho.powf(self.gamma - 2.0)
    }

    pub(crate) fn f_dev(&self, rho: f64) -> f64 {
        let g1 = self.gamma - 1.0;
        self.kappa * self.gamma / g1 * (rho.powf(g1) - self.rho_bar.powf(g1))
    }

    pub(crate) fn big_f(&self, a: f64) -> f64 {
        if a == 0.0 {
            return 0.0;
        }
        if self.gamma == 2.0 {
            // 2K ∫₀^a s/(s+ρ̄) ds = 2K ρ̄ (x − ln(1+x)), x = a/ρ̄
            let x = a / self.rho_bar;
            let g = if x.abs() < 1e-3 {
                // alternating series, truncation below 1e-24 relative
                x * x * (0.5 - x * (1.0 / 3.0 - x * (0.25 - x * (0.2 - x / 6.0))))
            } else {
                x - x.ln_1p()
            };
            return 2.0 * self.kappa * self.rho_bar * g;
        }
        let rho_bar = self.rho_bar;
        quadrature::integrate(|s| self.f_dev(s + rho_bar) / (s + rho_bar), 0.0, a, POTENTIAL_TOL)
    }
}

/// Unknowns of the perturbation system at one time instant.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationState {
    pub grid: Grid,
    pub t: f64,
    pub a: ScalarField,
    pub u: Vec<ScalarField>,
    pub h: ScalarField,
    pub m: ScalarField,
    pub eps: ScalarField,
}

/// Time derivatives of every unknown.
#[derive(Clone, Debug, PartialEq)]
pub struct Tendency {
    pub a: ScalarField,
    pub u: Vec<ScalarField>,
    pub h: ScalarField,
    pub m: ScalarField,
    pub eps: ScalarField,
}

/// Field labels in storage order: `a, u1..ud, h, m, eps`.
pub fn field_names(dim: usize) -> Vec<String> {
    let mut names = vec!["a".to_string()];
    names.extend((1..=dim).map(|i| format!("u{i}")));
    names.extend(["h", "m", "eps"].map(String::from));
    names
}

impl PerturbationState {
    /// The constant state `(ρ̄, 0, 0, k̄, 0)`.
    pub fn equilibrium(grid: &Grid) -> Self {
        Self {
            grid: grid.clone(),
            t: 0.0,
            a: grid.zeros(),
            u: vec![grid.zeros(); grid.dim()],
            h: grid.zeros(),
            m: grid.zeros(),
            eps: grid.zeros(),
        }
    }

    /// Assemble a state from fields in storage order.
    pub fn from_fields(grid: &Grid, t: f64, mut fields: Vec<ScalarField>) -> Result<Self> {
        let dim = grid.dim();
        if fields.len() != dim + 4 {
            return Err(Error::SizeMismatch {
                expected: dim + 4,
                got: fields.len(),
            });
        }
        for f in &fields {
            if f.len() != grid.len() {
                return Err(Error::SizeMismatch {
                    expected: grid.len(),
                    got: f.len(),
                });
            }
        }
        let eps = fields.pop().unwrap();
        let m = fields.pop().unwrap();
        let h = fields.pop().unwrap();
        let u = fields.split_off(1);
        let a = fields.pop().unwrap();
        Ok(Self {
            grid: grid.clone(),
            t,
            a,
            u,
            h,
            m,
            eps,
        })
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    pub fn fields(&self) -> Vec<&ScalarField> {
        let mut out = vec![&self.a];
        out.extend(self.u.iter());
        out.extend([&self.h, &self.m, &self.eps]);
        out
    }

    pub fn fields_mut(&mut self) -> Vec<&mut ScalarField> {
        let mut out = vec![&mut self.a];
        out.extend(self.u.iter_mut());
        out.extend([&mut self.h, &mut self.m, &mut self.eps]);
        out
    }

    pub fn into_fields(self) -> Vec<ScalarField> {
        let mut out = vec![self.a];
        out.extend(self.u);
        out.extend([self.h, self.m, self.eps]);
        out
    }

    /// Density `ρ = a + ρ̄`.
    pub fn rho(&self, params: &ModelParams) -> ScalarField {
        self.a.map(|a| a + params.rho_bar)
    }

    /// Turbulent kinetic energy `k = m + k̄`.
    pub fn k(&self, params: &ModelParams) -> ScalarField {
        self.m.map(|m| m + params.k_bar)
    }

    /// `self + dt·tendency`, time advanced by `dt`.
    pub fn advanced(&self, tendency: &Tendency, dt: f64) -> Self {
        let mut out = self.clone();
        for (f, df) in out.fields_mut().into_iter().zip(tendency.fields()) {
            *f = f.axpy(dt, df);
        }
        out.t += dt;
        out
    }

    /// Every field multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        for f in out.fields_mut() {
            *f = f.scale(c);
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.fields().iter().all(|f| f.all_finite()) && self.t.is_finite()
    }

    /// Largest pointwise deviation from the constant state over all fields.
    pub fn sup_deviation(&self) -> f64 {
        self.fields().iter().map(|f| f.sup_abs()).fold(0.0, f64::max)
    }
}

impl Tendency {
    pub fn fields(&self) -> Vec<&ScalarField> {
        let mut out = vec![&self.a];
        out.extend(self.u.iter());
        out.extend([&self.h, &self.m, &self.eps]);
        out
    }

    pub fn fields_mut(&mut self) -> Vec<&mut ScalarField> {
        let mut out = vec![&mut self.a];
        out.extend(self.u.iter_mut());
        out.extend([&mut self.h, &mut self.m, &mut self.eps]);
        out
    }

    /// `Σ wᵢ·Tᵢ`
    pub fn combine(terms: &[(&Tendency, f64)]) -> Tendency {
        let (first, w0) = terms[0];
        let mut out = first.clone();
        for f in out.fields_mut() {
            *f = f.scale(w0);
        }
        for (t, w) in &terms[1..] {
            for (f, g) in out.fields_mut().into_iter().zip(t.fields()) {
                *f = f.axpy(*w, g);
            }
        }
        out
    }
}

/// Pointwise extremes of `ρ` and `k` against the window
/// `ρ̄/2 ≤ ρ ≤ 2ρ̄`, `k̄/2 ≤ k ≤ 2k̄`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdmissibilityReport {
    pub rho_min: f64,
    pub rho_max: f64,
    pub k_min: f64,
    pub k_max: f64,
    pub rho_window: [f64; 2],
    pub k_window: [f64; 2],
    pub rho_ok: bool,
    pub k_ok: bool,
    pub finite: bool,
    pub admissible: bool,
}

impl std::fmt::Display for AdmissibilityReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "rho in [{:.6e}, {:.6e}] (window [{}, {}]), k in [{:.6e}, {:.6e}] (window [{}, {}]), finite: {}",
            self.rho_min,
            self.rho_max,
            self.rho_window[0],
            self.rho_window[1],
            self.k_min,
            self.k_max,
            self.k_window[0],
            self.k_window[1],
            self.finite
        )
    }
}

pub fn validate_state(state: &PerturbationState, params: &ModelParams) -> AdmissibilityReport {
    let rho_min = state.a.min() + params.rho_bar;
    let rho_max = state.a.max() + params.rho_bar;
    let k_min = state.m.min() + params.k_bar;
    let k_max = state.m.max() + params.k_bar;
    let rho_window = [0.5 * params.rho_bar, 2.0 * params.rho_bar];
    let k_window = [0.5 * params.k_bar, 2.0 * params.k_bar];
    let finite = state.all_finite();
    let rho_ok = rho_min >= rho_window[0] && rho_max <= rho_window[1];
    let k_ok = k_min >= k_window[0] && k_max <= k_window[1];
    AdmissibilityReport {
        rho_min,
        rho_max,
        k_min,
        k_max,
        rho_window,
        k_window,
        rho_ok,
        k_ok,
        finite,
        admissible: rho_ok && k_ok && finite,
    }
}

fn require_admissible(state: &PerturbationState, params: &ModelParams) -> Result<()> {
    let report = validate_state(state, params);
    if report.admissible {
        Ok(())
    } else {
        Err(Error::Inadmissible(Box::new(report)))
    }
}

/// Spectral derivatives of the state needed by the source terms, the
/// right-hand side and the audits. `du[i][j] = ∂u^i/∂x_j`.
#[derive(Clone, Debug)]
pub struct Kinematics {
    pub rho: ScalarField,
    pub k: ScalarField,
    pub grad_a: Vec<ScalarField>,
    pub du: Vec<Vec<ScalarField>>,
    pub div_u: ScalarField,
    pub lap_u: Vec<ScalarField>,
    pub grad_div_u: Vec<ScalarField>,
    pub grad_h: Vec<ScalarField>,
    pub lap_h: ScalarField,
    pub grad_m: Vec<ScalarField>,
    pub lap_m: ScalarField,
    pub grad_eps: Vec<ScalarField>,
    pub lap_eps: ScalarField,
}

fn gradient(grid: &Grid, spec: &SpectralField) -> Result<Vec<ScalarField>> {
    (0..grid.dim())
        .map(|j| grid.inverse(&grid.derivative_spectral(spec, &grid.unit_alpha(j))?))
        .collect()
}

impl Kinematics {
    pub fn new(state: &PerturbationState, params: &ModelParams) -> Result<Self> {
        let g = &state.grid;
        let dim = g.dim();
        let spec_a = g.forward(&state.a)?;
        let spec_u: Vec<SpectralField> = state.u.iter().map(|f| g.forward(f)).collect::<Result<_>>()?;
        let spec_h = g.forward(&state.h)?;
        let spec_m = g.forward(&state.m)?;
        let spec_e = g.forward(&state.eps)?;

        let du: Vec<Vec<ScalarField>> = spec_u.iter().map(|s| gradient(g, s)).collect::<Result<_>>()?;
        let mut div_spec = g.spectral_zeros();
        for (j, s) in spec_u.iter().enumerate() {
            let d = g.derivative_spectral(s, &g.unit_alpha(j))?;
            for (acc, v) in div_spec.coeffs.iter_mut().zip(d.coeffs) {
                *acc += v;
            }
        }
        let lap_u = spec_u
            .iter()
            .map(|s| g.inverse(&g.laplacian_spectral(s)?))
            .collect::<Result<_>>()?;
        let div_u = g.inverse(&div_spec)?;
        let grad_div_u = gradient(g, &div_spec)?;
        debug_assert_eq!(du.len(), dim);

        Ok(Self {
            rho: state.rho(params),
            k: state.k(params),
            grad_a: gradient(g, &spec_a)?,
            du,
            div_u,
            lap_u,
            grad_div_u,
            grad_h: gradient(g, &spec_h)?,
            lap_h: g.inverse(&g.laplacian_spectral(&spec_h)?)?,
            grad_m: gradient(g, &spec_m)?,
            lap_m: g.inverse(&g.laplacian_spectral(&spec_m)?)?,
            grad_eps: gradient(g, &spec_e)?,
            lap_eps: g.inverse(&g.laplacian_spectral(&spec_e)?)?,
        })
    }

    fn dim(&self) -> usize {
        self.du.len()
    }

    /// `|∇a|²` at node `p`.
    pub fn grad_a_sq(&self, p: usize) -> f64 {
        self.grad_a.iter().map(|g| g.values[p].powi(2)).sum()
    }

    /// `[μ(∂_j u^i + ∂_i u^j) − (2/3)δ_ij μ div u] ∂_j u^i` at node `p`.
    pub fn viscous_production(&self, params: &ModelParams, p: usize) -> f64 {
        let d = self.dim();
        let div = self.div_u.values[p];
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                let dij = self.du[i][j].values[p];
                let sym = dij + self.du[j][i].values[p];
                let trace = if i == j { 2.0 / 3.0 * params.mu * div } else { 0.0 };
                s += (params.mu * sym - trace) * dij;
            }
        }
        s
    }

    /// Undealiased `S_k` at node `p`, with `∂p/∂x_j = p'(ρ)∂a/∂x_j`.
    pub fn sk_point(&self, params: &ModelParams, p: usize) -> f64 {
        let rho = self.rho.values[p];
        self.viscous_production(params, p) + params.mu_t / (rho * rho) * params.p_prime(rho) * self.grad_a_sq(p)
    }

    /// Undealiased `G` at node `p`.
    pub fn g_point(&self, params: &ModelParams, p: usize) -> f64 {
        let d = self.dim();
        let mu_e = params.mu_e();
        let div = self.div_u.values[p];
        let rho_k = self.rho.values[p] * self.k.values[p];
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                let dij = self.du[i][j].values[p];
                let sym = dij + self.du[j][i].values[p];
                let trace = if i == j { 2.0 / 3.0 * (rho_k + mu_e * div) } else { 0.0 };
                s += dij * (mu_e * sym - trace);
            }
        }
        s
    }

    /// `v·∇w` at node `p` for a gradient field `grad_w`.
    pub fn advect(u: &[ScalarField], grad_w: &[ScalarField], p: usize) -> f64 {
        u.iter().zip(grad_w).map(|(ui, gi)| ui.values[p] * gi.values[p]).sum()
    }
}

fn pointwise(len: usize, f: impl Fn(usize) -> f64) -> ScalarField {
    ScalarField::new((0..len).map(f).collect())
}

/// Project a pointwise field onto the dealiased band.
fn project(grid: &Grid, f: &ScalarField) -> Result<ScalarField> {
    grid.dealias_field(f)
}

/// `S_k` on the grid, dealiased. Rejects inadmissible states.
pub fn source_sk(state: &PerturbationState, params: &ModelParams) -> Result<ScalarField> {
    require_admissible(state, params)?;
    let kin = Kinematics::new(state, params)?;
    let raw = pointwise(state.grid.len(), |p| kin.sk_point(params, p));
    project(&state.grid, &raw)
}

/// `G` on the grid, dealiased. Rejects inadmissible states.
pub fn production_g(state: &PerturbationState, params: &ModelParams) -> Result<ScalarField> {
    require_admissible(state, params)?;
    let kin = Kinematics::new(state, params)?;
    let raw = pointwise(state.grid.len(), |p| kin.g_point(params, p));
    project(&state.grid, &raw)
}

/// Right-hand side of the perturbation system. Rejects states outside the
/// admissibility window.
pub fn compute_rhs(state: &PerturbationState, params: &ModelParams) -> Result<Tendency> {
    require_admissible(state, params)?;
    rhs_unguarded(state, params)
}

/// Right-hand side without the admissibility window; still requires `ρ > 0`,
/// `k > 0` and finite output. Used when guard violations are only reported.
pub fn rhs_unguarded(state: &PerturbationState, params: &ModelParams) -> Result<Tendency> {
    let g = &state.grid;
    let len = g.len();
    let rho_min = state.a.min() + params.rho_bar;
    if !(rho_min > 0.0) {
        return Err(Error::NonPositiveDensity(rho_min));
    }
    let k_min = state.m.min() + params.k_bar;
    if !(k_min > 0.0) {
        return Err(Error::NonFinite(format!(
            "turbulent kinetic energy k = {k_min} is not positive"
        )));
    }
    let kin = Kinematics::new(state, params)?;
    let rho = &kin.rho.values;
    let kk = &kin.k.values;

    // a_t = −div(ρu), flux form
    let mut div_flux = g.spectral_zeros();
    for (j, uj) in state.u.iter().enumerate() {
        let flux = g.forward(&kin.rho.mul(uj))?;
        let d = g.derivative_spectral(&flux, &g.unit_alpha(j))?;
        for (acc, v) in div_flux.coeffs.iter_mut().zip(d.coeffs) {
            *acc -= v;
        }
    }
    let a_t = g.inverse(&g.dealias(&div_flux))?;

    // ∇(ρk) from the nodal product
    let grad_rho_k = gradient(g, &g.forward(&kin.rho.mul(&kin.k))?)?;

    let mut u_t = Vec::with_capacity(g.dim());
    for i in 0..g.dim() {
        let raw = pointwise(len, |p| {
            let r = rho[p];
            -Kinematics::advect(&state.u, &kin.du[i], p) + (kin.lap_u[i].values[p] + kin.grad_div_u[i].values[p]) / r
                - params.f_prime(r) * kin.grad_a[i].values[p]
                - 2.0 / (3.0 * r) * grad_rho_k[i].values[p]
        });
        u_t.push(project(g, &raw)?);
    }

    let sk = pointwise(len, |p| kin.sk_point(params, p));
    let gg = pointwise(len, |p| kin.g_point(params, p));

    let h_t = project(
        g,
        &pointwise(len, |p| {
            let r = rho[p];
            -Kinematics::advect(&state.u, &kin.grad_h, p) + kin.lap_h.values[p] / r
                - params.f_prime(r) * r * kin.div_u.values[p]
                + sk.values[p] / r
        }),
    )?;
    let m_t = project(
        g,
        &pointwise(len, |p| {
            let r = rho[p];
            -Kinematics::advect(&state.u, &kin.grad_m, p) + kin.lap_m.values[p] / r + gg.values[p] / r
                - state.eps.values[p]
        }),
    )?;
    let eps_t = project(
        g,
        &pointwise(len, |p| {
            let r = rho[p];
            let e = state.eps.values[p];
            -Kinematics::advect(&state.u, &kin.grad_eps, p)
                + kin.lap_eps.values[p] / r
                + params.c1 * gg.values[p] * e / (r * kk[p])
                - params.c2 * e * e / kk[p]
        }),
    )?;

    let tendency = Tendency {
        a: a_t,
        u: u_t,
        h: h_t,
        m: m_t,
        eps: eps_t,
    };
    let names = field_names(g.dim());
    for (name, f) in names.iter().zip(tendency.fields()) {
        if !f.all_finite() {
            return Err(Error::NonFinite(format!("tendency of {name}")));
        }
    }
    Ok(tendency)
}

/// Conservative-form check of a tendency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConservativeReport {
    /// L² norm of the residual, per equation in storage order.
    pub per_equation: Vec<f64>,
    /// Max of `per_equation`.
    pub residual: f64,
    /// Largest L² norm among the individual terms that enter the residuals.
    pub scale: f64,
}

fn l2(grid: &Grid, f: &ScalarField) -> Result<f64> {
    Ok(grid.integrate(&f.mul(f))?.sqrt())
}

/// Compare `tendency` with the time derivatives implied by the conservative
/// system `(ρw)_t + div(ρuw) − Δw = source`.
///
/// Each conservative equation is solved for `w_t` by the product rule
/// (`(ρw)_t = ρ_t w + ρ w_t`, `ρ_t = a_t` taken from the tendency), divided by
/// `ρ` and projected onto the dealiased band; the residual is the L² norm of
/// its difference from the tendency. Flux divergences are differentiated as
/// nodal products, `∇p` is the spectral derivative of `p(ρ)` at the nodes and
/// the enthalpy source uses `Dp/Dt = p'(ρ)(ρ_t + u·∇ρ)`, so none of the
/// rewrites used by [`compute_rhs`] are reused here.
pub fn conservative_residual(
    state: &PerturbationState,
    tendency: &Tendency,
    params: &ModelParams,
) -> Result<ConservativeReport> {
    let g = &state.grid;
    let len = g.len();
    let dim = g.dim();
    if tendency.u.len() != dim {
        return Err(Error::SizeMismatch {
            expected: dim,
            got: tendency.u.len(),
        });
    }
    for f in tendency.fields() {
        if f.len() != len {
            return Err(Error::SizeMismatch {
                expected: len,
                got: f.len(),
            });
        }
    }
    let kin = Kinematics::new(state, params)?;
    let rho = &kin.rho;
    let kk = &kin.k;
    let rho_t = &tendency.a;
    let inv_rho = rho.map(|r| 1.0 / r);

    let mut scale: f64 = 0.0;
    let mut per_equation = Vec::with_capacity(dim + 4);
    let mut finish = |terms: Vec<ScalarField>, w_t: &ScalarField| -> Result<f64> {
        // w_t + P(Σ terms / ρ)
        let mut total = g.zeros();
        for t in &terms {
            let t = t.mul(&inv_rho);
            scale = scale.max(l2(g, &t)?);
            total = total.axpy(1.0, &t);
        }
        scale = scale.max(l2(g, w_t)?);
        let residual = w_t.axpy(1.0, &project(g, &total)?);
        l2(g, &residual)
    };

    // div(ρ u w) for a scalar w, from nodal products
    let flux_div = |w: &ScalarField| -> Result<ScalarField> {
        let mut acc = g.spectral_zeros();
        for (j, uj) in state.u.iter().enumerate() {
            let spec = g.forward(&rho.mul(uj).mul(w))?;
            let d = g.derivative_spectral(&spec, &g.unit_alpha(j))?;
            for (c, v) in acc.coeffs.iter_mut().zip(d.coeffs) {
                *c += v;
            }
        }
        g.inverse(&acc)
    };
    let u_dot = |grad: &[ScalarField]| pointwise(len, |p| Kinematics::advect(&state.u, grad, p));

    // continuity, expanded: ρ_t + ρ div u + u·∇ρ = 0; multiply through by ρ
    // so that the common division by ρ in `finish` leaves it unchanged
    let cont = vec![rho.mul(&kin.div_u).mul(rho), u_dot(&kin.grad_a).mul(rho)];
    per_equation.push(finish(cont, &tendency.a)?);

    // momentum
    let p_nodes = rho.map(|r| params.p(r));
    let grad_p = gradient(g, &g.forward(&p_nodes)?)?;
    for i in 0..dim {
        let flux = flux_div(&state.u[i])?;
        let terms = vec![
            rho_t.mul(&state.u[i]),
            flux,
            kin.lap_u[i].scale(-1.0),
            kin.grad_div_u[i].scale(-1.0),
            grad_p[i].clone(),
            // (2/3)∇(ρk) by the product rule
            pointwise(len, |p| {
                2.0 / 3.0 * (kk.values[p] * kin.grad_a[i].values[p] + rho.values[p] * kin.grad_m[i].values[p])
            }),
        ];
        per_equation.push(finish(terms, &tendency.u[i])?);
    }

    // enthalpy: (ρh)_t + div(ρuh) − Δh = Dp/Dt + S_k
    let sk_cons = pointwise(len, |p| {
        let r = rho.values[p];
        let dp_da: f64 = (0..dim).map(|j| grad_p[j].values[p] * kin.grad_a[j].values[p]).sum();
        kin.viscous_production(params, p) + params.mu_t / (r * r) * dp_da
    });
    let dp_dt = pointwise(len, |p| {
        params.p_prime(rho.values[p]) * (rho_t.values[p] + Kinematics::advect(&state.u, &kin.grad_a, p))
    });
    let terms = vec![
        rho_t.mul(&state.h),
        flux_div(&state.h)?,
        kin.lap_h.scale(-1.0),
        dp_dt.scale(-1.0),
        sk_cons.scale(-1.0),
    ];
    per_equation.push(finish(terms, &tendency.h)?);

    // turbulent kinetic energy: (ρk)_t + div(ρuk) − Δk = G − ρε
    let gg = pointwise(len, |p| kin.g_point(params, p));
    let terms = vec![
        rho_t.mul(kk),
        flux_div(kk)?,
        kin.lap_m.scale(-1.0),
        gg.scale(-1.0),
        rho.mul(&state.eps),
    ];
    // k_t = m_t; the ρ_t k term replaces ρ_t m since (ρk)_t = ρ_t k + ρ m_t
    per_equation.push(finish(terms, &tendency.m)?);

    // dissipation: (ρε)_t + div(ρuε) − Δε = C₁Gε/k − C₂ρε²/k
    let e = &state.eps;
    let terms = vec![
        rho_t.mul(e),
        flux_div(e)?,
        kin.lap_eps.scale(-1.0),
        pointwise(len, |p| -params.c1 * gg.values[p] * e.values[p] / kk.values[p]),
        pointwise(len, |p| {
            params.c2 * rho.values[p] * e.values[p] * e.values[p] / kk.values[p]
        }),
    ];
    per_equation.push(finish(terms, &tendency.eps)?);

    let residual = per_equation.iter().copied().fold(0.0, f64::max);
    Ok(ConservativeReport {
        per_equation,
        residual,
        scale: scale.max(1e-30),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    const TWO_PI: f64 = 2.0 * PI;

    fn params_gamma2() -> ModelParams {
        ModelParams {
            gamma: 2.0,
            kappa: 1.0,
            ..ModelParams::default()
        }
    }

    /// Random trigonometric polynomial with modes `|k_d| ≤ kmax`, built by
    /// direct cosine summation.
    fn bandlimited(grid: &Grid, kmax: i64, amp: f64, rng: &mut ChaCha8Rng) -> ScalarField {
        let mut modes = Vec::new();
        let r = |d: usize| if d < grid.dim() { -kmax..=kmax } else { 0..=0 };
        for k0 in r(0) {
            for k1 in r(1) {
                for k2 in r(2) {
                    if (k0, k1, k2) == (0, 0, 0) {
                        continue;
                    }
                    let c: f64 = rng.random_range(-1.0..1.0);
                    let ph: f64 = rng.random_range(0.0..TWO_PI);
                    modes.push(([k0 as f64, k1 as f64, k2 as f64], c, ph));
                }
            }
        }
        let norm = amp / modes.len() as f64;
        grid.field_from_fn(|x| {
            norm * modes
                .iter()
                .map(|(k, c, ph)| c * (k[0] * x[0] + k[1] * x[1] + k[2] * x[2] + ph).cos())
                .sum::<f64>()
        })
    }

    fn random_state(grid: &Grid, amp: f64, seed: u64) -> PerturbationState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fields = (0..grid.dim() + 4)
            .map(|_| bandlimited(grid, 3, amp, &mut rng))
            .collect();
        PerturbationState::from_fields(grid, 0.0, fields).unwrap()
    }

    #[test]
    fn pressure_law() {
        let p = ModelParams {
            gamma: 1.4,
            ..ModelParams::default()
        };
        assert!((p.pressure(1.0).unwrap() - 1.0).abs() < 1e-15);
        let p2 = params_gamma2();
        assert!((p2.pressure_prime(1.0).unwrap() - 2.0).abs() < 1e-15);
        assert!(p2.pressure(0.0).is_err());
        assert!(p2.pressure_prime(-1.0).is_err());
        assert!((p2.potential_slope(1.0).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(p2.potential_dev(1.0).unwrap(), 0.0);
    }

    #[test]
    fn density_potential_values() {
        let p2 = params_gamma2();
        assert_eq!(p2.density_potential(0.0).unwrap(), 0.0);
        // Oracle: antiderivative 2a − 2 ln(1+a) evaluated by hand.
        let expect = 0.2 - 2.0 * 1.1f64.ln();
        let got = p2.density_potential(0.1).unwrap();
        assert!((got - expect).abs() < 1e-15, "{got} vs {expect}");
        assert!((got - 0.009_379_640_391_350_28).abs() < 1e-14);
        assert!(p2.density_potential(-1.0).is_err());
        assert!(p2.density_potential(-2.0).is_err());
    }

    #[test]
    fn density_potential_quadrature_matches_closed_form() {
        // γ-law antiderivative:
        // F(a) = Kγ/(γ−1) [ (ρ^{γ−1} − ρ̄^{γ−1})/(γ−1) − ρ̄^{γ−1} ln(ρ/ρ̄) ]
        for &gamma in &[1.4, 1.67, 3.0] {
            let p = ModelParams {
                gamma,
                rho_bar: 1.3,
                kappa: 0.7,
                ..ModelParams::default()
            };
            for &a in &[-0.5, -0.1, 0.05, 0.3, 1.2] {
                let rho: f64 = a + p.rho_bar;
                let g1 = gamma - 1.0;
                let closed = p.kappa * gamma / g1
                    * ((rho.powf(g1) - p.rho_bar.powf(g1)) / g1 - p.rho_bar.powf(g1) * (rho / p.rho_bar).ln());
                let quad = p.density_potential(a).unwrap();
                assert!((quad - closed).abs() < 1e-12, "γ={gamma} a={a}: {quad} vs {closed}");
            }
        }
        // The γ = 2 branch against the same formula.
        let p2 = params_gamma2();
        for &a in &[-0.4, 1e-4, 2e-3, 0.7] {
            let rho: f64 = 1.0 + a;
            let closed = 2.0 * ((rho - 1.0) - rho.ln());
            assert!((p2.density_potential(a).unwrap() - closed).abs() < 1e-15);
        }
    }

    #[test]
    fn small_perturbation_potential_is_quadratic() {
        let p = ModelParams::default();
        let a = 1e-5;
        // F''(0) = f'(ρ̄)/ρ̄
        let expect = 0.5 * p.f_prime(p.rho_bar) / p.rho_bar * a * a;
        let got = p.density_potential(a).unwrap();
        assert!(((got - expect) / expect).abs() < 1e-4);
    }

    #[test]
    fn sources_vanish_at_equilibrium() {
        let g = Grid::new(2, 16, TWO_PI).unwrap();
        let s = PerturbationState::equilibrium(&g);
        let p = ModelParams::default();
        assert_eq!(source_sk(&s, &p).unwrap().sup_abs(), 0.0);
        assert_eq!(production_g(&s, &p).unwrap().sup_abs(), 0.0);
    }

    #[test]
    fn shear_flow_sources() {
        let g = Grid::new(2, 32, TWO_PI).unwrap();
        let p = ModelParams::default();
        let mut s = PerturbationState::equilibrium(&g);
        s.u[0] = g.field_from_fn(|x| x[1].sin());
        // Hand contraction: only ∂u¹/∂y = cos y is nonzero and div u = 0.
        let sk = source_sk(&s, &p).unwrap();
        let want = g.field_from_fn(|x| p.mu * x[1].cos().powi(2));
        assert!(sk.zip_map(&want, |a, b| a - b).sup_abs() < 1e-13);
        let gg = production_g(&s, &p).unwrap();
        let want = g.field_from_fn(|x| p.mu_e() * x[1].cos().powi(2));
        assert!(gg.zip_map(&want, |a, b| a - b).sup_abs() < 1e-13);
    }

    #[test]
    fn compressive_flow_production() {
        let g = Grid::new(2, 32, TWO_PI).unwrap();
        let p = ModelParams::default();
        let mut s = PerturbationState::equilibrium(&g);
        s.u[0] = g.field_from_fn(|x| x[0].sin());
        // Hand contraction: ∂u¹/∂x = cos x = div u;
        // G = cos x [2μ_e cos x − (2/3)(1 + μ_e cos x)].
        let gg = production_g(&s, &p).unwrap();
        let want = g.field_from_fn(|x| 4.0 / 3.0 * p.mu_e() * x[0].cos().powi(2) - 2.0 / 3.0 * x[0].cos());
        assert!(gg.zip_map(&want, |a, b| a - b).sup_abs() < 1e-13);
    }

    #[test]
    fn pressure_gradient_part_of_sk() {
        let g = Grid::new(1, 64, TWO_PI).unwrap();
        let p = params_gamma2();
        let mut s = PerturbationState::equilibrium(&g);
        s.a = g.field_from_fn(|x| 0.1 * x[0].sin());
        // Substitution: μ_t/(1+a)² · 2(1+a) · (0.1 cos x)².
        let sk = source_sk(&s, &p).unwrap();
        let want = g.field_from_fn(|x| p.mu_t * 2.0 * (0.1 * x[0].cos()).powi(2) / (1.0 + 0.1 * x[0].sin()));
        // The exact expression is not band-limited; the dealiased grid
        // projection differs from it by the tail beyond |k| = 21.
        let err = sk.zip_map(&want, |a, b| a - b).sup_abs();
        assert!(err < 1e-13, "{err}");
    }

    #[test]
    fn sources_reject_inadmissible_states() {
        let g = Grid::new(1, 16, TWO_PI).unwrap();
        let p = ModelParams::default();
        let mut s = PerturbationState::equilibrium(&g);
        s.a = g.constant(-0.6);
        assert!(matches!(source_sk(&s, &p), Err(Error::Inadmissible(_))));
        assert!(matches!(production_g(&s, &p), Err(Error::Inadmissible(_))));
        assert!(matches!(compute_rhs(&s, &p), Err(Error::Inadmissible(_))));
    }

    #[test]
    fn admissibility_window() {
        let g = Grid::new(1, 16, TWO_PI).unwrap();
        let p = ModelParams::default();
        let mut s = PerturbationState::equilibrium(&g);
        s.a = g.constant(0.4);
        assert!(validate_state(&s, &p).admissible);
        s.a = g.constant(-0.6);
        let r = validate_state(&s, &p);
        assert!(!r.admissible && !r.rho_ok && r.k_ok);
        assert!((r.rho_min - 0.4).abs() < 1e-15);
        s.a = g.zeros();
        s.m = g.constant(1.5);
        let r = validate_state(&s, &p);
        assert!(!r.admissible && r.rho_ok && !r.k_ok);
        s.m = g.zeros();
        s.h.values[3] = f64::NAN;
        assert!(!validate_state(&s, &p).finite);
    }

    #[test]
    fn equilibrium_is_a_fixed_point() {
        for dim in 1..=3 {
            let g = Grid::new(dim, 16, TWO_PI).unwrap();
            let t = compute_rhs(&PerturbationState::equilibrium(&g), &ModelParams::default()).unwrap();
            for f in t.fields() {
                assert_eq!(f.sup_abs(), 0.0);
            }
        }
    }

    #[test]
    fn dissipation_only_state() {
        let g = Grid::new(1, 32, TWO_PI).unwrap();
        let p = ModelParams::default();
        let e0 = 0.01;
        let mut s = PerturbationState::equilibrium(&g);
        s.eps = g.field_from_fn(|x| e0 * x[0].sin());
        let t = compute_rhs(&s, &p).unwrap();
        // Substitution: Δε = −ε and G = 0.
        let m_t = g.field_from_fn(|x| -e0 * x[0].sin());
        let eps_t = g.field_from_fn(|x| -e0 * x[0].sin() - p.c2 * (e0 * x[0].sin()).powi(2));
        assert!(t.m.zip_map(&m_t, |a, b| a - b).sup_abs() < 1e-15);
        assert!(t.eps.zip_map(&eps_t, |a, b| a - b).sup_abs() < 1e-15);
        assert!(t.a.sup_abs() < 1e-18 && t.u[0].sup_abs() < 1e-18 && t.h.sup_abs() < 1e-18);
    }

    #[test]
    fn continuity_of_a_velocity_mode() {
        let g = Grid::new(1, 32, TWO_PI).unwrap();
        let p = ModelParams {
            rho_bar: 1.3,
            ..ModelParams::default()
        };
        let u0 = 0.02;
        let mut s = PerturbationState::equilibrium(&g);
        s.u[0] = g.field_from_fn(|x| u0 * x[0].sin());
        let t = compute_rhs(&s, &p).unwrap();
        let want = g.field_from_fn(|x| -p.rho_bar * u0 * x[0].cos());
        assert!(t.a.zip_map(&want, |a, b| a - b).sup_abs() < 1e-15);
    }

    #[test]
    fn conservative_form_agrees() {
        for dim in 1..=2 {
            let g = Grid::new(dim, 32, TWO_PI).unwrap();
            let p = ModelParams::default();
            let s = random_state(&g, 1e-2, 5 + dim as u64);
            let t = compute_rhs(&s, &p).unwrap();
            let rep = conservative_residual(&s, &t, &p).unwrap();
            assert!(rep.residual <= 1e-10 * rep.scale, "dim {dim}: {rep:?}");
        }
    }

    #[test]
    fn conservative_residual_detects_corruption() {
        let g = Grid::new(2, 16, TWO_PI).unwrap();
        let p = ModelParams::default();
        let s = PerturbationState::equilibrium(&g);
        let mut t = compute_rhs(&s, &p).unwrap();
        assert_eq!(conservative_residual(&s, &t, &p).unwrap().residual, 0.0);
        t.a = t.a.map(|v| v + 1.0);
        let rep = conservative_residual(&s, &t, &p).unwrap();
        assert!(rep.residual >= TWO_PI.powf(1.0) * (1.0 - 1e-12), "{rep:?}");

        let mut short = compute_rhs(&s, &p).unwrap();
        short.u.pop();
        assert!(conservative_residual(&s, &short, &p).is_err());
    }

    #[test]
    fn rhs_is_translation_equivariant() {
        let g = Grid::new(2, 16, TWO_PI).unwrap();
        let p = ModelParams::default();
        let s = random_state(&g, 2e-2, 99);
        let shift = |f: &ScalarField| {
            let mut out = f.clone();
            for idx in 0..g.len() {
                let mut m = g.unravel(idx);
                m[0] = (m[0] + 1) % g.n();
                out.values[g.ravel(&m)] = f.values[idx];
            }
            out
        };
        let mut shifted = s.clone();
        for f in shifted.fields_mut() {
            *f = shift(f);
        }
        let t = compute_rhs(&s, &p).unwrap();
        let ts = compute_rhs(&shifted, &p).unwrap();
        for (a, b) in t.fields().into_iter().zip(ts.fields()) {
            let scale = a.sup_abs().max(1e-300);
            assert!(shift(a).zip_map(b, |x, y| x - y).sup_abs() <= 1e-12 * scale);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn viscous_production_identity(seed in any::<u64>(), dim in 1usize..=3) {
            let g = Grid::new(dim, 8, TWO_PI).unwrap();
            let p = ModelParams::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = PerturbationState::equilibrium(&g);
            for u in s.u.iter_mut() {
                *u = bandlimited(&g, 2, 1.0, &mut rng);
            }
            let kin = Kinematics::new(&s, &p).unwrap();
            for node in 0..g.len() {
                let lhs = kin.viscous_production(&p, node);
                let mut sym_sq = 0.0;
                for i in 0..dim {
                    for j in 0..dim {
                        sym_sq += (kin.du[i][j].values[node] + kin.du[j][i].values[node]).powi(2);
                    }
                }
                let div = kin.div_u.values[node];
                let rhs = 0.5 * p.mu * sym_sq - 2.0 / 3.0 * p.mu * div * div;
                prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + sym_sq));
                prop_assert!(lhs >= -1e-12 * (1.0 + sym_sq));
            }
        }
    }
}
