use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{Preset, RunConfig};
use crate::energy::theorem_energy;
use crate::error::{Error, Result};
use crate::grid::{Grid, ScalarField};
use crate::model::{validate_state, ModelParams, PerturbationState};

/// Initial perturbation rescaled so that `theorem_energy = amplitude²`,
/// without any admissibility check.
///
/// `RandomBandlimited` draws, for each field in storage order and for each
/// integer mode `k ≠ 0` with `|k| ≤ kmax` (lexicographic order over
/// `[-kmax, kmax]^dim`), an amplitude in `[0, 1)` and a phase in `[0, 2π)`
/// from ChaCha8 seeded with `seed`, and adds `A cos(κ·x + φ)`. The draw order
/// does not depend on `n`, so the same seed gives the same continuous field
/// on every grid.
pub fn synthesize(grid: &Grid, preset: Preset, amplitude: f64, kmax: usize, seed: u64) -> Result<PerturbationState> {
    let unit = match preset {
        Preset::SingleMode => {
            let s = grid.wavenumber_scale();
            let wave = grid.field_from_fn(|x| (s * x[0]).sin());
            let mut state = PerturbationState::equilibrium(grid);
            state.a = wave.clone();
            state.u[0] = wave.clone();
            state.h = wave.clone();
            state.m = wave.clone();
            state.eps = wave;
            state
        }
        Preset::RandomBandlimited => {
            if kmax == 0 || kmax > grid.dealias_cutoff() {
                return Err(Error::Config(format!(
                    "kmax must lie in 1..={}, got {kmax}",
                    grid.dealias_cutoff()
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fields = (0..grid.dim() + 4)
                .map(|_| random_field(grid, kmax as i64, &mut rng))
                .collect::<Result<_>>()?;
            PerturbationState::from_fields(grid, 0.0, fields)?
        }
    };
    let energy = theorem_energy(&unit)?;
    if amplitude == 0.0 || energy == 0.0 {
        return Ok(PerturbationState::equilibrium(grid));
    }
    Ok(unit.scaled(amplitude / energy.sqrt()))
}

fn random_field(grid: &Grid, kmax: i64, rng: &mut ChaCha8Rng) -> Result<ScalarField> {
    let dim = grid.dim();
    let side = (2 * kmax + 1) as usize;
    let mut spec = grid.spectral_zeros();
    for flat in 0..side.pow(dim as u32) {
        let mut k = [0i64; 3];
        let mut rest = flat;
        for d in (0..dim).rev() {
            k[d] = (rest % side) as i64 - kmax;
            rest /= side;
        }
        let k = &k[..dim];
        let norm_sq: i64 = k.iter().map(|v| v * v).sum();
        if norm_sq == 0 || norm_sq > kmax * kmax {
            continue;
        }
        let amp: f64 = rng.random_range(0.0..1.0);
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        // A cos(κ·x + φ) = A/2 (e^{iφ} e^{iκ·x} + e^{−iφ} e^{−iκ·x})
        let c = Complex64::from_polar(0.5 * amp, phase);
        let neg: Vec<i64> = k.iter().map(|v| -v).collect();
        spec.coeffs[grid.mode_index(k)] += c;
        spec.coeffs[grid.mode_index(&neg)] += c.conj();
    }
    grid.inverse(&spec)
}

/// Initial state of a run; fails with [`Error::Inadmissible`] when the
/// synthesised data leave the admissibility window.
pub fn make_initial_condition(config: &RunConfig, grid: &Grid, params: &ModelParams) -> Result<PerturbationState> {
    let ic = &config.ic;
    let state = synthesize(grid, ic.preset, ic.amplitude, config.kmax(), ic.seed)?;
    let report = validate_state(&state, params);
    if !report.admissible {
        return Err(Error::Inadmissible(Box::new(report)));
    }
    Ok(state)
}
