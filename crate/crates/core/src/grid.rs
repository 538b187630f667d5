//! Periodic tensor-product grid on `[0, length)^dim` with Fourier transforms,
//! exact spectral differentiation, two-thirds dealiasing and domain quadrature.
//!
//! Fields are stored row-major with axis 0 (the `x₁` direction) slowest. The
//! forward transform is normalised by `1/n^dim`, so the `k = 0` coefficient is
//! the field mean and a real field `f` is recovered as `Σ_k f̂_k e^{iκ·x}`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::par::{self, Execution};

/// Highest derivative order accepted by [`Grid::partial_derivative`].
pub const MAX_DERIVATIVE_ORDER: usize = 4;

#[derive(Clone)]
pub struct Grid {
    dim: usize,
    n: usize,
    length: f64,
    exec: Execution,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Grid")
            .field("dim", &self.dim)
            .field("n", &self.n)
            .field("length", &self.length)
            .finish()
    }
}

impl PartialEq for Grid {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.n == other.n && self.length == other.length
    }
}

impl Grid {
    /// Build a grid. `n` must be even and at least 8, `length` positive.
    pub fn new(dim: usize, n: usize, length: f64) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(Error::Config(format!("dim must be 1, 2 or 3, got {dim}")));
        }
        if n < 8 {
            return Err(Error::Config(format!("n must be at least 8, got {n}")));
        }
        if !n.is_multiple_of(2) {
            return Err(Error::Config(format!("n must be even, got {n}")));
        }
        if !(length > 0.0 && length.is_finite()) {
            return Err(Error::Config(format!(
                "length must be positive and finite, got {length}"
            )));
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            dim,
            n,
            length,
            exec: Execution::default(),
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        })
    }

    /// Same grid with a different execution policy for the transforms.
    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn execution(&self) -> Execution {
        self.exec
    }

    /// Number of nodes, `n^dim`.
    pub fn len(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self) -> f64 {
        self.length / self.n as f64
    }

    /// Quadrature weight of one node, `(length/n)^dim`.
    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.dim as i32)
    }

    /// Domain volume, `length^dim`.
    pub fn volume(&self) -> f64 {
        self.length.powi(self.dim as i32)
    }

    /// Factor turning an integer wavenumber into a physical one.
    pub fn wavenumber_scale(&self) -> f64 {
        2.0 * PI / self.length
    }

    /// Largest integer wavenumber kept by [`Grid::dealias`] along one axis.
    pub fn dealias_cutoff(&self) -> usize {
        self.n / 3
    }

    /// Magnitude of the largest retained physical wavevector (corner of the
    /// dealiased cube).
    pub fn max_retained_wavenumber(&self) -> f64 {
        (self.dim as f64).sqrt() * self.dealias_cutoff() as f64 * self.wavenumber_scale()
    }

    /// Per-axis indices of flat node/mode index `idx`; unused axes are zero.
    pub fn unravel(&self, mut idx: usize) -> [usize; 3] {
        let mut out = [0usize; 3];
        for d in (0..self.dim).rev() {
            out[d] = idx % self.n;
            idx /= self.n;
        }
        out
    }

    pub fn ravel(&self, multi: &[usize]) -> usize {
        multi[..self.dim]
            .iter()
            .fold(0usize, |acc, &i| acc * self.n + (i % self.n))
    }

    /// Coordinates of node `idx`, `x_d = j_d·length/n`.
    pub fn node(&self, idx: usize) -> [f64; 3] {
        let m = self.unravel(idx);
        let h = self.spacing();
        [m[0] as f64 * h, m[1] as f64 * h, m[2] as f64 * h]
    }

    /// Signed integer wavenumber stored at FFT index `j`: `0..n/2-1` then `-n/2..-1`.
    pub fn wavenumber(&self, j: usize) -> i64 {
        let n = self.n as i64;
        let j = j as i64;
        if j < n / 2 {
            j
        } else {
            j - n
        }
    }

    /// Integer wavevector of flat mode index `idx`.
    pub fn mode(&self, idx: usize) -> [i64; 3] {
        let m = self.unravel(idx);
        let mut k = [0i64; 3];
        for d in 0..self.dim {
            k[d] = self.wavenumber(m[d]);
        }
        k
    }

    /// Flat index of integer wavevector `k` (components taken modulo `n`).
    pub fn mode_index(&self, k: &[i64]) -> usize {
        let n = self.n as i64;
        let multi: Vec<usize> = (0..self.dim)
            .map(|d| k.get(d).copied().unwrap_or(0).rem_euclid(n) as usize)
            .collect();
        self.ravel(&multi)
    }

    /// `|κ|²` of mode `idx` in physical units.
    pub fn kappa_sq(&self, idx: usize) -> f64 {
        let s = self.wavenumber_scale();
        self.mode(idx)
            .iter()
            .take(self.dim)
            .map(|&k| (k as f64 * s).powi(2))
            .sum()
    }

    fn check_len(&self, got: usize) -> Result<()> {
        if got != self.len() {
            return Err(Error::SizeMismatch {
                expected: self.len(),
                got,
            });
        }
        Ok(())
    }

    /// Transform along every axis in place.
    fn transform(&self, data: &mut [Complex64], fft: &Arc<dyn Fft<f64>>) {
        let n = self.n;
        let len = data.len();
        // Batches of whole lines handed to one worker.
        let batch = n * (len / n).clamp(1, 16);
        for axis in (0..self.dim).rev() {
            let stride = n.pow((self.dim - 1 - axis) as u32);
            if stride == 1 {
                par::for_each_chunk_mut(self.exec, data, batch, |lines| fft.process(lines));
                continue;
            }
            // Gather strided lines into contiguous storage, transform, scatter back.
            let block = stride * n;
            let mut lines = vec![Complex64::new(0.0, 0.0); len];
            for (line_id, line) in lines.chunks_mut(n).enumerate() {
                let outer = line_id / stride;
                let inner = line_id % stride;
                let base = outer * block + inner;
                for (j, v) in line.iter_mut().enumerate() {
                    *v = data[base + j * stride];
                }
            }
            par::for_each_chunk_mut(self.exec, &mut lines, batch, |chunk| fft.process(chunk));
            for (line_id, line) in lines.chunks(n).enumerate() {
                let outer = line_id / stride;
                let inner = line_id % stride;
                let base = outer * block + inner;
                for (j, v) in line.iter().enumerate() {
                    data[base + j * stride] = *v;
                }
            }
        }
    }

    pub fn forward(&self, f: &ScalarField) -> Result<SpectralField> {
        self.check_len(f.len())?;
        let mut data: Vec<Complex64> = f.values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.transform(&mut data, &self.forward);
        let norm = 1.0 / self.len() as f64;
        for c in &mut data {
            *c *= norm;
        }
        Ok(SpectralField { coeffs: data })
    }

    /// Inverse transform; the imaginary part (round-off for Hermitian input) is dropped.
    pub fn inverse(&self, f: &SpectralField) -> Result<ScalarField> {
        self.check_len(f.len())?;
        let mut data = f.coeffs.clone();
        self.transform(&mut data, &self.inverse);
        Ok(ScalarField {
            values: data.into_iter().map(|c| c.re).collect(),
        })
    }

    /// Multiply coefficient `k` by `Π_d (iκ_d)^{alpha_d}`.
    ///
    /// Odd derivatives of the Nyquist mode are set to zero so that real fields
    /// stay real.
    pub fn derivative_spectral(&self, f: &SpectralField, alpha: &[usize]) -> Result<SpectralField> {
        self.check_len(f.len())?;
        let alpha = self.check_alpha(alpha)?;
        let s = self.wavenumber_scale();
        let half = (self.n / 2) as i64;
        let mut out = f.coeffs.clone();
        let exec = self.exec;
        let coeffs = &f.coeffs;
        par::fill_indexed(exec, &mut out, |idx| {
            let k = self.mode(idx);
            let mut factor = Complex64::new(1.0, 0.0);
            for d in 0..self.dim {
                let order = alpha[d];
                if order == 0 {
                    continue;
                }
                if k[d] == -half && order % 2 == 1 {
                    return Complex64::new(0.0, 0.0);
                }
                let ik = Complex64::new(0.0, k[d] as f64 * s);
                factor *= ik.powu(order as u32);
            }
            coeffs[idx] * factor
        });
        Ok(SpectralField { coeffs: out })
    }

    fn check_alpha(&self, alpha: &[usize]) -> Result<[usize; 3]> {
        if alpha.len() != self.dim {
            return Err(Error::Config(format!(
                "multi-index has {} entries for a {}-dimensional grid",
                alpha.len(),
                self.dim
            )));
        }
        let order: usize = alpha.iter().sum();
        if order > MAX_DERIVATIVE_ORDER {
            return Err(Error::Config(format!(
                "derivative order {order} exceeds {MAX_DERIVATIVE_ORDER}"
            )));
        }
        let mut out = [0usize; 3];
        out[..self.dim].copy_from_slice(alpha);
        Ok(out)
    }

    /// Spectral partial derivative `∂^alpha f`, `alpha[d]` being the order along axis `d`.
    pub fn partial_derivative(&self, f: &ScalarField, alpha: &[usize]) -> Result<ScalarField> {
        let spec = self.forward(f)?;
        self.inverse(&self.derivative_spectral(&spec, alpha)?)
    }

    /// Multi-index with a single first derivative along `axis`.
    pub fn unit_alpha(&self, axis: usize) -> Vec<usize> {
        let mut a = vec![0; self.dim];
        a[axis] = 1;
        a
    }

    /// Multi-index counting how often each axis occurs in `axes`.
    pub fn alpha_of(&self, axes: &[usize]) -> Vec<usize> {
        let mut a = vec![0; self.dim];
        for &ax in axes {
            a[ax] += 1;
        }
        a
    }

    /// Spectral Laplacian, coefficient `k` times `−|κ|²`.
    pub fn laplacian_spectral(&self, f: &SpectralField) -> Result<SpectralField> {
        self.check_len(f.len())?;
        let mut out = f.coeffs.clone();
        let coeffs = &f.coeffs;
        par::fill_indexed(self.exec, &mut out, |idx| coeffs[idx] * -self.kappa_sq(idx));
        Ok(SpectralField { coeffs: out })
    }

    /// Two-thirds rule: zero every mode with some `|k_d| > n/3`.
    pub fn dealias(&self, f: &SpectralField) -> SpectralField {
        let cut = self.dealias_cutoff() as i64;
        let coeffs = f
            .coeffs
            .iter()
            .enumerate()
            .map(|(idx, &c)| {
                let k = self.mode(idx);
                if k.iter().take(self.dim).any(|&kd| kd.abs() > cut) {
                    Complex64::new(0.0, 0.0)
                } else {
                    c
                }
            })
            .collect();
        SpectralField { coeffs }
    }

    /// Project a physical field onto the dealiased band.
    pub fn dealias_field(&self, f: &ScalarField) -> Result<ScalarField> {
        let spec = self.forward(f)?;
        self.inverse(&self.dealias(&spec))
    }

    /// Periodic trapezoidal rule, `(length/n)^dim · Σ values`.
    pub fn integrate(&self, f: &ScalarField) -> Result<f64> {
        self.check_len(f.len())?;
        Ok(self.cell_volume() * f.values.iter().sum::<f64>())
    }

    /// Field sampled from a function of the node coordinates.
    pub fn field_from_fn(&self, f: impl Fn(&[f64; 3]) -> f64 + Sync + Send) -> ScalarField {
        let mut values = vec![0.0; self.len()];
        par::fill_indexed(self.exec, &mut values, |idx| f(&self.node(idx)));
        ScalarField { values }
    }

    pub fn zeros(&self) -> ScalarField {
        ScalarField::constant(self.len(), 0.0)
    }

    pub fn constant(&self, c: f64) -> ScalarField {
        ScalarField::constant(self.len(), c)
    }

    pub fn spectral_zeros(&self) -> SpectralField {
        SpectralField {
            coeffs: vec![Complex64::new(0.0, 0.0); self.len()],
        }
    }
}

/// Real samples at the grid nodes, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn constant(len: usize, c: f64) -> Self {
        Self { values: vec![c; len] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Max over nodes of `|value|`.
    pub fn sup_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.len(), other.len());
        Self {
            values: self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    /// `self + c·other`
    pub fn axpy(&self, c: f64, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + c * b)
    }

    pub fn mul(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a * b)
    }
}

/// Complex Fourier coefficients, one per wavevector, in FFT index order.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralField {
    pub coeffs: Vec<Complex64>,
}

impl SpectralField {
    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// Largest `|f̂_k − conj(f̂_{−k})|`; zero for the transform of a real field.
    pub fn hermitian_defect(&self, grid: &Grid) -> f64 {
        (0..self.len())
            .map(|idx| {
                let k = grid.mode(idx);
                let neg = grid.mode_index(&[-k[0], -k[1], -k[2]]);
                (self.coeffs[idx] - self.coeffs[neg].conj()).norm()
            })
            .fold(0.0, f64::max)
    }
}
