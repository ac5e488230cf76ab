//! Position-grid wavefunctions for one and two motional modes.
//!
//! Coordinates are dimensionless, `x = X / sqrt(hbar / (m omega))`, with
//! `omega` the grid's scale frequency. The grid is periodic with
//! `x_i = -L + i dx`, `dx = 2L / N`; integrals are plain Riemann sums, which
//! coincide with the trapezoid rule on a periodic grid.

use std::f64::consts::PI;
use std::io::{Read, Write};

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{OdbError, Result};

/// Norm error above which a sampled eigenfunction counts as unresolved.
pub const RESOLUTION_TOL: f64 = 1e-8;
/// Weight allowed outside the resolved part of the discrete eigenbasis.
pub const DEFAULT_FOCK_RESIDUAL_TOL: f64 = 1e-5;
/// Eigenvalue error that still counts a grid eigenstate as a Fock state.
const BAND_EIGENVALUE_TOL: f64 = 1e-6;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid1D {
    pub n_points: usize,
    /// Half-width `L`.
    pub span: f64,
    /// Frequency defining the dimensionless coordinate, rad/s.
    pub scale_frequency: f64,
}

impl Grid1D {
    pub fn new(n_points: usize, span: f64, scale_frequency: f64) -> Result<Self> {
        if n_points < 8 || !n_points.is_power_of_two() {
            return Err(OdbError::Domain(format!("grid size must be a power of two >= 8, got {n_points}")));
        }
        if !(span > 0.0 && span.is_finite()) {
            return Err(OdbError::Domain(format!("grid span must be positive, got {span}")));
        }
        if !(scale_frequency > 0.0 && scale_frequency.is_finite()) {
            return Err(OdbError::Domain(format!("scale frequency must be positive, got {scale_frequency}")));
        }
        Ok(Self { n_points, span, scale_frequency })
    }

    /// Grid with equal position and momentum extent, `L = sqrt(pi N / 2)`.
    pub fn balanced(n_points: usize, scale_frequency: f64) -> Result<Self> {
        Self::new(n_points, balanced_span(n_points), scale_frequency)
    }

    pub fn dx(&self) -> f64 {
        2.0 * self.span / self.n_points as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        -self.span + i as f64 * self.dx()
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.n_points).map(|i| self.x(i)).collect()
    }

    /// Momentum of FFT bin `k`; bins from `N/2` on are negative.
    pub fn momentum(&self, k: usize) -> f64 {
        let n = self.n_points as i64;
        let k = k as i64;
        let signed = if k >= n / 2 { k - n } else { k };
        signed as f64 * PI / self.span
    }

    pub fn with_frequency(&self, scale_frequency: f64) -> Result<Self> {
        Self::new(self.n_points, self.span, scale_frequency)
    }

    /// Same size and span; frequencies may differ.
    pub fn same_layout(&self, other: &Grid1D) -> bool {
        self.n_points == other.n_points && self.span == other.span
    }

    fn check_same(&self, other: &Grid1D) -> Result<()> {
        let rel = (self.scale_frequency - other.scale_frequency).abs() / self.scale_frequency;
        if !self.same_layout(other) || rel > 1e-12 {
            return Err(OdbError::GridMismatch(format!("{self:?} vs {other:?}")));
        }
        Ok(())
    }

    /// Real-symmetric Fourier kinetic matrix `p^2 / 2` on the periodic grid.
    pub fn kinetic_matrix(&self) -> DMatrix<f64> {
        let n = self.n_points;
        let dx = self.dx();
        let half = n / 2;
        let mut by_offset = vec![0.0; n];
        for (d, t) in by_offset.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in 1..half {
                let p = k as f64 * PI / self.span;
                acc += p * p * (p * d as f64 * dx).cos();
            }
            let p_nyq = half as f64 * PI / self.span;
            acc = 2.0 * acc + p_nyq * p_nyq * (p_nyq * d as f64 * dx).cos();
            *t = 0.5 * acc / n as f64;
        }
        DMatrix::from_fn(n, n, |i, j| by_offset[i.abs_diff(j)])
    }
}

pub fn balanced_span(n_points: usize) -> f64 {
    (PI * n_points as f64 / 2.0).sqrt()
}

/// Normalized Hermite functions `h_0..=h_n_max` at `x`.
pub fn hermite_functions(n_max: usize, x: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n_max + 1);
    let h0 = PI.powf(-0.25) * (-0.5 * x * x).exp();
    out.push(h0);
    if n_max >= 1 {
        out.push(std::f64::consts::SQRT_2 * x * h0);
    }
    for n in 1..n_max {
        let next = (2.0 / (n + 1) as f64).sqrt() * x * out[n] - (n as f64 / (n + 1) as f64).sqrt() * out[n - 1];
        out.push(next);
    }
    out
}

/// Eigenfunction `n` of the oscillator at `omega_ref`, sampled on `grid`.
fn scaled_eigenfunction(n: usize, omega_ref: f64, grid: &Grid1D) -> Vec<f64> {
    let ratio = omega_ref / grid.scale_frequency;
    let stretch = ratio.sqrt();
    let pre = ratio.powf(0.25);
    grid.xs().iter().map(|&x| pre * hermite_functions(n, stretch * x)[n]).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Wavefunction1D {
    pub grid: Grid1D,
    pub amps: Vec<Complex64>,
}

impl Wavefunction1D {
    pub fn from_amplitudes(grid: Grid1D, amps: Vec<Complex64>) -> Result<Self> {
        if amps.len() != grid.n_points {
            return Err(OdbError::GridMismatch(format!("{} amplitudes for {} points", amps.len(), grid.n_points)));
        }
        Ok(Self { grid, amps })
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum::<f64>() * self.grid.dx()
    }

    pub fn normalize(&mut self) {
        let s = self.norm_sqr().sqrt();
        self.amps.iter_mut().for_each(|a| *a /= s);
    }

    /// `<self|other>`.
    pub fn inner(&self, other: &Wavefunction1D) -> Result<Complex64> {
        self.grid.check_same(&other.grid)?;
        Ok(self.amps.iter().zip(&other.amps).map(|(a, b)| a.conj() * b).sum::<Complex64>() * self.grid.dx())
    }

    pub fn density(&self) -> Vec<f64> {
        self.amps.iter().map(|a| a.norm_sqr()).collect()
    }
}

/// Oscillator eigenstate `n` at the grid's scale frequency.
pub fn fock_state(n: usize, grid: &Grid1D) -> Result<Wavefunction1D> {
    fock_state_at(n, grid.scale_frequency, grid)
}

/// Eigenstate `n` of the oscillator at `omega_ref`, on a grid scaled to another frequency.
pub fn fock_state_at(n: usize, omega_ref: f64, grid: &Grid1D) -> Result<Wavefunction1D> {
    let samples = scaled_eigenfunction(n, omega_ref, grid);
    let mut psi = Wavefunction1D { grid: *grid, amps: samples.into_iter().map(|v| Complex64::new(v, 0.0)).collect() };
    let err = (psi.norm_sqr() - 1.0).abs();
    if err > RESOLUTION_TOL {
        return Err(OdbError::Resolution(format!("Fock state {n} unresolved: norm error {err:.3e}")));
    }
    psi.normalize();
    Ok(psi)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GkpParams {
    /// Peak width.
    pub delta: f64,
    /// Inverse envelope width.
    pub epsilon: f64,
    /// Peaks are summed over `|s| <= s_max`.
    pub s_max: u32,
    /// Logical value, 0 or 1.
    pub logical: u8,
}

impl GkpParams {
    fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.epsilon > 0.0) {
            return Err(OdbError::Domain(format!("GKP widths must be positive: {self:?}")));
        }
        if self.s_max < 1 || self.logical > 1 {
            return Err(OdbError::Domain(format!("GKP needs s_max >= 1 and logical in {{0, 1}}: {self:?}")));
        }
        Ok(())
    }

    fn amplitude(&self, x: f64) -> f64 {
        let s_max = self.s_max as i64;
        let root_pi = PI.sqrt();
        (-s_max..=s_max)
            .map(|s| {
                let center = (2 * s + self.logical as i64) as f64 * root_pi;
                (-0.5 * (self.epsilon * center).powi(2)).exp() * (-0.5 * ((x - center) / self.delta).powi(2)).exp()
            })
            .sum()
    }
}

/// Finite-energy GKP state normalized on the grid.
///
/// Fails if more than 1e-8 of the (untruncated-grid) mass lies outside `[-L, L)`.
pub fn gkp_state(params: &GkpParams, grid: &Grid1D) -> Result<Wavefunction1D> {
    params.validate()?;
    let dx = grid.dx();
    let inside: f64 = grid.xs().iter().map(|&x| params.amplitude(x).powi(2)).sum::<f64>() * dx;
    // Same spacing, extended out to where the envelope and peaks are negligible.
    let reach = (2 * params.s_max + 1) as f64 * PI.sqrt() + 12.0 * params.delta;
    let extra = ((reach - grid.span).max(0.0) / dx).ceil() as usize + 1;
    let outside: f64 = (1..=extra)
        .map(|k| {
            let below = grid.x(0) - k as f64 * dx;
            let above = grid.x(grid.n_points - 1) + k as f64 * dx;
            params.amplitude(below).powi(2) + params.amplitude(above).powi(2)
        })
        .sum::<f64>()
        * dx;
    let lost = outside / (inside + outside);
    if lost > RESOLUTION_TOL {
        return Err(OdbError::Resolution(format!("GKP state truncated by the grid: {lost:.3e} of the mass outside")));
    }
    let mut psi = Wavefunction1D {
        grid: *grid,
        amps: grid.xs().iter().map(|&x| Complex64::new(params.amplitude(x), 0.0)).collect(),
    };
    psi.normalize();
    Ok(psi)
}

/// Re-expresses a state on the dimensionless grid of another frequency.
///
/// Band-limited interpolation of the periodic samples; points that map
/// outside the old grid are zero. Fails if this loses more than 1e-8 of the norm.
pub fn rescale_reference(psi: &Wavefunction1D, new_frequency: f64) -> Result<Wavefunction1D> {
    let old = psi.grid;
    let grid = old.with_frequency(new_frequency)?;
    if new_frequency == old.scale_frequency {
        return Ok(Wavefunction1D { grid, amps: psi.amps.clone() });
    }
    let n = old.n_points;
    let ratio = old.scale_frequency / new_frequency;
    let stretch = ratio.sqrt();
    let pre = ratio.powf(0.25);

    // Coefficients of sum_k c_k e^{i p_k (x + L)}.
    let mut coeffs = psi.amps.clone();
    let mut planner = rustfft::FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut coeffs);
    coeffs.iter_mut().for_each(|c| *c /= n as f64);
    let half = n / 2;

    let amps = grid
        .xs()
        .iter()
        .map(|&y| {
            let x = y * stretch;
            if x < -old.span || x > old.span - old.dx() {
                return ZERO;
            }
            let u = x + old.span;
            let mut acc = ZERO;
            for (k, c) in coeffs.iter().enumerate() {
                if k == half {
                    acc += c * (old.momentum(k) * u).cos();
                } else {
                    acc += c * Complex64::from_polar(1.0, old.momentum(k) * u);
                }
            }
            pre * acc
        })
        .collect();
    let mut out = Wavefunction1D { grid, amps };
    let loss = (out.norm_sqr() - psi.norm_sqr()).abs();
    if loss > RESOLUTION_TOL {
        return Err(OdbError::Resolution(format!("rescaling changes the norm by {loss:.3e}")));
    }
    out.normalize();
    Ok(out)
}

/// `|<n; omega_ref|psi>|^2` for `n = 0..=n_max`.
pub fn fock_populations(psi: &Wavefunction1D, omega_ref: f64, n_max: usize) -> Vec<f64> {
    let grid = &psi.grid;
    let ratio = omega_ref / grid.scale_frequency;
    let stretch = ratio.sqrt();
    let pre = ratio.powf(0.25);
    let mut overlaps = vec![ZERO; n_max + 1];
    for (&x, a) in grid.xs().iter().zip(&psi.amps) {
        for (n, h) in hermite_functions(n_max, stretch * x).into_iter().enumerate() {
            overlaps[n] += pre * h * a;
        }
    }
    overlaps.iter().map(|o| (o * grid.dx()).norm_sqr()).collect()
}

/// Two-mode wavefunction on a product grid, indexed `i0 * N1 + i1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Wavefunction2D {
    pub grids: [Grid1D; 2],
    pub amps: Vec<Complex64>,
}

impl Wavefunction2D {
    pub fn from_amplitudes(grids: [Grid1D; 2], amps: Vec<Complex64>) -> Result<Self> {
        if amps.len() != grids[0].n_points * grids[1].n_points {
            return Err(OdbError::GridMismatch(format!("{} amplitudes for a {}x{} grid", amps.len(), grids[0].n_points, grids[1].n_points)));
        }
        Ok(Self { grids, amps })
    }

    pub fn product(mode0: &Wavefunction1D, mode1: &Wavefunction1D) -> Self {
        let mut amps = Vec::with_capacity(mode0.amps.len() * mode1.amps.len());
        for a in &mode0.amps {
            amps.extend(mode1.amps.iter().map(|b| a * b));
        }
        Self { grids: [mode0.grid, mode1.grid], amps }
    }

    pub fn cell_area(&self) -> f64 {
        self.grids[0].dx() * self.grids[1].dx()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum::<f64>() * self.cell_area()
    }

    pub fn normalize(&mut self) {
        let s = self.norm_sqr().sqrt();
        self.amps.iter_mut().for_each(|a| *a /= s);
    }

    pub fn inner(&self, other: &Wavefunction2D) -> Result<Complex64> {
        self.grids[0].check_same(&other.grids[0])?;
        self.grids[1].check_same(&other.grids[1])?;
        Ok(self.amps.iter().zip(&other.amps).map(|(a, b)| a.conj() * b).sum::<Complex64>() * self.cell_area())
    }

    /// `sum_j c_j psi_j` over states on the same grid.
    pub fn superpose(terms: &[(Complex64, &Wavefunction2D)]) -> Result<Self> {
        let (_, first) = terms.first().ok_or_else(|| OdbError::Domain("empty superposition".into()))?;
        let mut amps = vec![ZERO; first.amps.len()];
        for (c, psi) in terms {
            psi.grids[0].check_same(&first.grids[0])?;
            psi.grids[1].check_same(&first.grids[1])?;
            amps.iter_mut().zip(&psi.amps).for_each(|(a, b)| *a += c * b);
        }
        Ok(Self { grids: first.grids, amps })
    }

    /// Population of `|n0; omega_ref0>|n1; omega_ref1>`.
    pub fn pair_population(&self, refs: [f64; 2], n: [usize; 2]) -> f64 {
        let f0 = scaled_eigenfunction(n[0], refs[0], &self.grids[0]);
        let f1 = scaled_eigenfunction(n[1], refs[1], &self.grids[1]);
        self.project(&f0, &f1).norm_sqr()
    }

    /// `<f0 f1|psi>` for real mode functions.
    pub fn project(&self, f0: &[f64], f1: &[f64]) -> Complex64 {
        let n1 = self.grids[1].n_points;
        let mut acc = ZERO;
        for (i0, row) in self.amps.chunks_exact(n1).enumerate() {
            let inner: Complex64 = row.iter().zip(f1).map(|(a, b)| a * b).sum();
            acc += f0[i0] * inner;
        }
        acc * self.cell_area()
    }

    pub fn to_matrix(&self) -> DMatrix<Complex64> {
        DMatrix::from_row_slice(self.grids[0].n_points, self.grids[1].n_points, &self.amps)
    }

    pub fn from_matrix(grids: [Grid1D; 2], m: &DMatrix<Complex64>) -> Self {
        let mut amps = Vec::with_capacity(m.len());
        for r in 0..m.nrows() {
            amps.extend(m.row(r).iter());
        }
        Self { grids, amps }
    }
}

/// Precomputed mode functions for repeated population queries.
#[derive(Clone, Debug)]
pub struct PopulationProbe {
    pub refs: [f64; 2],
    /// Sampled mode functions per mode, indexed by phonon number.
    pub functions: [Vec<Vec<f64>>; 2],
}

impl PopulationProbe {
    pub fn new(grids: &[Grid1D; 2], refs: [f64; 2], n_max: usize) -> Self {
        let table = |m: usize| (0..=n_max).map(|n| scaled_eigenfunction(n, refs[m], &grids[m])).collect();
        Self { refs, functions: [table(0), table(1)] }
    }

    pub fn population(&self, psi: &Wavefunction2D, n: [usize; 2]) -> f64 {
        psi.project(&self.functions[0][n[0]], &self.functions[1][n[1]]).norm_sqr()
    }
}

/// Overlap-based agreement between a simulated state and a target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    /// `|<target|psi>|^2`.
    pub overlap_sqr: f64,
    /// `|<target|psi>|`.
    pub overlap_abs: f64,
}

/// Overlap of the normalized states, clamped to `[0, 1]` against rounding.
pub fn fidelity(psi: &Wavefunction2D, target: &Wavefunction2D) -> Result<Fidelity> {
    let scale = (psi.norm_sqr() * target.norm_sqr()).sqrt();
    if !(scale > 0.0) {
        return Err(OdbError::Domain("fidelity of a zero state".into()));
    }
    let abs = (target.inner(psi)?.norm() / scale).min(1.0);
    Ok(Fidelity { overlap_sqr: abs * abs, overlap_abs: abs })
}

/// Position density of one mode with the other integrated out.
pub fn marginal(psi: &Wavefunction2D, mode: usize) -> Result<Vec<f64>> {
    let [g0, g1] = psi.grids;
    match mode {
        0 => Ok(psi
            .amps
            .chunks_exact(g1.n_points)
            .map(|row| row.iter().map(|a| a.norm_sqr()).sum::<f64>() * g1.dx())
            .collect()),
        1 => {
            let mut out = vec![0.0; g1.n_points];
            for row in psi.amps.chunks_exact(g1.n_points) {
                out.iter_mut().zip(row).for_each(|(o, a)| *o += a.norm_sqr());
            }
            out.iter_mut().for_each(|o| *o *= g0.dx());
            Ok(out)
        }
        _ => Err(OdbError::Domain(format!("mode index must be 0 or 1, got {mode}"))),
    }
}

/// L1 distance between two densities on the same grid.
pub fn density_l1(a: &[f64], b: &[f64], dx: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() * dx
}

/// Complete eigenbasis of the oscillator discretized on a grid.
///
/// The Hamiltonian `T + x^2 / 2` uses the same spectral kinetic term as the
/// propagator, so its eigenvectors are the grid's exact phonon-number states.
/// Only the lowest `resolved` of them agree with `n + 1/2`; the rest are grid
/// artefacts, and states must carry negligible weight there.
#[derive(Clone, Debug)]
pub struct FockBasis {
    pub grid: Grid1D,
    /// Orthonormal columns in `n` order; `sum_i v_i^2 = 1`.
    pub vectors: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    /// Number of lowest eigenpairs matching the continuum oscillator.
    pub resolved: usize,
}

impl FockBasis {
    pub fn new(grid: &Grid1D) -> Result<Self> {
        let n = grid.n_points;
        let mut h = grid.kinetic_matrix();
        for (i, x) in grid.xs().into_iter().enumerate() {
            h[(i, i)] += 0.5 * x * x;
        }
        let eig = SymmetricEigen::new(h);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let mut vectors = DMatrix::zeros(n, n);
        let mut eigenvalues = Vec::with_capacity(n);
        let xs = grid.xs();
        let root_dx = grid.dx().sqrt();
        let mut resolved = 0;
        let mut counting = true;
        for (col, &src) in order.iter().enumerate() {
            let mut v = eig.eigenvectors.column(src).into_owned();
            let reference: f64 = xs.iter().zip(v.iter()).map(|(&x, &vi)| hermite_functions(col, x)[col] * vi).sum();
            if reference < 0.0 {
                v.neg_mut();
            }
            let e = eig.eigenvalues[src];
            if counting && (e - (col as f64 + 0.5)).abs() <= BAND_EIGENVALUE_TOL && reference.abs() * root_dx > 0.5 {
                resolved += 1;
            } else {
                counting = false;
            }
            vectors.set_column(col, &v);
            eigenvalues.push(e);
        }
        if resolved == 0 {
            return Err(OdbError::Resolution("grid does not resolve the oscillator ground state".into()));
        }
        Ok(Self { grid: *grid, vectors, eigenvalues, resolved })
    }

    /// Phonon-number amplitudes of a grid state.
    pub fn coefficients(&self, psi: &Wavefunction1D) -> Result<Vec<Complex64>> {
        self.grid.check_same(&psi.grid)?;
        let root_dx = self.grid.dx().sqrt();
        Ok((0..self.grid.n_points)
            .map(|n| self.vectors.column(n).iter().zip(&psi.amps).map(|(v, a)| v * a).sum::<Complex64>() * root_dx)
            .collect())
    }

    /// Weight outside the resolved band.
    pub fn residual(&self, psi: &Wavefunction1D) -> Result<f64> {
        let c = self.coefficients(psi)?;
        Ok(c[self.resolved..].iter().map(|z| z.norm_sqr()).sum::<f64>() / psi.norm_sqr())
    }

    fn check_residual(&self, coeff_weight_above: f64, total: f64, tol: f64) -> Result<()> {
        let residual = coeff_weight_above / total;
        if residual > tol {
            return Err(OdbError::Resolution(format!(
                "state has {residual:.3e} of its weight above the {} resolved phonon levels (limit {tol:.1e})",
                self.resolved
            )));
        }
        Ok(())
    }
}

/// Applies `sum_n e^{-i phi (n + 1/2)} |n><n|` at the grid's scale frequency.
pub fn apply_fock_phase(psi: &Wavefunction1D, basis: &FockBasis, phi: f64, tol: f64) -> Result<Wavefunction1D> {
    let c = basis.coefficients(psi)?;
    let above: f64 = c[basis.resolved..].iter().map(|z| z.norm_sqr()).sum();
    basis.check_residual(above, psi.norm_sqr(), tol)?;
    let root_dx = basis.grid.dx().sqrt();
    let mut amps = vec![ZERO; basis.grid.n_points];
    for (n, cn) in c.iter().enumerate() {
        let w = cn * Complex64::from_polar(1.0, -phi * (n as f64 + 0.5)) / root_dx;
        amps.iter_mut().zip(basis.vectors.column(n).iter()).for_each(|(a, v)| *a += w * v);
    }
    Ok(Wavefunction1D { grid: psi.grid, amps })
}

/// Two-mode phase-shift gate, one angle per mode.
pub fn apply_fock_phase_2d(psi: &Wavefunction2D, bases: [&FockBasis; 2], phi: [f64; 2], tol: f64) -> Result<Wavefunction2D> {
    bases[0].grid.check_same(&psi.grids[0])?;
    bases[1].grid.check_same(&psi.grids[1])?;
    let m = psi.to_matrix();
    let v0 = bases[0].vectors.map(|x| Complex64::new(x, 0.0));
    let v1 = bases[1].vectors.map(|x| Complex64::new(x, 0.0));
    // Phonon-number coefficients, up to the constant cell factor.
    let mut c = v0.transpose() * &m * &v1;
    let total: f64 = c.iter().map(|z| z.norm_sqr()).sum();
    let (r0, r1) = (bases[0].resolved, bases[1].resolved);
    let mut above = 0.0;
    for i in 0..c.nrows() {
        for j in 0..c.ncols() {
            if i >= r0 || j >= r1 {
                above += c[(i, j)].norm_sqr();
            }
        }
    }
    let residual = above / total;
    if residual > tol {
        return Err(OdbError::Resolution(format!(
            "two-mode state has {residual:.3e} of its weight above the resolved phonon levels ({r0}, {r1}; limit {tol:.1e})"
        )));
    }
    for i in 0..c.nrows() {
        for j in 0..c.ncols() {
            c[(i, j)] *= Complex64::from_polar(1.0, -phi[0] * (i as f64 + 0.5) - phi[1] * (j as f64 + 0.5));
        }
    }
    let out = &v0 * c * v1.transpose();
    Ok(Wavefunction2D::from_matrix(psi.grids, &out))
}

/// Writes a two-mode state: little-endian header `u64 n0, u64 n1, f64 L,
/// f64 omega0, f64 omega1`, then interleaved `re, im` pairs, mode 0 major.
pub fn write_state<W: Write>(out: &mut W, psi: &Wavefunction2D) -> Result<()> {
    let [g0, g1] = psi.grids;
    if g0.span != g1.span {
        return Err(OdbError::GridMismatch("state dumps need equal spans on both modes".into()));
    }
    out.write_all(&(g0.n_points as u64).to_le_bytes())?;
    out.write_all(&(g1.n_points as u64).to_le_bytes())?;
    for v in [g0.span, g0.scale_frequency, g1.scale_frequency] {
        out.write_all(&v.to_le_bytes())?;
    }
    for a in &psi.amps {
        out.write_all(&a.re.to_le_bytes())?;
        out.write_all(&a.im.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_state<R: Read>(input: &mut R) -> Result<Wavefunction2D> {
    let mut word = [0u8; 8];
    let mut next = |input: &mut R| -> Result<[u8; 8]> {
        input.read_exact(&mut word)?;
        Ok(word)
    };
    let n0 = u64::from_le_bytes(next(input)?) as usize;
    let n1 = u64::from_le_bytes(next(input)?) as usize;
    let span = f64::from_le_bytes(next(input)?);
    let w0 = f64::from_le_bytes(next(input)?);
    let w1 = f64::from_le_bytes(next(input)?);
    let grids = [Grid1D::new(n0, span, w0)?, Grid1D::new(n1, span, w1)?];
    let mut amps = Vec::with_capacity(n0 * n1);
    for _ in 0..n0 * n1 {
        let re = f64::from_le_bytes(next(input)?);
        let im = f64::from_le_bytes(next(input)?);
        amps.push(Complex64::new(re, im));
    }
    Wavefunction2D::from_amplitudes(grids, amps)
}

/// CSV with header `x,density`.
pub fn write_marginal_csv<W: Write>(out: &mut W, grid: &Grid1D, density: &[f64]) -> Result<()> {
    writeln!(out, "x,density")?;
    for (x, d) in grid.xs().iter().zip(density) {
        writeln!(out, "{x:.10e},{d:.10e}")?;
    }
    Ok(())
}
