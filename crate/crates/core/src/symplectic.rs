//! Two-mode Heisenberg-picture transforms on `(a0, a0^dagger, a1, a1^dagger)`.
//!
//! Matrices compose in the same order as the Schrodinger operators they
//! represent: if `U = U2 U1` then `M(U) = M(U2) * M(U1)`.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Matrix2, Matrix4};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{OdbError, Result};
use crate::lewis_riesenfeld::SingleModeTransform;
use crate::units::{wrap_phase, ELEMENTARY_CHARGE, VACUUM_PERMITTIVITY};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

fn metric() -> Matrix4<Complex64> {
    Matrix4::from_diagonal(&nalgebra::Vector4::new(
        Complex64::new(1.0, 0.0),
        Complex64::new(-1.0, 0.0),
        Complex64::new(1.0, 0.0),
        Complex64::new(-1.0, 0.0),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TwoModeTransform(pub Matrix4<Complex64>);

impl TwoModeTransform {
    pub fn identity() -> Self {
        Self(Matrix4::identity())
    }

    pub fn matrix(&self) -> &Matrix4<Complex64> {
        &self.0
    }

    /// `self` applied after `first`.
    pub fn then_after(&self, first: &TwoModeTransform) -> TwoModeTransform {
        Self(self.0 * first.0)
    }

    /// Max entry of `M g M^dagger - g` with `g = diag(1, -1, 1, -1)`.
    pub fn metric_error(&self) -> f64 {
        let g = metric();
        (self.0 * g * self.0.adjoint() - g).iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Max violation of the conjugate pairing between `a` and `a^dagger` rows.
    pub fn pairing_error(&self) -> f64 {
        let m = &self.0;
        let mut worst = 0.0f64;
        for j in 0..2 {
            for k in 0..2 {
                let (r, c) = (2 * j, 2 * k);
                worst = worst
                    .max((m[(r + 1, c + 1)] - m[(r, c)].conj()).norm())
                    .max((m[(r + 1, c)] - m[(r, c + 1)].conj()).norm());
            }
        }
        worst
    }

    /// Largest coefficient mixing annihilation with creation operators.
    pub fn active_part(&self) -> f64 {
        let m = &self.0;
        let mut worst = 0.0f64;
        for r in [0, 2] {
            for c in [1, 3] {
                worst = worst.max(m[(r, c)].norm());
            }
        }
        worst
    }

    /// Annihilation-operator block `S` with `a_j -> sum_k S_jk a_k`.
    pub fn annihilation_block(&self) -> Matrix2<Complex64> {
        let m = &self.0;
        Matrix2::new(m[(0, 0)], m[(0, 2)], m[(2, 0)], m[(2, 2)])
    }

    pub fn to_dump(&self) -> MatrixDump {
        MatrixDump {
            rows: 4,
            cols: 4,
            data: (0..4).map(|r| (0..4).map(|c| [self.0[(r, c)].re, self.0[(r, c)].im]).collect()).collect(),
        }
    }

    pub fn from_dump(dump: &MatrixDump) -> Result<Self> {
        if dump.rows != 4 || dump.cols != 4 || dump.data.len() != 4 || dump.data.iter().any(|r| r.len() != 4) {
            return Err(OdbError::Domain("two-mode transform dump must be 4x4".into()));
        }
        Ok(Self(Matrix4::from_fn(|r, c| Complex64::new(dump.data[r][c][0], dump.data[r][c][1]))))
    }
}

/// Row-major matrix with `[re, im]` entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixDump {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Vec<[f64; 2]>>,
}

/// Resonant exchange for a time `T_B` with `theta = kappa T_B / 2`.
pub fn bs_matrix(theta: f64) -> TwoModeTransform {
    let c = Complex64::new(theta.cos(), 0.0);
    let s = Complex64::new(0.0, theta.sin());
    #[rustfmt::skip]
    let m = Matrix4::new(
        c,    ZERO, -s,   ZERO,
        ZERO, c,    ZERO, s,
        -s,   ZERO, c,    ZERO,
        ZERO, s,    ZERO, c,
    );
    TwoModeTransform(m)
}

/// `diag(e^{-i phi0}, e^{i phi0}, e^{-i phi1}, e^{i phi1})`.
pub fn ps_matrix(phi0: f64, phi1: f64) -> TwoModeTransform {
    TwoModeTransform(Matrix4::from_diagonal(&nalgebra::Vector4::new(
        Complex64::from_polar(1.0, -phi0),
        Complex64::from_polar(1.0, phi0),
        Complex64::from_polar(1.0, -phi1),
        Complex64::from_polar(1.0, phi1),
    )))
}

/// Block-diagonal embedding of two single-mode transforms.
pub fn fc_block(s0: &SingleModeTransform, s1: &SingleModeTransform) -> TwoModeTransform {
    let mut m = Matrix4::zeros();
    m.fixed_view_mut::<2, 2>(0, 0).copy_from(&s0.0);
    m.fixed_view_mut::<2, 2>(2, 2).copy_from(&s1.0);
    TwoModeTransform(m)
}

/// Timing and phase data shared by the gate-level formulas.
///
/// Mode 0 is stored at the high frequency, mode 1 at the low one; both meet
/// at the gate frequency for the exchange.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateTiming {
    /// Dynamical phase of the high <-> gate conversion (negative).
    pub theta_hm: f64,
    /// Dynamical phase of the low <-> gate conversion (negative).
    pub theta_lm: f64,
    pub omega_m: f64,
    pub omega_h: f64,
    pub omega_l: f64,
    /// Exchange hold time in seconds.
    pub t_b: f64,
    /// Total gate time `2 T_FC + T_B` in seconds.
    pub t3: f64,
}

impl GateTiming {
    /// Output phase-shift angles (unwrapped) in the interaction frame.
    fn output_phases(&self) -> (f64, f64) {
        (
            -self.theta_hm + self.omega_m * self.t_b - self.omega_h * self.t3,
            -self.theta_lm + self.omega_m * self.t_b - self.omega_l * self.t3,
        )
    }
}

/// Full gate in the interaction frame of the memory frequencies.
pub fn odb_matrix(theta: f64, timing: &GateTiming) -> TwoModeTransform {
    let (out0, out1) = timing.output_phases();
    let input = ps_matrix(-timing.theta_hm, -timing.theta_lm);
    let output = ps_matrix(wrap_phase(out0), wrap_phase(out1));
    output.then_after(&bs_matrix(theta).then_after(&input))
}

/// Phases of the two-phonon components after a 50:50 gate on `|1>|1>`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HomPhases {
    /// Both phonons in mode 1 (`|2>_1 |0>_0`), wrapped.
    pub both_in_mode1: f64,
    /// Both phonons in mode 0 (`|0>_1 |2>_0`), wrapped.
    pub both_in_mode0: f64,
    pub raw_both_in_mode1: f64,
    pub raw_both_in_mode0: f64,
}

pub fn hom_target_phases(t: &GateTiming) -> HomPhases {
    let common = -3.0 * t.omega_m * t.t_b + 1.5 * (t.theta_hm + t.theta_lm);
    let raw1 = 0.5 * t.theta_hm + 2.5 * t.theta_lm + (0.5 * t.omega_h + 2.5 * t.omega_l) * t.t3 + common;
    let raw0 = 2.5 * t.theta_hm + 0.5 * t.theta_lm + (2.5 * t.omega_h + 0.5 * t.omega_l) * t.t3 + common;
    HomPhases {
        both_in_mode1: wrap_phase(raw1),
        both_in_mode0: wrap_phase(raw0),
        raw_both_in_mode1: raw1,
        raw_both_in_mode0: raw0,
    }
}

/// Residual phase-shift angles after a full exchange.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwapPhases {
    pub mode0: f64,
    pub mode1: f64,
    pub raw_mode0: f64,
    pub raw_mode1: f64,
}

pub fn swap_phases(t: &GateTiming) -> SwapPhases {
    let base = -(t.theta_hm + t.theta_lm) + t.omega_m * t.t_b + FRAC_PI_2;
    let raw0 = base - t.omega_h * t.t3;
    let raw1 = base - t.omega_l * t.t3;
    SwapPhases { mode0: wrap_phase(raw0), mode1: wrap_phase(raw1), raw_mode0: raw0, raw_mode1: raw1 }
}

/// Coulomb exchange rate `e^2 / (4 pi eps0 d^3 m omega)` in rad/s.
pub fn kappa_from_geometry(distance: f64, mass: f64, omega: f64) -> Result<f64> {
    if !(distance > 0.0 && mass > 0.0 && omega > 0.0) {
        return Err(OdbError::Domain(format!(
            "geometry must be positive: d = {distance:e}, m = {mass:e}, omega = {omega:e}"
        )));
    }
    Ok(ELEMENTARY_CHARGE.powi(2) / (4.0 * PI * VACUUM_PERMITTIVITY * distance.powi(3) * mass * omega))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrequencyLabel {
    High,
    Low,
    Gate,
    Prime,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChainScheme {
    TwoFrequency,
    ThreeFrequency,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResonantPair {
    pub j: usize,
    pub k: usize,
    /// Residual exchange rate in rad/s.
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainLayout {
    pub scheme: ChainScheme,
    pub labels: Vec<FrequencyLabel>,
    pub resonant_pairs: Vec<ResonantPair>,
    pub kappa_nn: f64,
}

impl ChainLayout {
    pub fn mode_count(&self) -> usize {
        self.labels.len()
    }
}

/// Assigns idle frequencies along a chain and lists same-frequency pairs.
pub fn plan_chain(mode_count: usize, scheme: ChainScheme, kappa_nn: f64) -> Result<ChainLayout> {
    if mode_count < 2 {
        return Err(OdbError::Domain(format!("a chain needs at least two modes, got {mode_count}")));
    }
    if !(kappa_nn >= 0.0) {
        return Err(OdbError::Domain(format!("nearest-neighbour rate must be non-negative, got {kappa_nn}")));
    }
    let cycle: &[FrequencyLabel] = match scheme {
        ChainScheme::TwoFrequency => &[FrequencyLabel::High, FrequencyLabel::Low],
        ChainScheme::ThreeFrequency => &[FrequencyLabel::High, FrequencyLabel::Low, FrequencyLabel::Prime],
    };
    let labels: Vec<_> = (0..mode_count).map(|j| cycle[j % cycle.len()]).collect();
    let mut resonant_pairs = Vec::new();
    for j in 0..mode_count {
        for k in j + 1..mode_count {
            if labels[j] == labels[k] {
                resonant_pairs.push(ResonantPair { j, k, rate: kappa_nn / ((k - j) as f64).powi(3) });
            }
        }
    }
    Ok(ChainLayout { scheme, labels, resonant_pairs, kappa_nn })
}

/// Amplitudes of a two-mode state truncated at `n_max` phonons per mode,
/// indexed `n0 * (n_max + 1) + n1`.
#[derive(Clone, Debug, PartialEq)]
pub struct FockAmplitudes {
    pub n_max: usize,
    pub amps: Vec<Complex64>,
}

impl FockAmplitudes {
    pub fn zeros(n_max: usize) -> Self {
        Self { n_max, amps: vec![ZERO; (n_max + 1) * (n_max + 1)] }
    }

    pub fn basis(n_max: usize, n0: usize, n1: usize) -> Self {
        let mut s = Self::zeros(n_max);
        *s.get_mut(n0, n1) = Complex64::new(1.0, 0.0);
        s
    }

    pub fn get(&self, n0: usize, n1: usize) -> Complex64 {
        self.amps[n0 * (self.n_max + 1) + n1]
    }

    pub fn get_mut(&mut self, n0: usize, n1: usize) -> &mut Complex64 {
        &mut self.amps[n0 * (self.n_max + 1) + n1]
    }

    pub fn overlap(&self, other: &FockAmplitudes) -> Complex64 {
        self.amps.iter().zip(&other.amps).map(|(a, b)| a.conj() * b).sum()
    }
}

/// Applies a passive transform to a Fock-space state.
///
/// Uses `U a_k^dagger U^dagger = sum_j S_jk a_j^dagger`. The vacuum is mapped
/// to itself, so zero-point phases of the physical operator are not included.
/// Output components beyond `n_max` in either mode are dropped, so `n_max`
/// should be at least the largest total phonon number present in the input.
pub fn apply_to_fock(transform: &TwoModeTransform, state: &FockAmplitudes) -> Result<FockAmplitudes> {
    if transform.active_part() > 1e-9 {
        return Err(OdbError::Domain(format!(
            "transform mixes creation and annihilation operators ({:.3e}); Fock action needs a passive map",
            transform.active_part()
        )));
    }
    let s = transform.annihilation_block();
    let n_max = state.n_max;
    let fact = factorials(2 * n_max + 1);
    let mut out = FockAmplitudes::zeros(n_max);
    for n0 in 0..=n_max {
        for n1 in 0..=n_max {
            let c = state.get(n0, n1);
            if c == ZERO {
                continue;
            }
            // (s00 a0' + s10 a1')^n0 (s01 a0' + s11 a1')^n1 |0> / sqrt(n0! n1!)
            let norm = c / (fact[n0] * fact[n1]).sqrt();
            for p in 0..=n0 {
                let tp = binomial(&fact, n0, p) * s[(0, 0)].powu(p as u32) * s[(1, 0)].powu((n0 - p) as u32);
                for q in 0..=n1 {
                    let tq = binomial(&fact, n1, q) * s[(0, 1)].powu(q as u32) * s[(1, 1)].powu((n1 - q) as u32);
                    let m0 = p + q;
                    let m1 = (n0 - p) + (n1 - q);
                    if m0 > n_max || m1 > n_max {
                        continue;
                    }
                    *out.get_mut(m0, m1) += norm * tp * tq * (fact[m0] * fact[m1]).sqrt();
                }
            }
        }
    }
    Ok(out)
}

fn factorials(n: usize) -> Vec<f64> {
    let mut f = vec![1.0; n + 1];
    for k in 1..=n {
        f[k] = f[k - 1] * k as f64;
    }
    f
}

fn binomial(fact: &[f64], n: usize, k: usize) -> f64 {
    fact[n] / (fact[k] * fact[n - k])
}
