//! Single-mode frequency conversion through the Lewis–Riesenfeld invariant.
//!
//! Given a ramp `b(t)` for a conversion `omega_i -> omega_f`, the lowering
//! operator after the ramp is
//!
//! ```text
//! a_f(T) = eta* e^{i Theta} a_i - zeta e^{-i Theta} a_i^dagger
//! Theta  = -int_0^T omega_i / b^2 dt
//! ```
//!
//! with `eta`, `zeta` the Bogoliubov coefficients evaluated from `b(T)` and `b'(T)`.
//! When the ramp meets its smooth boundary conditions the transform reduces to a
//! pure phase `diag(e^{i Theta}, e^{-i Theta})`.

use nalgebra::Matrix2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{OdbError, Result};
use crate::pulses::BProfile;
use crate::quadrature::adaptive_simpson;

/// Absolute tolerance on the dynamical phase in radians.
pub const THETA_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BogoliubovPair {
    pub eta: Complex64,
    pub zeta: Complex64,
}

impl BogoliubovPair {
    /// `|eta|^2 - |zeta|^2`, identically one.
    pub fn constraint(&self) -> f64 {
        self.eta.norm_sqr() - self.zeta.norm_sqr()
    }
}

/// 2x2 transform on `(a, a^dagger)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SingleModeTransform(pub Matrix2<Complex64>);

impl SingleModeTransform {
    pub fn identity() -> Self {
        Self(Matrix2::identity())
    }

    /// Pure phase transform `diag(e^{i theta}, e^{-i theta})`.
    pub fn phase(theta: f64) -> Self {
        Self(Matrix2::new(
            Complex64::from_polar(1.0, theta),
            Complex64::new(0.0, 0.0),
            Complex64::new(0.0, 0.0),
            Complex64::from_polar(1.0, -theta),
        ))
    }

    pub fn matrix(&self) -> &Matrix2<Complex64> {
        &self.0
    }

    /// Largest violation of the Bogoliubov structure: conjugate-pair entries and
    /// `|m00|^2 - |m01|^2 = 1`.
    pub fn structure_error(&self) -> f64 {
        let m = &self.0;
        let pair_a = (m[(1, 1)] - m[(0, 0)].conj()).norm();
        let pair_b = (m[(1, 0)] - m[(0, 1)].conj()).norm();
        let det = (m[(0, 0)].norm_sqr() - m[(0, 1)].norm_sqr() - 1.0).abs();
        pair_a.max(pair_b).max(det)
    }

    /// Largest off-diagonal magnitude.
    pub fn off_diagonal(&self) -> f64 {
        self.0[(0, 1)].norm().max(self.0[(1, 0)].norm())
    }

    /// `self` applied after `first`.
    pub fn then_after(&self, first: &SingleModeTransform) -> SingleModeTransform {
        SingleModeTransform(self.0 * first.0)
    }
}

/// Dynamical phase accumulated over the whole profile.
pub fn theta_phase(profile: &BProfile) -> Result<f64> {
    theta_phase_between(profile, 0.0, profile.duration())
}

/// `-int_{t0}^{t1} omega_i / b^2 dt`.
pub fn theta_phase_between(profile: &BProfile, t0: f64, t1: f64) -> Result<f64> {
    let t_end = profile.duration();
    if !(0.0 <= t0 && t0 <= t1 && t1 <= t_end) {
        return Err(OdbError::Domain(format!("phase window [{t0:e}, {t1:e}] not inside [0, {t_end:e}]")));
    }
    let omega_i = profile.omega_i;
    let integrand = |t: f64| {
        let b = profile.ramp(t).map(|r| r.b).unwrap_or(f64::NAN);
        -omega_i / (b * b)
    };
    let panels = (((t1 - t0) / t_end) * 16.0).ceil() as usize;
    // Keep a margin below the contract tolerance for sums of several windows.
    let value = adaptive_simpson(integrand, t0, t1, 0.1 * THETA_TOL, panels.max(1))?;
    if !value.is_finite() {
        return Err(OdbError::Quadrature("non-finite phase integrand".into()));
    }
    Ok(value)
}

/// Bogoliubov coefficients at time `t` relative to the profile's final frequency.
pub fn bogoliubov_at(profile: &BProfile, t: f64) -> Result<BogoliubovPair> {
    let r = profile.ramp(t)?;
    let wi = profile.omega_i;
    let wf = profile.omega_f;
    let pre = 0.5 * (wi / wf).sqrt();
    let im = -r.bdot / wi;
    let eta = Complex64::new(pre * (1.0 / r.b + wf / wi * r.b), pre * im);
    let zeta = Complex64::new(pre * (1.0 / r.b - wf / wi * r.b), pre * im);
    Ok(BogoliubovPair { eta, zeta })
}

/// Heisenberg transform of the conversion in the final-frequency basis.
pub fn fc_matrix(profile: &BProfile) -> Result<SingleModeTransform> {
    let theta = theta_phase(profile)?;
    fc_matrix_with_theta(profile, theta)
}

/// [`fc_matrix`] with a precomputed phase.
pub fn fc_matrix_with_theta(profile: &BProfile, theta: f64) -> Result<SingleModeTransform> {
    let BogoliubovPair { eta, zeta } = bogoliubov_at(profile, profile.duration())?;
    let ep = Complex64::from_polar(1.0, theta);
    let em = Complex64::from_polar(1.0, -theta);
    Ok(SingleModeTransform(Matrix2::new(
        eta.conj() * ep,
        -zeta * em,
        -zeta.conj() * ep,
        eta * em,
    )))
}

/// Squeeze strength of the basis change between two reference frequencies.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SqueezeParams {
    pub r: f64,
    pub cosh_r: f64,
    pub sinh_r: f64,
}

impl SqueezeParams {
    /// Transform expressing `(a_i, a_i^dagger)` through `(a_f, a_f^dagger)`.
    pub fn basis_change(&self) -> SingleModeTransform {
        let c = Complex64::new(self.cosh_r, 0.0);
        let s = Complex64::new(-self.sinh_r, 0.0);
        SingleModeTransform(Matrix2::new(c, s, s, c))
    }
}

/// `r = ln sqrt(omega_f / omega_i)`.
pub fn squeeze_params(omega_i: f64, omega_f: f64) -> Result<SqueezeParams> {
    if !(omega_i > 0.0 && omega_f > 0.0) {
        return Err(OdbError::Domain(format!("frequencies must be positive, got {omega_i}, {omega_f}")));
    }
    let r = 0.5 * (omega_f / omega_i).ln();
    Ok(SqueezeParams { r, cosh_r: r.cosh(), sinh_r: r.sinh() })
}

/// Conversion expressed in the initial-frequency basis: `a_i(T)` in terms of `(a_i, a_i^dagger)`.
pub fn fc_matrix_initial_basis(profile: &BProfile, theta: f64) -> Result<SingleModeTransform> {
    let BogoliubovPair { eta, zeta } = bogoliubov_at(profile, profile.duration())?;
    let sq = squeeze_params(profile.omega_i, profile.omega_f)?;
    let (c, s) = (sq.cosh_r, sq.sinh_r);
    let ep = Complex64::from_polar(1.0, theta);
    let em = Complex64::from_polar(1.0, -theta);
    let m00 = (eta.conj() * c + zeta.conj() * s) * ep;
    let m01 = -(eta * s + zeta * c) * em;
    Ok(SingleModeTransform(Matrix2::new(m00, m01, m01.conj(), m00.conj())))
}

/// Sampled solution of the Ermakov equation.
#[derive(Clone, Debug, PartialEq)]
pub struct ErmakovTrajectory {
    pub t: Vec<f64>,
    pub b: Vec<f64>,
    pub bdot: Vec<f64>,
    /// Step actually used for the reported samples.
    pub dt: f64,
    /// Largest `|b|` difference against the half-step solution.
    pub halving_error: f64,
}

/// Acceptable `|b|` disagreement between the dt and dt/2 solutions.
pub const ERMAKOV_HALVING_TOL: f64 = 1e-9;

/// Integrates `b'' + omega(t)^2 b = omega_i^2 / b^3` from `b = 1`, `b' = 0`.
///
/// Classical RK4 at fixed step. The run is repeated at half step and rejected
/// if the two disagree by more than [`ERMAKOV_HALVING_TOL`]. With `dt = None`
/// the step defaults to 1/200 of the shortest sampled period.
pub fn ermakov_forward_solve<F>(omega_fn: F, omega_i: f64, duration: f64, dt: Option<f64>) -> Result<ErmakovTrajectory>
where
    F: Fn(f64) -> f64,
{
    ermakov_solve_from(omega_fn, omega_i, duration, (1.0, 0.0), dt)
}

/// [`ermakov_forward_solve`] from arbitrary initial `(b, b')`.
pub fn ermakov_solve_from<F>(
    omega_fn: F,
    omega_i: f64,
    duration: f64,
    initial: (f64, f64),
    dt: Option<f64>,
) -> Result<ErmakovTrajectory>
where
    F: Fn(f64) -> f64,
{
    if !(duration > 0.0 && omega_i > 0.0) {
        return Err(OdbError::Domain("duration and omega_i must be positive".into()));
    }
    let dt = match dt {
        Some(dt) if dt > 0.0 => dt,
        Some(dt) => return Err(OdbError::Domain(format!("step must be positive, got {dt}"))),
        None => {
            let omega_max = (0..=1000)
                .map(|k| omega_fn(duration * k as f64 / 1000.0))
                .fold(omega_i, f64::max);
            2.0 * std::f64::consts::PI / omega_max / 200.0
        }
    };
    let steps = (duration / dt).ceil().max(1.0) as usize;
    let coarse = rk4_ermakov(&omega_fn, omega_i, duration, initial, steps);
    let fine = rk4_ermakov(&omega_fn, omega_i, duration, initial, 2 * steps);
    let mut halving_error = 0.0f64;
    for (k, &b) in coarse.1.iter().enumerate() {
        let diff = (b - fine.1[2 * k]).abs();
        if !diff.is_finite() {
            halving_error = f64::INFINITY;
            break;
        }
        halving_error = halving_error.max(diff);
    }
    if halving_error > ERMAKOV_HALVING_TOL {
        return Err(OdbError::Convergence(format!(
            "Ermakov solution changes by {halving_error:.3e} when halving dt = {:.3e} s",
            duration / steps as f64
        )));
    }
    let h = duration / steps as f64;
    Ok(ErmakovTrajectory {
        t: (0..=steps).map(|k| k as f64 * h).collect(),
        b: (0..=steps).map(|k| fine.1[2 * k]).collect(),
        bdot: (0..=steps).map(|k| fine.2[2 * k]).collect(),
        dt: h,
        halving_error,
    })
}

#[allow(clippy::type_complexity)]
fn rk4_ermakov<F>(omega_fn: &F, omega_i: f64, duration: f64, initial: (f64, f64), steps: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>)
where
    F: Fn(f64) -> f64,
{
    let h = duration / steps as f64;
    let wi2 = omega_i * omega_i;
    let accel = |t: f64, b: f64| {
        let w = omega_fn(t);
        -w * w * b + wi2 / (b * b * b)
    };
    let mut ts = Vec::with_capacity(steps + 1);
    let mut bs = Vec::with_capacity(steps + 1);
    let mut vs = Vec::with_capacity(steps + 1);
    let (mut b, mut v) = initial;
    ts.push(0.0);
    bs.push(b);
    vs.push(v);
    for k in 0..steps {
        let t = k as f64 * h;
        let k1b = v;
        let k1v = accel(t, b);
        let k2b = v + 0.5 * h * k1v;
        let k2v = accel(t + 0.5 * h, b + 0.5 * h * k1b);
        let k3b = v + 0.5 * h * k2v;
        let k3v = accel(t + 0.5 * h, b + 0.5 * h * k2b);
        let k4b = v + h * k3v;
        let k4v = accel(t + h, b + h * k3b);
        b += h / 6.0 * (k1b + 2.0 * k2b + 2.0 * k3b + k4b);
        v += h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
        ts.push((k + 1) as f64 * h);
        bs.push(b);
        vs.push(v);
    }
    (ts, bs, vs)
}
