//! Error-function ramps for frequency conversion.
//!
//! A conversion from `omega_i` to `omega_f` is designed through the scaling
//! function `b(t)` of the Ermakov equation. The two ramps used here are
//!
//! ```text
//! up:   b(t) = 1 - g s(t)      down: b(t) = 1 + g s(t)
//! s(t) = (1 + erf[(t/T - 1/2) sigma]) / 2
//! ```
//!
//! and the physical frequency follows from `omega^2 = (omega_i^2 / b^3 - b'') / b`.
//! All derivatives are closed form.

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{OdbError, Result};

const FRAC_1_SQRT_PI: f64 = 0.564_189_583_547_756_3;

/// Relative slack allowed on the time domain `[0, T]` for round-off in callers.
const DOMAIN_SLACK: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Frequency increases, `b` decreases from 1.
    Up,
    /// Frequency decreases, `b` increases from 1.
    Down,
}

impl Direction {
    fn sign(self) -> f64 {
        match self {
            Direction::Up => -1.0,
            Direction::Down => 1.0,
        }
    }
}

/// Parameters of one erf ramp.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RampShape {
    /// Dimensionless amplitude.
    pub g: f64,
    /// Dimensionless erf width.
    pub sigma: f64,
    /// Ramp duration in seconds.
    pub duration: f64,
    pub direction: Direction,
}

impl RampShape {
    pub fn new(g: f64, sigma: f64, duration: f64, direction: Direction) -> Result<Self> {
        if !(duration > 0.0) {
            return Err(OdbError::Domain(format!("ramp duration must be positive, got {duration}")));
        }
        if !(sigma > 0.0) {
            return Err(OdbError::Domain(format!("ramp sigma must be positive, got {sigma}")));
        }
        // b = 1 - g s reaches 1 - g for the up ramp, 1 + g for the down ramp.
        let g_max = match direction {
            Direction::Up => 1.0,
            Direction::Down => 2.0,
        };
        if !(0.0..g_max).contains(&g) {
            return Err(OdbError::Domain(format!(
                "ramp amplitude g = {g} outside [0, {g_max}) for a {direction:?} ramp"
            )));
        }
        Ok(Self { g, sigma, duration, direction })
    }

    fn check_time(&self, t: f64) -> Result<f64> {
        let slack = DOMAIN_SLACK * self.duration;
        if !(t >= -slack && t <= self.duration + slack) {
            return Err(OdbError::Domain(format!(
                "t = {t:e} s outside ramp window [0, {:e}] s",
                self.duration
            )));
        }
        Ok(t.clamp(0.0, self.duration))
    }

    /// Normalized ramp `s(t)` with its first and second time derivatives.
    fn normalized(&self, t: f64) -> (f64, f64, f64) {
        let rate = self.sigma / self.duration;
        let u = (t / self.duration - 0.5) * self.sigma;
        let gauss = (-u * u).exp();
        // (1 + erf u) / 2 written through erfc to keep the tails accurate.
        let s = 0.5 * erfc(-u);
        let sdot = FRAC_1_SQRT_PI * gauss * rate;
        let sddot = -2.0 * u * FRAC_1_SQRT_PI * gauss * rate * rate;
        (s, sdot, sddot)
    }
}

/// `b` and its first two time derivatives at one instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RampValue {
    pub b: f64,
    pub bdot: f64,
    pub bddot: f64,
}

/// Evaluates `f_u(g, t)` or `f_d(g, t)` depending on the ramp direction.
pub fn eval_ramp(shape: &RampShape, t: f64) -> Result<f64> {
    Ok(eval_ramp_derivatives(shape, t)?.b)
}

/// Same as [`eval_ramp`] but also returns the analytic derivatives.
pub fn eval_ramp_derivatives(shape: &RampShape, t: f64) -> Result<RampValue> {
    let t = shape.check_time(t)?;
    let (s, sdot, sddot) = shape.normalized(t);
    let k = shape.direction.sign() * shape.g;
    Ok(RampValue { b: 1.0 + k * s, bdot: k * sdot, bddot: k * sddot })
}

/// A frequency-conversion ramp from `omega_i` to `omega_f`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BProfile {
    pub shape: RampShape,
    pub omega_i: f64,
    pub omega_f: f64,
}

/// Builds the erf ramp whose endpoints are `b = 1` and `b = sqrt(omega_i / omega_f)`.
pub fn make_b_profile(omega_i: f64, omega_f: f64, t_fc: f64, sigma: f64) -> Result<BProfile> {
    if !(omega_i > 0.0 && omega_f > 0.0) {
        return Err(OdbError::Domain(format!(
            "frequencies must be positive, got omega_i = {omega_i}, omega_f = {omega_f}"
        )));
    }
    if omega_i == omega_f {
        return Err(OdbError::DegenerateRamp(omega_i));
    }
    let ratio = (omega_i / omega_f).sqrt();
    let (g, direction) = if omega_i < omega_f {
        (1.0 - ratio, Direction::Up)
    } else {
        (ratio - 1.0, Direction::Down)
    };
    let shape = RampShape::new(g, sigma, t_fc, direction)?;
    Ok(BProfile { shape, omega_i, omega_f })
}

impl BProfile {
    /// A zero-amplitude profile (`b = 1`), i.e. a hold at `omega`.
    pub fn identity(omega: f64, duration: f64, sigma: f64) -> Result<Self> {
        let shape = RampShape::new(0.0, sigma, duration, Direction::Up)?;
        Ok(Self { shape, omega_i: omega, omega_f: omega })
    }

    pub fn duration(&self) -> f64 {
        self.shape.duration
    }

    /// Profile of the conversion run in the opposite direction with the same `T` and `sigma`.
    pub fn reversed(&self) -> Result<Self> {
        if self.omega_i == self.omega_f {
            return Ok(*self);
        }
        make_b_profile(self.omega_f, self.omega_i, self.shape.duration, self.shape.sigma)
    }

    pub fn ramp(&self, t: f64) -> Result<RampValue> {
        eval_ramp_derivatives(&self.shape, t)
    }

    /// Target value `b(T) = sqrt(omega_i / omega_f)`.
    pub fn b_final(&self) -> f64 {
        (self.omega_i / self.omega_f).sqrt()
    }

    /// Induced `omega^2(t)`, possibly negative for an unrealizable ramp.
    pub fn omega_sq(&self, t: f64) -> Result<f64> {
        let r = self.ramp(t)?;
        Ok(induced_omega_sq(self.omega_i, r))
    }

    pub fn omega(&self, t: f64) -> Result<f64> {
        omega_of_t(self, t)
    }
}

fn induced_omega_sq(omega_i: f64, r: RampValue) -> f64 {
    (omega_i * omega_i / (r.b * r.b * r.b) - r.bddot) / r.b
}

/// Physical frequency `omega(t)` induced by the profile.
pub fn omega_of_t(profile: &BProfile, t: f64) -> Result<f64> {
    let r = profile.ramp(t)?;
    let w2 = induced_omega_sq(profile.omega_i, r);
    if w2 < 0.0 {
        return Err(OdbError::UnrealizablePulse { t, omega_sq: w2 });
    }
    Ok(w2.sqrt())
}

/// Boundary residuals and realizability of a sampled profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileValidation {
    /// `|b(0) - 1|`
    pub b_start: f64,
    /// `|b'(0)| T`
    pub bdot_start: f64,
    /// `|b(T) - sqrt(omega_i/omega_f)|`
    pub b_end: f64,
    /// `|b'(T)| T`
    pub bdot_end: f64,
    /// Smallest sampled `omega^2` in rad^2/s^2.
    pub min_omega_sq: f64,
    pub tolerance: f64,
    pub samples: usize,
    pub failures: Vec<String>,
}

impl ProfileValidation {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    /// Largest of the four boundary residuals.
    pub fn max_boundary_residual(&self) -> f64 {
        self.b_start.max(self.bdot_start).max(self.b_end).max(self.bdot_end)
    }
}

pub const DEFAULT_BOUNDARY_TOL: f64 = 1e-3;
pub const DEFAULT_PROFILE_SAMPLES: usize = 1000;

/// [`validate_profile_with`] at the default sampling density.
pub fn validate_profile(profile: &BProfile, boundary_tol: f64) -> ProfileValidation {
    validate_profile_with(profile, boundary_tol, DEFAULT_PROFILE_SAMPLES)
}

pub fn validate_profile_with(profile: &BProfile, boundary_tol: f64, samples: usize) -> ProfileValidation {
    let t_end = profile.duration();
    // endpoints are inside the domain by construction
    let start = profile.ramp(0.0).expect("t = 0 is in range");
    let end = profile.ramp(t_end).expect("t = T is in range");
    let b_start = (start.b - 1.0).abs();
    let bdot_start = start.bdot.abs() * t_end;
    let b_end = (end.b - profile.b_final()).abs();
    let bdot_end = end.bdot.abs() * t_end;

    let samples = samples.max(2);
    let min_omega_sq = (0..samples)
        .map(|k| t_end * k as f64 / (samples - 1) as f64)
        .map(|t| profile.omega_sq(t).expect("sample in range"))
        .fold(f64::INFINITY, f64::min);

    let mut failures = Vec::new();
    for (name, value) in [
        ("b(0) - 1", b_start),
        ("b'(0) T", bdot_start),
        ("b(T) - sqrt(omega_i/omega_f)", b_end),
        ("b'(T) T", bdot_end),
    ] {
        if value > boundary_tol {
            failures.push(format!("|{name}| = {value:.3e} exceeds {boundary_tol:.1e}"));
        }
    }
    if min_omega_sq < 0.0 {
        failures.push(format!("omega^2 reaches {min_omega_sq:.3e} < 0"));
    }
    ProfileValidation {
        b_start,
        bdot_start,
        b_end,
        bdot_end,
        min_omega_sq,
        tolerance: boundary_tol,
        samples,
        failures,
    }
}

/// Midpoint slope `omega'(T/2)` using `omega ~ omega_i / b^2` where `b'' = 0`.
fn midpoint_omega_and_rate(profile: &BProfile) -> (f64, f64) {
    let shape = &profile.shape;
    let k = shape.direction.sign() * shape.g;
    let b = 1.0 + 0.5 * k;
    let bdot = k * shape.sigma * FRAC_1_SQRT_PI / shape.duration;
    let omega = profile.omega_i / (b * b);
    let omega_dot = -2.0 * profile.omega_i * bdot / (b * b * b);
    (omega, omega_dot)
}

/// Adiabaticity figure `n |omega'| / (8 omega^2)` at the ramp midpoint.
pub fn adiabaticity_metric(profile: &BProfile, n: u32) -> f64 {
    let (omega, omega_dot) = midpoint_omega_and_rate(profile);
    n as f64 * omega_dot.abs() / (8.0 * omega * omega)
}

/// Small-`g` form of the adiabaticity figure, `|g| sigma n / (4 sqrt(pi) omega(T/2) T)`.
pub fn adiabaticity_small_g(profile: &BProfile, n: u32) -> f64 {
    let (omega, _) = midpoint_omega_and_rate(profile);
    let shape = &profile.shape;
    shape.g.abs() * shape.sigma * FRAC_1_SQRT_PI * n as f64 / (4.0 * omega * shape.duration)
}

/// Number of oscillation cycles at the midpoint frequency within the ramp.
pub fn cycle_count(profile: &BProfile) -> f64 {
    let (omega, _) = midpoint_omega_and_rate(profile);
    omega * profile.duration() / (2.0 * PI)
}

/// Writes sampled ramps as CSV.
///
/// Columns: `ramp,t[s],b,bdot,bddot,omega[rad/s]`; one block of `samples` rows per profile.
pub fn write_profiles_csv<W: Write>(out: &mut W, profiles: &[(&str, &BProfile)], samples: usize) -> Result<()> {
    writeln!(out, "ramp,t[s],b,bdot,bddot,omega[rad/s]")?;
    let samples = samples.max(2);
    for (label, profile) in profiles {
        let t_end = profile.duration();
        for k in 0..samples {
            let t = t_end * k as f64 / (samples - 1) as f64;
            let r = profile.ramp(t)?;
            let w = omega_of_t(profile, t)?;
            writeln!(out, "{label},{t:.9e},{:.15e},{:.15e},{:.15e},{w:.15e}", r.b, r.bdot, r.bddot)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_PI: f64 = 2.0 * PI;

    fn nominal_down() -> BProfile {
        make_b_profile(TWO_PI * 2.64e6, TWO_PI * 2.42e6, 4e-6, 6.0).unwrap()
    }

    fn nominal_up() -> BProfile {
        make_b_profile(TWO_PI * 2.20e6, TWO_PI * 2.42e6, 4e-6, 6.0).unwrap()
    }

    #[test]
    fn zero_amplitude_ramp_is_identity() {
        let shape = RampShape::new(0.0, 6.0, 4e-6, Direction::Up).unwrap();
        for k in 0..=10 {
            let t = 4e-6 * k as f64 / 10.0;
            assert_eq!(eval_ramp(&shape, t).unwrap(), 1.0);
        }
    }

    #[test]
    fn midpoint_values_are_exact() {
        let up = RampShape::new(0.2, 6.0, 4e-6, Direction::Up).unwrap();
        let down = RampShape::new(0.2, 6.0, 4e-6, Direction::Down).unwrap();
        assert_eq!(eval_ramp(&up, 2e-6).unwrap(), 0.9);
        assert_eq!(eval_ramp(&down, 2e-6).unwrap(), 1.1);
    }

    #[test]
    fn out_of_range_time_is_rejected() {
        let shape = RampShape::new(0.2, 6.0, 4e-6, Direction::Up).unwrap();
        assert!(matches!(eval_ramp(&shape, -1e-7), Err(OdbError::Domain(_))));
        assert!(matches!(eval_ramp(&shape, 4.1e-6), Err(OdbError::Domain(_))));
    }

    #[test]
    fn invalid_shapes_are_rejected() {
        assert!(RampShape::new(0.1, 0.0, 1.0, Direction::Up).is_err());
        assert!(RampShape::new(0.1, 1.0, 0.0, Direction::Up).is_err());
        assert!(RampShape::new(1.0, 1.0, 1.0, Direction::Up).is_err());
        assert!(RampShape::new(1.5, 1.0, 1.0, Direction::Down).is_ok());
        assert!(RampShape::new(2.0, 1.0, 1.0, Direction::Down).is_err());
    }

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        let p = nominal_down();
        let h = 1e-11;
        for t in [0.7e-6, 2e-6, 3.1e-6] {
            let r = p.ramp(t).unwrap();
            let plus = p.ramp(t + h).unwrap();
            let minus = p.ramp(t - h).unwrap();
            let fd1 = (plus.b - minus.b) / (2.0 * h);
            let fd2 = (plus.bdot - minus.bdot) / (2.0 * h);
            assert!((fd1 - r.bdot).abs() <= 1e-6 * r.bdot.abs().max(1.0), "{fd1} vs {}", r.bdot);
            assert!((fd2 - r.bddot).abs() <= 1e-5 * r.bddot.abs().max(1e6), "{fd2} vs {}", r.bddot);
        }
    }

    #[test]
    fn nominal_profiles_hit_their_endpoints() {
        let down = nominal_down();
        assert_eq!(down.shape.direction, Direction::Down);
        assert!((down.b_final() - (2.64f64 / 2.42).sqrt()).abs() < 1e-15);
        assert!((down.ramp(4e-6).unwrap().b - 1.044_47).abs() < 1e-5);

        let up = nominal_up();
        assert_eq!(up.shape.direction, Direction::Up);
        assert!((up.ramp(4e-6).unwrap().b - 0.953_46).abs() < 1e-5);
    }

    #[test]
    fn equal_frequencies_are_degenerate() {
        assert!(matches!(
            make_b_profile(1e7, 1e7, 4e-6, 6.0),
            Err(OdbError::DegenerateRamp(_))
        ));
    }

    #[test]
    fn induced_frequency_endpoints() {
        // The erf tail at sigma/2 = 3 leaves a relative offset of about 1.06e-6 (down)
        // and 1.14e-6 (up) at the endpoints.
        for (p, w0, w1) in [(nominal_down(), 2.64e6, 2.42e6), (nominal_up(), 2.20e6, 2.42e6)] {
            let start = omega_of_t(&p, 0.0).unwrap() / (TWO_PI * w0) - 1.0;
            let end = omega_of_t(&p, 4e-6).unwrap() / (TWO_PI * w1) - 1.0;
            assert!(start.abs() < 1.5e-6, "start offset {start:e}");
            assert!(end.abs() < 1.5e-6, "end offset {end:e}");
        }
        let flat = BProfile::identity(TWO_PI * 2.42e6, 4e-6, 6.0).unwrap();
        for t in [0.0, 1e-6, 4e-6] {
            assert_eq!(omega_of_t(&flat, t).unwrap(), TWO_PI * 2.42e6);
        }
    }

    #[test]
    fn fast_large_ramp_is_unrealizable() {
        let p = make_b_profile(1.0, 4.0, 0.5, 6.0).unwrap();
        let v = validate_profile(&p, 1e-3);
        assert!(v.min_omega_sq < 0.0);
        assert!(!v.passed());
        let bad_t = (0..1000)
            .map(|k| 0.5 * k as f64 / 999.0)
            .find(|&t| p.omega_sq(t).unwrap() < 0.0)
            .unwrap();
        match omega_of_t(&p, bad_t) {
            Err(OdbError::UnrealizablePulse { t, .. }) => assert_eq!(t, bad_t),
            other => panic!("expected unrealizable pulse, got {other:?}"),
        }
    }

    #[test]
    fn validation_reports() {
        let v = validate_profile(&nominal_down(), DEFAULT_BOUNDARY_TOL);
        assert!(v.passed(), "{:?}", v.failures);
        // erfc(3)/2 * g and g sigma e^-9 / sqrt(pi)
        assert!(v.b_start > 4e-7 && v.b_start < 6e-7, "{}", v.b_start);
        assert!(v.bdot_start > 1.7e-5 && v.bdot_start < 2.0e-5, "{}", v.bdot_start);
        // the derivative tail does not reach 1e-6
        assert!(!validate_profile(&nominal_down(), 1e-6).passed());

        let wide = make_b_profile(TWO_PI * 2.64e6, TWO_PI * 2.42e6, 4e-6, 0.5).unwrap();
        let v = validate_profile(&wide, 1e-6);
        assert!(!v.passed());
        assert!(v.bdot_start > 1e-6 && v.bdot_end > 1e-6);

        let flat = BProfile::identity(1e7, 4e-6, 0.5).unwrap();
        let v = validate_profile(&flat, 1e-12);
        assert!(v.passed());
        assert_eq!(v.max_boundary_residual(), 0.0);
    }

    #[test]
    fn adiabaticity_matches_reported_figures() {
        let down = adiabaticity_metric(&nominal_down(), 1);
        let up = adiabaticity_metric(&nominal_up(), 1);
        assert!((down - 6e-4).abs() < 0.1 * 6e-4, "{down:e}");
        assert!((up - 7e-4).abs() < 0.1 * 7e-4, "{up:e}");
        assert!((adiabaticity_metric(&nominal_up(), 10) - 10.0 * up).abs() < 1e-15);
        let flat = BProfile::identity(1e7, 4e-6, 6.0).unwrap();
        assert_eq!(adiabaticity_metric(&flat, 100), 0.0);
        assert_eq!(adiabaticity_small_g(&flat, 100), 0.0);
    }

    #[test]
    fn ermakov_residual_vanishes() {
        for p in [nominal_down(), nominal_up()] {
            for k in 0..=200 {
                let t = 4e-6 * k as f64 / 200.0;
                let r = p.ramp(t).unwrap();
                let w2 = p.omega_sq(t).unwrap();
                let residual = r.bddot + w2 * r.b - p.omega_i.powi(2) / r.b.powi(3);
                assert!(residual.abs() <= 1e-8 * p.omega_i.powi(2));
            }
        }
    }

    #[test]
    fn csv_export_has_expected_shape() {
        let mut buf = Vec::new();
        write_profiles_csv(&mut buf, &[("h_to_m", &nominal_down()), ("l_to_m", &nominal_up())], 11).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "ramp,t[s],b,bdot,bddot,omega[rad/s]");
        assert_eq!(lines.len(), 23);
        assert!(lines[1].starts_with("h_to_m,0.0"));
        assert_eq!(lines[22].split(',').count(), 6);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn normalized_ramp_is_antisymmetric(g in 0.0..0.9f64, sigma in 0.5..12.0f64, frac in 0.0..1.0f64) {
                let shape = RampShape::new(g, sigma, 3e-6, Direction::Down).unwrap();
                let t = frac * 3e-6;
                let (s1, _, _) = shape.normalized(t);
                let (s2, _, _) = shape.normalized(3e-6 - t);
                prop_assert!((s1 + s2 - 1.0).abs() <= 1e-12);
            }

            #[test]
            fn ramps_are_monotone(g in 0.0..0.9f64, sigma in 0.5..12.0f64, a in 0.0..1.0f64, b in 0.0..1.0f64) {
                let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                for dir in [Direction::Up, Direction::Down] {
                    let shape = RampShape::new(g, sigma, 1.0, dir).unwrap();
                    let b_lo = eval_ramp(&shape, lo).unwrap();
                    let b_hi = eval_ramp(&shape, hi).unwrap();
                    match dir {
                        Direction::Up => prop_assert!(b_hi <= b_lo),
                        Direction::Down => prop_assert!(b_hi >= b_lo),
                    }
                }
            }

            #[test]
            fn nominal_profiles_stay_in_band(frac in 0.0..1.0f64) {
                for p in [nominal_down(), nominal_up()] {
                    let lo = p.omega_i.min(p.omega_f) * 0.8;
                    let hi = p.omega_i.max(p.omega_f) * 1.2;
                    let w = omega_of_t(&p, frac * 4e-6).unwrap();
                    prop_assert!(w >= lo && w <= hi);
                }
            }
        }
    }
}
