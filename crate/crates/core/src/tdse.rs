//! Split-step propagation of two coupled, frequency-modulated modes.
//!
//! Each mode `j` lives on a grid scaled to its static frequency `omega_j`:
//!
//! ```text
//! H = sum_j [ omega_j p_j^2 / 2 + omega_j(t)^2 x_j^2 / (2 omega_j) ]
//!   + (kappa_x / 2) x0 x1 + (kappa_p / 2) p0 p1
//! ```
//!
//! The exchange term is the rotating-wave form `(kappa/2)(a0' a1 + a0 a1')`
//! written at the reference frequency `omega_ref`, which in the mode
//! coordinates reads `kappa_x = kappa omega_ref / sqrt(omega0 omega1)` and
//! `kappa_p = kappa sqrt(omega0 omega1) / omega_ref`.
//!
//! A step of length `h` freezes each mode's frequency at the step midpoint
//! and uses the exact factorization of the harmonic propagator,
//! `X(c) P(s) X(c)` with `c = (w/omega_j) tan(w h / 2)` and
//! `s = (omega_j / w) sin(w h)`, so fast free oscillation carries no
//! splitting error. Half of the `x0 x1` coupling rides on each `X` factor and
//! the `p0 p1` coupling, rescaled to its midpoint value, on `P`. Consecutive
//! `X` factors are merged.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{OdbError, Result};
use crate::pulses::{omega_of_t, BProfile};
use crate::states::{Grid1D, PopulationProbe, Wavefunction2D};

/// Allowed deviation of the norm from one over a run.
pub const NORM_DRIFT_TOL: f64 = 1e-8;
/// Minimum number of steps per frequency ramp.
pub const MIN_RAMP_STEPS: usize = 100;
/// Minimum number of steps per period of the fastest frequency.
pub const MIN_STEPS_PER_PERIOD: f64 = 50.0;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianSpec {
    /// Static frequencies defining each mode's coordinates, rad/s.
    pub omega: [f64; 2],
    /// Exchange rate, rad/s.
    pub kappa: f64,
    /// Frequency at which the exchange is in rotating-wave form, rad/s.
    pub kappa_reference: f64,
    pub include_hopping: bool,
}

impl HamiltonianSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega[0] > 0.0 && self.omega[1] > 0.0 && self.kappa_reference > 0.0) {
            return Err(OdbError::Configuration(format!("frequencies must be positive: {self:?}")));
        }
        if !(self.kappa >= 0.0) {
            return Err(OdbError::Configuration(format!("kappa must be non-negative, got {}", self.kappa)));
        }
        Ok(())
    }

    /// `(kappa_x, kappa_p)` in the mode coordinates.
    pub fn coupling(&self) -> (f64, f64) {
        let geo = (self.omega[0] * self.omega[1]).sqrt();
        (self.kappa * self.kappa_reference / geo, self.kappa * geo / self.kappa_reference)
    }
}

/// Frequency of one mode over a segment.
#[derive(Clone, Debug, PartialEq)]
pub enum FrequencyProgram {
    Hold(f64),
    Ramp(BProfile),
}

impl FrequencyProgram {
    /// Frequency at segment-local time `t`.
    pub fn omega_at(&self, t: f64) -> Result<f64> {
        match self {
            FrequencyProgram::Hold(w) => Ok(*w),
            FrequencyProgram::Ramp(p) => omega_of_t(p, t.clamp(0.0, p.duration())),
        }
    }

    fn is_ramp(&self) -> bool {
        matches!(self, FrequencyProgram::Ramp(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub label: String,
    pub duration: f64,
    pub programs: [FrequencyProgram; 2],
    pub hopping: bool,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Schedule {
    pub segments: Vec<Segment>,
}

impl Schedule {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        let s = Self { segments };
        s.validate()?;
        Ok(s)
    }

    pub fn total_duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(OdbError::Configuration("schedule has no segments".into()));
        }
        for s in &self.segments {
            if !(s.duration > 0.0 && s.duration.is_finite()) {
                return Err(OdbError::Configuration(format!("segment '{}' has duration {}", s.label, s.duration)));
            }
            for p in &s.programs {
                if let FrequencyProgram::Ramp(r) = p {
                    if (r.duration() - s.duration).abs() > 1e-12 * s.duration {
                        return Err(OdbError::Configuration(format!(
                            "ramp in segment '{}' lasts {:e} s, segment {:e} s",
                            s.label,
                            r.duration(),
                            s.duration
                        )));
                    }
                }
            }
        }
        for pair in self.segments.windows(2) {
            for m in 0..2 {
                let end = pair[0].programs[m].omega_at(pair[0].duration)?;
                let start = pair[1].programs[m].omega_at(0.0)?;
                if (end - start).abs() > 1e-5 * end {
                    return Err(OdbError::Configuration(format!(
                        "mode {m} frequency jumps from {end:e} to {start:e} rad/s between '{}' and '{}'",
                        pair[0].label, pair[1].label
                    )));
                }
            }
        }
        Ok(())
    }

    /// Segment index and local time at absolute time `t`.
    pub fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let mut start = 0.0;
        for (i, s) in self.segments.iter().enumerate() {
            if t <= start + s.duration || i + 1 == self.segments.len() {
                let local = t - start;
                if local < -1e-15 || local > s.duration * (1.0 + 1e-12) {
                    break;
                }
                return Ok((i, local.clamp(0.0, s.duration)));
            }
            start += s.duration;
        }
        Err(OdbError::Domain(format!("time {t:e} s outside the schedule")))
    }

    pub fn omegas_at(&self, t: f64) -> Result<([f64; 2], bool)> {
        let (i, local) = self.locate(t)?;
        let s = &self.segments[i];
        Ok(([s.programs[0].omega_at(local)?, s.programs[1].omega_at(local)?], s.hopping))
    }

    fn max_omega(&self) -> Result<f64> {
        let mut w = 0.0f64;
        for s in &self.segments {
            for p in &s.programs {
                for k in 0..=200 {
                    w = w.max(p.omega_at(s.duration * k as f64 / 200.0)?);
                }
            }
        }
        Ok(w)
    }
}

/// Potential energy over the product grid, indexed `i0 * N1 + i1`.
pub fn build_potential(spec: &HamiltonianSpec, grids: &[Grid1D; 2], omegas: [f64; 2], hopping: bool) -> Vec<f64> {
    let (kx, _) = spec.coupling();
    let kx = if spec.include_hopping && hopping { kx } else { 0.0 };
    let x0 = grids[0].xs();
    let x1 = grids[1].xs();
    let a0 = omegas[0] * omegas[0] / spec.omega[0];
    let a1 = omegas[1] * omegas[1] / spec.omega[1];
    let mut v = Vec::with_capacity(x0.len() * x1.len());
    for &u in &x0 {
        v.extend(x1.iter().map(|&w| 0.5 * a0 * u * u + 0.5 * a1 * w * w + 0.5 * kx * u * w));
    }
    v
}

/// Kinetic energy over the momentum grid, indexed `k0 * N1 + k1` (FFT bin order).
pub fn build_kinetic(spec: &HamiltonianSpec, grids: &[Grid1D; 2], hopping: bool) -> Vec<f64> {
    let (_, kp) = spec.coupling();
    let kp = if spec.include_hopping && hopping { kp } else { 0.0 };
    let p0: Vec<f64> = (0..grids[0].n_points).map(|k| grids[0].momentum(k)).collect();
    let p1: Vec<f64> = (0..grids[1].n_points).map(|k| grids[1].momentum(k)).collect();
    let mut t = Vec::with_capacity(p0.len() * p1.len());
    for &u in &p0 {
        t.extend(p1.iter().map(|&w| 0.5 * spec.omega[0] * u * u + 0.5 * spec.omega[1] * w * w + 0.5 * kp * u * w));
    }
    t
}

/// Plain 2D forward DFT in `k0 * N1 + k1` order.
pub fn fft2(amps: &[Complex64], n0: usize, n1: usize) -> Vec<Complex64> {
    let mut planner = FftPlanner::new();
    let mut rows = amps.to_vec();
    planner.plan_fft_forward(n1).process(&mut rows);
    let mut cols = vec![ZERO; rows.len()];
    transpose(&rows, &mut cols, n0, n1);
    planner.plan_fft_forward(n0).process(&mut cols);
    let mut out = vec![ZERO; rows.len()];
    transpose(&cols, &mut out, n1, n0);
    out
}

/// `<psi|H|psi>` at fixed frequencies.
pub fn energy(psi: &Wavefunction2D, spec: &HamiltonianSpec, omegas: [f64; 2], hopping: bool) -> f64 {
    let [g0, g1] = psi.grids;
    let v = build_potential(spec, &psi.grids, omegas, hopping);
    let t = build_kinetic(spec, &psi.grids, hopping);
    let pot: f64 = psi.amps.iter().zip(&v).map(|(a, v)| a.norm_sqr() * v).sum();
    let spectrum = fft2(&psi.amps, g0.n_points, g1.n_points);
    let n = (g0.n_points * g1.n_points) as f64;
    let kin: f64 = spectrum.iter().zip(&t).map(|(a, t)| a.norm_sqr() * t).sum::<f64>() / n;
    (pot + kin) * psi.cell_area()
}

/// `dst[c * rows + r] = src[r * cols + c]`; both sizes powers of two.
fn transpose(src: &[Complex64], dst: &mut [Complex64], rows: usize, cols: usize) {
    let b = rows.min(cols).min(16);
    for rb in (0..rows).step_by(b) {
        for cb in (0..cols).step_by(b) {
            for c in cb..cb + b {
                let start = c * rows + rb;
                for (k, v) in dst[start..start + b].iter_mut().enumerate() {
                    *v = src[(rb + k) * cols + c];
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct PropagationOptions {
    /// Nominal step in seconds; each segment uses the largest step not above it
    /// that divides the segment evenly.
    pub dt: f64,
    /// Steps between snapshots; segment boundaries are always recorded.
    pub snapshot_stride: usize,
    /// `(n0, n1)` pairs to report populations for.
    pub fock_pairs: Vec<[usize; 2]>,
    /// Frequency of the second population basis (both modes).
    pub gate_frequency: f64,
    /// Keep the full state at the start and after every segment.
    pub capture_boundaries: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub t: f64,
    pub norm: f64,
    /// Populations at the static mode frequencies, in `fock_pairs` order.
    pub pop_memory: Vec<f64>,
    /// Populations at the gate frequency.
    pub pop_gate: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct BoundaryState {
    pub label: String,
    pub t: f64,
    pub state: Wavefunction2D,
}

#[derive(Clone, Debug)]
pub struct Propagation {
    pub final_state: Wavefunction2D,
    pub snapshots: Vec<Snapshot>,
    pub boundaries: Vec<BoundaryState>,
    pub steps: usize,
    pub max_norm_drift: f64,
}

/// Phase coefficients of one position-space factor `exp(-i[(c0 x0^2 + c1 x1^2)/2 + q x0 x1])`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct QuadraticPhase {
    c: [f64; 2],
    q: f64,
}

impl QuadraticPhase {
    fn key(&self) -> [u64; 3] {
        [self.c[0].to_bits(), self.c[1].to_bits(), self.q.to_bits()]
    }
}

impl std::ops::Add for QuadraticPhase {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self { c: [self.c[0] + o.c[0], self.c[1] + o.c[1]], q: self.q + o.q }
    }
}

pub struct Propagator {
    spec: HamiltonianSpec,
    grids: [Grid1D; 2],
    n: [usize; 2],
    x: [Vec<f64>; 2],
    /// Momenta per mode; the momentum-space buffer is stored `k1 * N0 + k0`.
    p: [Vec<f64>; 2],
    fwd: [Arc<dyn Fft<f64>>; 2],
    inv: [Arc<dyn Fft<f64>>; 2],
    scratch: Vec<Complex64>,
    work: Vec<Complex64>,
    x_cross: HashMap<u64, Vec<Complex64>>,
    p_cross: HashMap<u64, Vec<Complex64>>,
    /// Full phase arrays for steps that repeat (static segments).
    x_full: HashMap<[u64; 3], Vec<Complex64>>,
    p_full: HashMap<[u64; 3], Vec<Complex64>>,
}

const FULL_CACHE_LIMIT: usize = 8;

impl Propagator {
    pub fn new(spec: HamiltonianSpec, grids: [Grid1D; 2]) -> Result<Self> {
        spec.validate()?;
        for m in 0..2 {
            if (grids[m].scale_frequency - spec.omega[m]).abs() > 1e-12 * spec.omega[m] {
                return Err(OdbError::GridMismatch(format!(
                    "mode {m} grid is scaled to {:e} rad/s but the Hamiltonian uses {:e}",
                    grids[m].scale_frequency, spec.omega[m]
                )));
            }
        }
        let n = [grids[0].n_points, grids[1].n_points];
        let mut planner = FftPlanner::new();
        let fwd = [planner.plan_fft_forward(n[0]), planner.plan_fft_forward(n[1])];
        let inv = [planner.plan_fft_inverse(n[0]), planner.plan_fft_inverse(n[1])];
        let scratch_len = fwd.iter().chain(inv.iter()).map(|f| f.get_inplace_scratch_len()).max().unwrap_or(0);
        Ok(Self {
            spec,
            grids,
            n,
            x: [grids[0].xs(), grids[1].xs()],
            p: [
                (0..n[0]).map(|k| grids[0].momentum(k)).collect(),
                (0..n[1]).map(|k| grids[1].momentum(k)).collect(),
            ],
            fwd,
            inv,
            scratch: vec![ZERO; scratch_len],
            work: vec![ZERO; n[0] * n[1]],
            x_cross: HashMap::new(),
            p_cross: HashMap::new(),
            x_full: HashMap::new(),
            p_full: HashMap::new(),
        })
    }

    pub fn spec(&self) -> &HamiltonianSpec {
        &self.spec
    }

    /// Steps used for a segment under a nominal `dt`.
    pub fn segment_steps(duration: f64, dt: f64) -> usize {
        (duration / dt * (1.0 - 1e-12)).ceil().max(1.0) as usize
    }

    fn check_schedule(&self, schedule: &Schedule, dt: f64) -> Result<()> {
        schedule.validate()?;
        if !(dt > 0.0) {
            return Err(OdbError::Configuration(format!("time step must be positive, got {dt}")));
        }
        let w_max = schedule.max_omega()?.max(self.spec.omega[0]).max(self.spec.omega[1]);
        let limit = 2.0 * PI / w_max / MIN_STEPS_PER_PERIOD;
        if dt > limit {
            return Err(OdbError::Configuration(format!(
                "dt = {dt:.3e} s exceeds {limit:.3e} s ({MIN_STEPS_PER_PERIOD} steps per period at {w_max:.4e} rad/s)"
            )));
        }
        for s in &schedule.segments {
            let steps = Self::segment_steps(s.duration, dt);
            if s.programs.iter().any(FrequencyProgram::is_ramp) && steps < MIN_RAMP_STEPS {
                return Err(OdbError::Configuration(format!(
                    "segment '{}' ramps over only {steps} steps (minimum {MIN_RAMP_STEPS})",
                    s.label
                )));
            }
        }
        Ok(())
    }

    /// Exact harmonic factors for one step at midpoint frequencies `w`.
    fn step_factors(&self, w: [f64; 2], h: f64, hopping: bool) -> (QuadraticPhase, QuadraticPhase) {
        let (kx, kp) = self.spec.coupling();
        let on = self.spec.include_hopping && hopping;
        let mut x = QuadraticPhase { c: [0.0; 2], q: if on { 0.25 * h * kx } else { 0.0 } };
        let mut p = QuadraticPhase { c: [0.0; 2], q: if on { 0.5 * h * kp } else { 0.0 } };
        for m in 0..2 {
            let (wm, om) = (w[m], self.spec.omega[m]);
            x.c[m] = wm / om * (0.5 * wm * h).tan();
            p.c[m] = om / wm * (wm * h).sin();
            // Seen through the first shear, p_j picks up 1/cos(w h / 2); undo it so
            // the middle factor samples the coupling at the step midpoint.
            p.q *= (0.5 * wm * h).cos();
        }
        (x, p)
    }

    fn cross<'a>(cache: &'a mut HashMap<u64, Vec<Complex64>>, q: f64, a: &[f64], b: &[f64]) -> &'a [Complex64] {
        // During ramps the coupling changes every step; keep only a few entries.
        if cache.len() >= FULL_CACHE_LIMIT && !cache.contains_key(&q.to_bits()) {
            cache.clear();
        }
        cache.entry(q.to_bits()).or_insert_with(|| {
            let mut v = Vec::with_capacity(a.len() * b.len());
            for &u in a {
                v.extend(b.iter().map(|&w| Complex64::from_polar(1.0, -q * u * w)));
            }
            v
        })
    }

    /// Position-space factor `exp(-i[(c0 x0^2 + c1 x1^2)/2 + q x0 x1])`, as a
    /// full array (cached when `repeats`) or as separable rows times the cross term.
    fn x_array(&mut self, f: QuadraticPhase, repeats: bool) -> Option<&[Complex64]> {
        if !repeats {
            return None;
        }
        if !self.x_full.contains_key(&f.key()) {
            if self.x_full.len() >= FULL_CACHE_LIMIT {
                self.x_full.clear();
            }
            let mut full = vec![Complex64::new(1.0, 0.0); self.n[0] * self.n[1]];
            self.apply_x_separable(&mut full, f);
            self.x_full.insert(f.key(), full);
        }
        self.x_full.get(&f.key()).map(Vec::as_slice)
    }

    fn apply_x(&mut self, amps: &mut [Complex64], f: QuadraticPhase, repeats: bool) {
        match self.x_array(f, repeats) {
            Some(full) => amps.iter_mut().zip(full).for_each(|(z, g)| *z *= g),
            None => self.apply_x_separable(amps, f),
        }
    }

    fn apply_x_separable(&mut self, amps: &mut [Complex64], f: QuadraticPhase) {
        let a0: Vec<Complex64> = self.x[0].iter().map(|&u| Complex64::from_polar(1.0, -0.5 * f.c[0] * u * u)).collect();
        let a1: Vec<Complex64> = self.x[1].iter().map(|&u| Complex64::from_polar(1.0, -0.5 * f.c[1] * u * u)).collect();
        let n1 = self.n[1];
        if f.q == 0.0 {
            for (row, f0) in amps.chunks_exact_mut(n1).zip(&a0) {
                row.iter_mut().zip(&a1).for_each(|(z, f1)| *z *= f0 * f1);
            }
            return;
        }
        let cross = Self::cross(&mut self.x_cross, f.q, &self.x[0], &self.x[1]);
        for ((row, f0), crow) in amps.chunks_exact_mut(n1).zip(&a0).zip(cross.chunks_exact(n1)) {
            row.iter_mut().zip(&a1).zip(crow).for_each(|((z, f1), c)| *z *= f0 * f1 * c);
        }
    }

    /// Momentum-space factor on the `k1 * N0 + k0` layout, with the inverse
    /// transform's `1 / (N0 N1)` folded in.
    fn apply_p_phase(&mut self, work: &mut [Complex64], f: QuadraticPhase, repeats: bool) {
        let [n0, n1] = self.n;
        if repeats {
            if !self.p_full.contains_key(&f.key()) {
                if self.p_full.len() >= FULL_CACHE_LIMIT {
                    self.p_full.clear();
                }
                let mut full = vec![Complex64::new(1.0, 0.0); n0 * n1];
                self.apply_p_separable(&mut full, f);
                self.p_full.insert(f.key(), full);
            }
            let full = &self.p_full[&f.key()];
            work.iter_mut().zip(full).for_each(|(z, g)| *z *= g);
        } else {
            self.apply_p_separable(work, f);
        }
    }

    fn apply_p_separable(&mut self, work: &mut [Complex64], f: QuadraticPhase) {
        let [n0, n1] = self.n;
        let norm = 1.0 / (n0 * n1) as f64;
        let b0: Vec<Complex64> =
            self.p[0].iter().map(|&k| Complex64::from_polar(norm, -0.5 * f.c[0] * k * k)).collect();
        let b1: Vec<Complex64> = self.p[1].iter().map(|&k| Complex64::from_polar(1.0, -0.5 * f.c[1] * k * k)).collect();
        if f.q == 0.0 {
            for (row, g1) in work.chunks_exact_mut(n0).zip(&b1) {
                row.iter_mut().zip(&b0).for_each(|(z, g0)| *z *= g0 * g1);
            }
        } else {
            let cross = Self::cross(&mut self.p_cross, f.q, &self.p[1], &self.p[0]);
            for ((row, g1), crow) in work.chunks_exact_mut(n0).zip(&b1).zip(cross.chunks_exact(n0)) {
                row.iter_mut().zip(&b0).zip(crow).for_each(|((z, g0), c)| *z *= g0 * g1 * c);
            }
        }
    }

    /// Transforms to momentum space, applies the factor and transforms back.
    fn apply_p(&mut self, amps: &mut [Complex64], f: QuadraticPhase, repeats: bool) {
        let [n0, n1] = self.n;
        let mut work = std::mem::take(&mut self.work);
        self.fwd[1].process_with_scratch(amps, &mut self.scratch);
        transpose(amps, &mut work, n0, n1);
        self.fwd[0].process_with_scratch(&mut work, &mut self.scratch);
        self.apply_p_phase(&mut work, f, repeats);
        self.inv[0].process_with_scratch(&mut work, &mut self.scratch);
        transpose(&work, amps, n1, n0);
        self.inv[1].process_with_scratch(amps, &mut self.scratch);
        self.work = work;
    }

    /// Propagates `psi` through `schedule`.
    pub fn run(&mut self, psi: &Wavefunction2D, schedule: &Schedule, options: &PropagationOptions) -> Result<Propagation> {
        if psi.grids[0] != self.grids[0] || psi.grids[1] != self.grids[1] {
            return Err(OdbError::GridMismatch("initial state is not on the propagator grids".into()));
        }
        self.check_schedule(schedule, options.dt)?;
        let initial_norm = psi.norm_sqr();
        if (initial_norm - 1.0).abs() > NORM_DRIFT_TOL {
            return Err(OdbError::Domain(format!("initial state norm is {initial_norm}")));
        }
        let memory = PopulationProbe::new(&self.grids, self.spec.omega, max_n(&options.fock_pairs));
        let gate = PopulationProbe::new(&self.grids, [options.gate_frequency; 2], max_n(&options.fock_pairs));
        let stride = options.snapshot_stride.max(1);

        let mut state = psi.clone();
        let mut snapshots = Vec::new();
        let mut boundaries = Vec::new();
        let mut max_drift = 0.0f64;
        let record = |state: &Wavefunction2D, t: f64, max_drift: &mut f64| -> Result<Snapshot> {
            let norm = state.norm_sqr();
            let drift = (norm - initial_norm).abs();
            *max_drift = max_drift.max(drift);
            if drift > NORM_DRIFT_TOL {
                return Err(OdbError::Convergence(format!("norm drifted by {drift:.3e} at t = {t:.6e} s")));
            }
            Ok(Snapshot {
                t,
                norm,
                pop_memory: options.fock_pairs.iter().map(|&n| memory.population(state, n)).collect(),
                pop_gate: options.fock_pairs.iter().map(|&n| gate.population(state, n)).collect(),
            })
        };
        snapshots.push(record(&state, 0.0, &mut max_drift)?);
        if options.capture_boundaries {
            boundaries.push(BoundaryState { label: "start".into(), t: 0.0, state: state.clone() });
        }

        let mut pending = QuadraticPhase::default();
        let mut t0 = 0.0;
        let mut total_steps = 0;
        for seg in &schedule.segments {
            let steps = Self::segment_steps(seg.duration, options.dt);
            let h = seg.duration / steps as f64;
            let repeats = !seg.programs.iter().any(FrequencyProgram::is_ramp);
            for k in 0..steps {
                let mid = (k as f64 + 0.5) * h;
                let w = [seg.programs[0].omega_at(mid)?, seg.programs[1].omega_at(mid)?];
                let (xf, pf) = self.step_factors(w, h, seg.hopping);
                // The first step of a segment merges with the previous segment's last half.
                self.apply_x(&mut state.amps, pending + xf, repeats && k > 0);
                self.apply_p(&mut state.amps, pf, repeats);
                pending = xf;
                total_steps += 1;
                let at_end = k + 1 == steps;
                if at_end || total_steps % stride == 0 {
                    self.apply_x(&mut state.amps, pending, repeats);
                    pending = QuadraticPhase::default();
                    let t = if at_end { t0 + seg.duration } else { t0 + (k + 1) as f64 * h };
                    snapshots.push(record(&state, t, &mut max_drift)?);
                }
            }
            t0 += seg.duration;
            if options.capture_boundaries {
                boundaries.push(BoundaryState { label: seg.label.clone(), t: t0, state: state.clone() });
            }
        }
        Ok(Propagation { final_state: state, snapshots, boundaries, steps: total_steps, max_norm_drift: max_drift })
    }
}

fn max_n(pairs: &[[usize; 2]]) -> usize {
    pairs.iter().flat_map(|p| p.iter().copied()).max().unwrap_or(0)
}

/// Writes snapshots with header `t[s],norm,pop_mem_<n0>_<n1>...,pop_gate_<n0>_<n1>...`.
pub fn write_snapshots_csv<W: Write>(out: &mut W, pairs: &[[usize; 2]], snapshots: &[Snapshot]) -> Result<()> {
    let mut header = vec!["t[s]".to_string(), "norm".to_string()];
    header.extend(pairs.iter().map(|[a, b]| format!("pop_mem_{a}_{b}")));
    header.extend(pairs.iter().map(|[a, b]| format!("pop_gate_{a}_{b}")));
    writeln!(out, "{}", header.join(","))?;
    for s in snapshots {
        let mut row = vec![format!("{:.9e}", s.t), format!("{:.12e}", s.norm)];
        row.extend(s.pop_memory.iter().chain(&s.pop_gate).map(|p| format!("{p:.10e}")));
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

/// Outcome of repeating a run at half the step and at double the grid size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub baseline: f64,
    pub half_dt: f64,
    pub double_grid: f64,
    pub dt_change: f64,
    pub grid_change: f64,
    /// Tolerance of the quantity being converged.
    pub tolerance: f64,
    pub pass: bool,
}

/// Reruns a metric (typically an infidelity) at `dt / 2` and at `2 n_points`.
///
/// Passes when both changes are at most 10% of `tolerance`.
pub fn convergence_check<F>(run: F, dt: f64, n_points: usize, tolerance: f64) -> Result<ConvergenceReport>
where
    F: Fn(f64, usize) -> Result<f64>,
{
    let baseline = run(dt, n_points)?;
    let half_dt = run(0.5 * dt, n_points)?;
    let double_grid = run(dt, 2 * n_points)?;
    let dt_change = (half_dt - baseline).abs();
    let grid_change = (double_grid - baseline).abs();
    Ok(ConvergenceReport {
        baseline,
        half_dt,
        double_grid,
        dt_change,
        grid_change,
        tolerance,
        pass: dt_change <= 0.1 * tolerance && grid_change <= 0.1 * tolerance,
    })
}
