//! Gate experiments driven by a flat TOML configuration.
//!
//! Mode 0 is stored at the high memory frequency and mode 1 at the low one.
//! Reported states are taken to the interaction frame of the memory
//! frequencies, zero-point phases included.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI};
use std::fs;
use std::path::Path;
use std::time::Instant;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{OdbError, Result};
use crate::lewis_riesenfeld::theta_phase;
use crate::pulses::{
    adiabaticity_metric, adiabaticity_small_g, cycle_count, make_b_profile, validate_profile_with, write_profiles_csv,
    BProfile,
};
use crate::states::{
    apply_fock_phase_2d, density_l1, fidelity, fock_state, gkp_state, marginal, write_marginal_csv, FockBasis,
    Fidelity, GkpParams, Grid1D, PopulationProbe, Wavefunction2D,
};
use crate::symplectic::{
    apply_to_fock, hom_target_phases, kappa_from_geometry, odb_matrix, swap_phases, FockAmplitudes, GateTiming,
};
use crate::tdse::{
    convergence_check, write_snapshots_csv, ConvergenceReport, FrequencyProgram, HamiltonianSpec, Propagation,
    PropagationOptions, Propagator, Schedule, Segment, Snapshot,
};
use crate::units::{khz_to_angular, mhz_to_angular, ATOMIC_MASS_UNIT};

/// Infidelity allowed for the 50:50 gate on `|1>|1>`.
pub const HOM_INFIDELITY_TOL: f64 = 5e-4;
/// Allowed `1 - |<target|psi>|` for the GKP exchange.
pub const SWAP_INFIDELITY_TOL: f64 = 1e-2;
/// Allowed L1 distance between compensated and logical marginals.
pub const SWAP_MARGINAL_L1_TOL: f64 = 0.05;
/// Largest acceptable transfer between detuned memory modes.
pub const DETUNED_TRANSFER_TOL: f64 = 1e-5;
/// Conversion rate reported for an earlier trapped-ion experiment, cyclic kHz/us.
pub const REFERENCE_FC_RATE_KHZ_PER_US: f64 = 57.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Ion mass in unified atomic mass units.
    pub mass_u: f64,
    /// Ion spacing in micrometres.
    pub d_um: f64,
    /// Exchange rate in cyclic kHz; derived from the geometry when absent.
    pub kappa_khz: Option<f64>,
    pub omega_h_mhz: f64,
    pub omega_l_mhz: f64,
    pub omega_m_mhz: f64,
    pub t_fc_us: f64,
    pub sigma: f64,
    /// Beamsplitter angle of the HOM gate in units of pi.
    pub theta_over_pi: f64,
    pub grid_points: usize,
    /// Grid half-width in oscillator units; balanced when absent.
    pub grid_span: Option<f64>,
    pub dt_ns: f64,
    pub snapshot_stride: usize,
    pub hopping_during_fc: bool,
    /// Also run the HOM gate with hopping off during the ramps.
    pub hom_baseline: bool,
    pub physical_phase_gate: bool,
    pub gkp_delta: f64,
    pub gkp_epsilon: f64,
    pub gkp_s_max: u32,
    /// Grid size of the detuning check, which only involves low phonon numbers.
    pub detuning_grid_points: usize,
    pub boundary_tol: f64,
    pub profile_samples: usize,
    pub fock_residual_tol: f64,
    pub out_dir: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mass_u: 40.0,
            d_um: 43.8,
            kappa_khz: None,
            omega_h_mhz: 2.64,
            omega_l_mhz: 2.20,
            omega_m_mhz: 2.42,
            t_fc_us: 4.0,
            sigma: 6.0,
            theta_over_pi: 0.25,
            grid_points: 128,
            grid_span: None,
            dt_ns: 2.0,
            snapshot_stride: 50,
            hopping_during_fc: true,
            hom_baseline: true,
            physical_phase_gate: false,
            gkp_delta: 0.3,
            gkp_epsilon: 0.3,
            gkp_s_max: 6,
            detuning_grid_points: 32,
            boundary_tol: crate::pulses::DEFAULT_BOUNDARY_TOL,
            profile_samples: crate::pulses::DEFAULT_PROFILE_SAMPLES,
            fock_residual_tol: crate::states::DEFAULT_FOCK_RESIDUAL_TOL,
            out_dir: None,
        }
    }
}

/// Memory and gate frequencies in rad/s.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frequencies {
    pub high: f64,
    pub low: f64,
    pub gate: f64,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(OdbError::Configuration(msg));
        if !(self.omega_l_mhz > 0.0 && self.omega_l_mhz < self.omega_m_mhz && self.omega_m_mhz < self.omega_h_mhz) {
            return bad(format!(
                "need 0 < omega_l < omega_m < omega_h, got {} / {} / {} MHz",
                self.omega_l_mhz, self.omega_m_mhz, self.omega_h_mhz
            ));
        }
        if !(self.mass_u > 0.0 && self.d_um > 0.0) {
            return bad(format!("mass and spacing must be positive: {} u, {} um", self.mass_u, self.d_um));
        }
        if let Some(k) = self.kappa_khz {
            if !(k > 0.0) {
                return bad(format!("kappa_khz must be positive, got {k}"));
            }
        }
        if !(self.t_fc_us > 0.0 && self.sigma > 0.0) {
            return bad(format!("t_fc_us and sigma must be positive: {}, {}", self.t_fc_us, self.sigma));
        }
        if !(self.theta_over_pi >= 0.0 && self.theta_over_pi.is_finite()) {
            return bad(format!("theta_over_pi must be non-negative, got {}", self.theta_over_pi));
        }
        if !(self.dt_ns > 0.0) || self.snapshot_stride == 0 {
            return bad(format!("dt_ns = {} and snapshot_stride = {} must be positive", self.dt_ns, self.snapshot_stride));
        }
        if !(self.gkp_delta > 0.0 && self.gkp_epsilon > 0.0) || self.gkp_s_max == 0 {
            return bad("GKP widths and s_max must be positive".into());
        }
        if !(self.boundary_tol > 0.0 && self.fock_residual_tol > 0.0) || self.profile_samples < 2 {
            return bad("tolerances must be positive and profile_samples >= 2".into());
        }
        for n in [self.grid_points, self.detuning_grid_points] {
            if n < 8 || !n.is_power_of_two() {
                return bad(format!("grid sizes must be powers of two >= 8, got {n}"));
            }
        }
        Ok(())
    }

    pub fn frequencies(&self) -> Frequencies {
        Frequencies {
            high: mhz_to_angular(self.omega_h_mhz),
            low: mhz_to_angular(self.omega_l_mhz),
            gate: mhz_to_angular(self.omega_m_mhz),
        }
    }

    /// Exchange rate at the gate frequency, rad/s.
    pub fn kappa(&self) -> Result<f64> {
        match self.kappa_khz {
            Some(k) => Ok(khz_to_angular(k)),
            None => kappa_from_geometry(self.d_um * 1e-6, self.mass_u * ATOMIC_MASS_UNIT, self.frequencies().gate),
        }
    }

    pub fn t_fc(&self) -> f64 {
        self.t_fc_us * 1e-6
    }

    pub fn dt(&self) -> f64 {
        self.dt_ns * 1e-9
    }

    /// Exchange hold `T_B = 2 theta / kappa`.
    pub fn hold_time(&self, theta: f64) -> Result<f64> {
        Ok(2.0 * theta / self.kappa()?)
    }

    pub fn grid(&self, n_points: usize, omega: f64) -> Result<Grid1D> {
        match self.grid_span {
            Some(span) => Grid1D::new(n_points, span, omega),
            None => Grid1D::balanced(n_points, omega),
        }
    }

    pub fn memory_grids(&self) -> Result<[Grid1D; 2]> {
        let f = self.frequencies();
        Ok([self.grid(self.grid_points, f.high)?, self.grid(self.grid_points, f.low)?])
    }

    /// The same configuration at twice the grid size, with the span grown so
    /// that position and momentum resolution improve together.
    pub fn doubled_grid(&self) -> Self {
        Self {
            grid_points: 2 * self.grid_points,
            grid_span: self.grid_span.map(|l| l * 2f64.sqrt()),
            ..self.clone()
        }
    }

    fn gkp(&self, logical: u8) -> GkpParams {
        GkpParams { delta: self.gkp_delta, epsilon: self.gkp_epsilon, s_max: self.gkp_s_max, logical }
    }

    /// `(omega_h - omega_m) / T_FC` in cyclic kHz per microsecond.
    pub fn fc_rate_khz_per_us(&self) -> f64 {
        (self.omega_h_mhz - self.omega_m_mhz) * 1e3 / self.t_fc_us
    }
}

/// Ramps, timing and schedule of one beamsplitter.
#[derive(Clone, Debug)]
pub struct GatePlan {
    pub theta: f64,
    pub kappa: f64,
    /// High-to-gate and low-to-gate conversions.
    pub ramps: [BProfile; 2],
    pub timing: GateTiming,
    pub schedule: Schedule,
}

/// Conversion of both modes to the gate frequency, a resonant hold and the inverse conversion.
pub fn build_odb_schedule(config: &ExperimentConfig, theta: f64) -> Result<GatePlan> {
    config.validate()?;
    let f = config.frequencies();
    let kappa = config.kappa()?;
    let t_fc = config.t_fc();
    let t_b = config.hold_time(theta)?;
    let ramps = [
        make_b_profile(f.high, f.gate, t_fc, config.sigma)?,
        make_b_profile(f.low, f.gate, t_fc, config.sigma)?,
    ];
    for r in &ramps {
        let v = validate_profile_with(r, config.boundary_tol, config.profile_samples);
        if !v.passed() {
            return Err(OdbError::Configuration(format!("ramp rejected: {}", v.failures.join("; "))));
        }
    }
    let back = [ramps[0].reversed()?, ramps[1].reversed()?];
    let mut segments = vec![Segment {
        label: "fc".into(),
        duration: t_fc,
        programs: [FrequencyProgram::Ramp(ramps[0]), FrequencyProgram::Ramp(ramps[1])],
        hopping: config.hopping_during_fc,
    }];
    if t_b > 0.0 {
        segments.push(Segment {
            label: "hold".into(),
            duration: t_b,
            programs: [FrequencyProgram::Hold(f.gate), FrequencyProgram::Hold(f.gate)],
            hopping: true,
        });
    }
    segments.push(Segment {
        label: "ifc".into(),
        duration: t_fc,
        programs: [FrequencyProgram::Ramp(back[0]), FrequencyProgram::Ramp(back[1])],
        hopping: config.hopping_during_fc,
    });
    let timing = GateTiming {
        theta_hm: theta_phase(&ramps[0])?,
        theta_lm: theta_phase(&ramps[1])?,
        omega_m: f.gate,
        omega_h: f.high,
        omega_l: f.low,
        t_b,
        t3: 2.0 * t_fc + t_b,
    };
    Ok(GatePlan { theta, kappa, ramps, timing, schedule: Schedule::new(segments)? })
}

/// Pass/fail of one reported quantity against its bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub pass: bool,
}

impl Check {
    pub fn between(name: &str, value: f64, min: Option<f64>, max: Option<f64>) -> Self {
        let pass = value.is_finite() && min.map_or(true, |m| value >= m) && max.map_or(true, |m| value <= m);
        Self { name: name.into(), value, min, max, pass }
    }

    pub fn at_most(name: &str, value: f64, max: f64) -> Self {
        Self::between(name, value, None, Some(max))
    }

    pub fn near(name: &str, value: f64, center: f64, tol: f64) -> Self {
        Self::between(name, value, Some(center - tol), Some(center + tol))
    }

    pub fn near_relative(name: &str, value: f64, center: f64, rel: f64) -> Self {
        Self::near(name, value, center, rel * center.abs())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentEcho {
    pub label: String,
    pub start_s: f64,
    pub duration_s: f64,
    pub start_mhz: [f64; 2],
    pub end_mhz: [f64; 2],
    pub hopping: bool,
}

fn echo_schedule(schedule: &Schedule) -> Result<Vec<SegmentEcho>> {
    let to_mhz = |w: f64| w / (2.0 * PI * 1e6);
    let mut start = 0.0;
    let mut out = Vec::new();
    for s in &schedule.segments {
        let at = |t: f64| -> Result<[f64; 2]> {
            Ok([to_mhz(s.programs[0].omega_at(t)?), to_mhz(s.programs[1].omega_at(t)?)])
        };
        out.push(SegmentEcho {
            label: s.label.clone(),
            start_s: start,
            duration_s: s.duration,
            start_mhz: at(0.0)?,
            end_mhz: at(s.duration)?,
            hopping: s.hopping,
        });
        start += s.duration;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub experiment: String,
    pub program: String,
    pub config: ExperimentConfig,
    pub schedule: Vec<SegmentEcho>,
    pub steps: usize,
    pub max_norm_drift: f64,
    pub fidelity: Option<Fidelity>,
    pub metrics: BTreeMap<String, f64>,
    /// Analytic phases entering the target state, rad.
    pub target_phases: BTreeMap<String, f64>,
    pub convergence: Option<ConvergenceReport>,
    pub checks: Vec<Check>,
    pub files: Vec<String>,
    pub wall_clock_s: f64,
}

impl RunReport {
    fn new(experiment: &str, config: &ExperimentConfig) -> Self {
        Self {
            experiment: experiment.into(),
            program: format!("odb {}", env!("CARGO_PKG_VERSION")),
            config: config.clone(),
            schedule: Vec::new(),
            steps: 0,
            max_norm_drift: 0.0,
            fidelity: None,
            metrics: BTreeMap::new(),
            target_phases: BTreeMap::new(),
            convergence: None,
            checks: Vec::new(),
            files: Vec::new(),
            wall_clock_s: 0.0,
        }
    }

    pub fn metric(&self, name: &str) -> Result<f64> {
        self.metrics.get(name).copied().ok_or_else(|| OdbError::Domain(format!("report has no metric '{name}'")))
    }

    pub fn all_checks_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    fn set(&mut self, name: &str, value: f64) {
        self.metrics.insert(name.into(), value);
    }

    fn add_timing(&mut self, plan: &GatePlan) {
        self.set("theta", plan.theta);
        self.set("kappa_rad_s", plan.kappa);
        self.set("kappa_hz", plan.kappa / (2.0 * PI));
        self.set("t_b_s", plan.timing.t_b);
        self.set("t3_s", plan.timing.t3);
        self.target_phases.insert("theta_hm".into(), plan.timing.theta_hm);
        self.target_phases.insert("theta_lm".into(), plan.timing.theta_lm);
    }

    fn absorb(&mut self, run: &Propagation) {
        self.steps += run.steps;
        self.max_norm_drift = self.max_norm_drift.max(run.max_norm_drift);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Artifact {
    pub file_name: String,
    pub contents: Vec<u8>,
}

/// A report plus the files that accompany it.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: RunReport,
    pub artifacts: Vec<Artifact>,
}

impl RunOutput {
    fn new(mut report: RunReport, artifacts: Vec<Artifact>, started: Instant) -> Self {
        report.files = artifacts.iter().map(|a| a.file_name.clone()).collect();
        report.files.push("report.json".into());
        report.wall_clock_s = started.elapsed().as_secs_f64();
        Self { report, artifacts }
    }

    /// Writes every artifact and `report.json` into `dir`, creating it if needed.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for a in &self.artifacts {
            fs::write(dir.join(&a.file_name), &a.contents)?;
        }
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(&self.report)?)?;
        Ok(())
    }
}

fn csv_artifact<F>(file_name: &str, write: F) -> Result<Artifact>
where
    F: FnOnce(&mut Vec<u8>) -> Result<()>,
{
    let mut contents = Vec::new();
    write(&mut contents)?;
    Ok(Artifact { file_name: file_name.into(), contents })
}

/// Removes the free evolution `exp(-i omega_j t (n + 1/2))` of both modes.
pub fn to_interaction_frame(psi: &Wavefunction2D, bases: [&FockBasis; 2], t: f64, tol: f64) -> Result<Wavefunction2D> {
    // The phase acts on n + 1/2, so it is periodic in 4 pi.
    let angle = |m: usize| (-psi.grids[m].scale_frequency * t).rem_euclid(4.0 * PI);
    apply_fock_phase_2d(psi, bases, [angle(0), angle(1)], tol)
}

/// Grid state with the given phonon-number amplitudes at the grid frequencies.
pub fn fock_superposition(amps: &FockAmplitudes, grids: &[Grid1D; 2]) -> Result<Wavefunction2D> {
    let mut terms = Vec::new();
    for n0 in 0..=amps.n_max {
        for n1 in 0..=amps.n_max {
            let c = amps.get(n0, n1);
            if c.norm() > 1e-14 {
                terms.push((c, Wavefunction2D::product(&fock_state(n0, &grids[0])?, &fock_state(n1, &grids[1])?)));
            }
        }
    }
    let refs: Vec<(Complex64, &Wavefunction2D)> = terms.iter().map(|(c, s)| (*c, s)).collect();
    Wavefunction2D::superpose(&refs)
}

fn gate_spec(config: &ExperimentConfig) -> Result<HamiltonianSpec> {
    let f = config.frequencies();
    Ok(HamiltonianSpec { omega: [f.high, f.low], kappa: config.kappa()?, kappa_reference: f.gate, include_hopping: true })
}

fn nearest_snapshot(snapshots: &[Snapshot], t: f64) -> Result<&Snapshot> {
    snapshots
        .iter()
        .min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs()))
        .ok_or_else(|| OdbError::Domain("run produced no snapshots".into()))
}

const HOM_PAIRS: [[usize; 2]; 3] = [[1, 1], [2, 0], [0, 2]];

/// Runs the 50:50 gate on `|1; omega_h>|1; omega_l>`.
pub fn run_hom(config: &ExperimentConfig) -> Result<RunOutput> {
    let started = Instant::now();
    let mut report = RunReport::new("hom", config);
    let plan = build_odb_schedule(config, config.theta_over_pi * PI)?;
    report.add_timing(&plan);
    report.schedule = echo_schedule(&plan.schedule)?;

    let grids = config.memory_grids()?;
    let bases = [FockBasis::new(&grids[0])?, FockBasis::new(&grids[1])?];
    let psi0 = Wavefunction2D::product(&fock_state(1, &grids[0])?, &fock_state(1, &grids[1])?);
    let options = PropagationOptions {
        dt: config.dt(),
        snapshot_stride: config.snapshot_stride,
        fock_pairs: HOM_PAIRS.to_vec(),
        gate_frequency: plan.timing.omega_m,
        capture_boundaries: false,
    };
    let mut propagator = Propagator::new(gate_spec(config)?, grids)?;
    let run = propagator.run(&psi0, &plan.schedule, &options)?;
    report.absorb(&run);
    report.set("main_run_s", started.elapsed().as_secs_f64());

    let gate = odb_matrix(plan.theta, &plan.timing);
    let target_amps = apply_to_fock(&gate, &FockAmplitudes::basis(4, 1, 1))?;
    let target = fock_superposition(&target_amps, &grids)?;
    let tol = config.fock_residual_tol;
    let frame = to_interaction_frame(&run.final_state, [&bases[0], &bases[1]], plan.timing.t3, tol)?;
    let fid = fidelity(&frame, &target)?;
    report.fidelity = Some(fid);
    report.set("infidelity", 1.0 - fid.overlap_sqr);
    report.set("infidelity_abs", 1.0 - fid.overlap_abs);
    let phases = hom_target_phases(&plan.timing);
    report.target_phases.insert("both_in_mode0".into(), phases.both_in_mode0);
    report.target_phases.insert("both_in_mode1".into(), phases.both_in_mode1);

    let last = run.snapshots.last().ok_or_else(|| OdbError::Domain("run produced no snapshots".into()))?;
    let at_fc = nearest_snapshot(&run.snapshots, config.t_fc())?;
    for (k, [a, b]) in HOM_PAIRS.iter().enumerate() {
        report.set(&format!("pop_memory_{a}_{b}_final"), last.pop_memory[k]);
        report.set(&format!("pop_memory_{a}_{b}_at_fc"), at_fc.pop_memory[k]);
        report.set(&format!("pop_gate_{a}_{b}_at_fc"), at_fc.pop_gate[k]);
    }
    report.set("t_at_fc_s", at_fc.t);

    let mut artifacts = vec![csv_artifact("populations.csv", |out| write_snapshots_csv(out, &HOM_PAIRS, &run.snapshots))?];

    if config.hom_baseline {
        let plain = ExperimentConfig { hopping_during_fc: false, ..config.clone() };
        let plain_plan = build_odb_schedule(&plain, plan.theta)?;
        let base = propagator.run(&psi0, &plain_plan.schedule, &options)?;
        report.absorb(&base);
        let base_frame = to_interaction_frame(&base.final_state, [&bases[0], &bases[1]], plan.timing.t3, tol)?;
        let base_fid = fidelity(&base_frame, &target)?;
        report.set("baseline_infidelity", 1.0 - base_fid.overlap_sqr);
        report.set("hopping_during_fc_increase", base_fid.overlap_sqr - fid.overlap_sqr);
        report.set(
            "baseline_fock_infidelity",
            fock_amplitude_infidelity(&base.final_state, &target_amps, plan.timing.t3),
        );
        artifacts.push(csv_artifact("populations_baseline.csv", |out| {
            write_snapshots_csv(out, &HOM_PAIRS, &base.snapshots)
        })?);
    }

    let m = |k: &str| report.metrics[k];
    report.checks = vec![
        Check::near("pop_memory_2_0_final", m("pop_memory_2_0_final"), 0.5, 0.01),
        Check::near("pop_memory_0_2_final", m("pop_memory_0_2_final"), 0.5, 0.01),
        Check::at_most("pop_memory_1_1_final", m("pop_memory_1_1_final"), 0.01),
        Check::at_most("infidelity", m("infidelity"), HOM_INFIDELITY_TOL),
        Check::at_most("max_norm_drift", report.max_norm_drift, crate::tdse::NORM_DRIFT_TOL),
    ];
    Ok(RunOutput::new(report, artifacts, started))
}

/// `1 - |<target|psi>|^2` using only the state's amplitudes on the
/// phonon numbers covered by `target`, read off with sampled mode functions.
pub fn fock_amplitude_infidelity(psi: &Wavefunction2D, target: &FockAmplitudes, t: f64) -> f64 {
    let n_max = target.n_max;
    let w = [psi.grids[0].scale_frequency, psi.grids[1].scale_frequency];
    let probe = PopulationProbe::new(&psi.grids, w, n_max);
    let mut overlap = Complex64::new(0.0, 0.0);
    for n0 in 0..=n_max {
        for n1 in 0..=n_max {
            let amp = psi.project(&probe.functions[0][n0], &probe.functions[1][n1]);
            let frame = ((n0 as f64 + 0.5) * w[0] * t).rem_euclid(2.0 * PI) + ((n1 as f64 + 0.5) * w[1] * t).rem_euclid(2.0 * PI);
            overlap += target.get(n0, n1).conj() * amp * Complex64::from_polar(1.0, frame);
        }
    }
    1.0 - overlap.norm_sqr()
}

/// Phase gate built from a conversion to the gate frequency, a hold and the
/// inverse conversion, one mode at a time, realizing `exp(i alpha_j (n + 1/2))`
/// in the interaction frame up to a global sign.
pub fn physical_phase_gate(config: &ExperimentConfig, plan: &GatePlan, alpha: [f64; 2]) -> Result<Schedule> {
    let f = config.frequencies();
    let memory = [f.high, f.low];
    let thetas = [plan.timing.theta_hm, plan.timing.theta_lm];
    let t_fc = config.t_fc();
    let mut segments = Vec::new();
    for j in 0..2 {
        let other = 1 - j;
        let detuning = memory[j] - f.gate;
        let free = 2.0 * thetas[j] + 2.0 * memory[j] * t_fc;
        let hold = ((alpha[j] - free) * detuning.signum()).rem_euclid(2.0 * PI) / detuning.abs();
        let idle = FrequencyProgram::Hold(memory[other]);
        let with = |p: FrequencyProgram| {
            let mut programs = [idle.clone(), idle.clone()];
            programs[j] = p;
            programs
        };
        segments.push(Segment {
            label: format!("pg{j}_fc"),
            duration: t_fc,
            programs: with(FrequencyProgram::Ramp(plan.ramps[j])),
            hopping: true,
        });
        if hold > 0.0 {
            segments.push(Segment {
                label: format!("pg{j}_hold"),
                duration: hold,
                programs: with(FrequencyProgram::Hold(f.gate)),
                hopping: true,
            });
        }
        segments.push(Segment {
            label: format!("pg{j}_ifc"),
            duration: t_fc,
            programs: with(FrequencyProgram::Ramp(plan.ramps[j].reversed()?)),
            hopping: true,
        });
    }
    Schedule::new(segments)
}

/// Exchanges `|1_L>|0_L>` with a full beamsplitter and compensates the output phases.
pub fn run_swap_gkp(config: &ExperimentConfig) -> Result<RunOutput> {
    let started = Instant::now();
    let mut report = RunReport::new("swap-gkp", config);
    let plan = build_odb_schedule(config, FRAC_PI_2)?;
    report.add_timing(&plan);

    let grids = config.memory_grids()?;
    let bases = [FockBasis::new(&grids[0])?, FockBasis::new(&grids[1])?];
    let b = [&bases[0], &bases[1]];
    let tol = config.fock_residual_tol;
    let psi0 = Wavefunction2D::product(&gkp_state(&config.gkp(1), &grids[0])?, &gkp_state(&config.gkp(0), &grids[1])?);
    let target = Wavefunction2D::product(&gkp_state(&config.gkp(0), &grids[0])?, &gkp_state(&config.gkp(1), &grids[1])?);
    let options = PropagationOptions {
        dt: config.dt(),
        snapshot_stride: config.snapshot_stride,
        fock_pairs: Vec::new(),
        gate_frequency: plan.timing.omega_m,
        capture_boundaries: false,
    };
    let mut propagator = Propagator::new(gate_spec(config)?, grids)?;
    let run = propagator.run(&psi0, &plan.schedule, &options)?;
    report.absorb(&run);
    let mut snapshots = run.snapshots.clone();

    let phases = swap_phases(&plan.timing);
    report.target_phases.insert("swap_mode0".into(), phases.mode0);
    report.target_phases.insert("swap_mode1".into(), phases.mode1);
    let uncompensated = to_interaction_frame(&run.final_state, b, plan.timing.t3, tol)?;
    let mut full_schedule = plan.schedule.clone();
    let compensated = if config.physical_phase_gate {
        let gate = physical_phase_gate(config, &plan, [phases.mode0, phases.mode1])?;
        let extra = propagator.run(&run.final_state, &gate, &options)?;
        report.absorb(&extra);
        let offset = plan.timing.t3;
        snapshots.extend(extra.snapshots.iter().skip(1).map(|s| Snapshot { t: s.t + offset, ..s.clone() }));
        report.set("phase_gate_duration_s", gate.total_duration());
        let end = offset + gate.total_duration();
        full_schedule.segments.extend(gate.segments);
        to_interaction_frame(&extra.final_state, b, end, tol)?
    } else {
        apply_fock_phase_2d(&uncompensated, b, [-phases.mode0, -phases.mode1], tol)?
    };
    report.schedule = echo_schedule(&full_schedule)?;

    let fid = fidelity(&compensated, &target)?;
    report.fidelity = Some(fid);
    report.set("infidelity", 1.0 - fid.overlap_abs);
    report.set("infidelity_sqr", 1.0 - fid.overlap_sqr);
    report.set("uncompensated_infidelity", 1.0 - fidelity(&uncompensated, &target)?.overlap_abs);

    let mut artifacts = vec![csv_artifact("populations.csv", |out| write_snapshots_csv(out, &[], &snapshots))?];
    let stages = [("input", &psi0), ("uncompensated", &uncompensated), ("compensated", &compensated)];
    for mode in 0..2 {
        let want = marginal(&target, mode)?;
        for (stage, psi) in stages {
            let density = marginal(psi, mode)?;
            if stage != "input" {
                report.set(&format!("l1_{stage}_mode{mode}"), density_l1(&density, &want, grids[mode].dx()));
            }
            artifacts.push(csv_artifact(&format!("marginals_{stage}_mode{mode}.csv"), |out| {
                write_marginal_csv(out, &grids[mode], &density)
            })?);
        }
    }

    let m = |k: &str| report.metrics[k];
    report.checks = vec![
        Check::at_most("infidelity", m("infidelity"), SWAP_INFIDELITY_TOL),
        Check::at_most("l1_compensated_mode0", m("l1_compensated_mode0"), SWAP_MARGINAL_L1_TOL),
        Check::at_most("l1_compensated_mode1", m("l1_compensated_mode1"), SWAP_MARGINAL_L1_TOL),
        Check::at_most("max_norm_drift", report.max_norm_drift, crate::tdse::NORM_DRIFT_TOL),
    ];
    Ok(RunOutput::new(report, artifacts, started))
}

/// Largest population a resonant-exchange model moves between modes detuned by `delta`.
pub fn off_resonant_bound(kappa: f64, delta: f64) -> f64 {
    kappa * kappa / (kappa * kappa + delta * delta)
}

/// Holds `|0, 1>` at each pairing of distinct frequencies for the HOM hold
/// time and records the largest population that reaches `|1, 0>`.
pub fn run_detuning_check(config: &ExperimentConfig) -> Result<RunOutput> {
    let started = Instant::now();
    let mut report = RunReport::new("detune-check", config);
    let f = config.frequencies();
    let kappa = config.kappa()?;
    let duration = config.hold_time(config.theta_over_pi * PI)?;
    if !(duration > 0.0) {
        return Err(OdbError::Configuration("detuning check needs a positive hold time".into()));
    }
    report.set("kappa_rad_s", kappa);
    report.set("duration_s", duration);
    let pairings = [("h_l", f.high, f.low), ("h_m", f.high, f.gate), ("m_l", f.gate, f.low)];
    let mut table = String::from("pair,delta[rad/s],max_transfer,bound,ratio\n");
    let mut worst_ratio = [f64::INFINITY, 0.0f64];
    for (name, w0, w1) in pairings {
        let spec = HamiltonianSpec { omega: [w0, w1], kappa, kappa_reference: (w0 * w1).sqrt(), include_hopping: true };
        let grids = [config.grid(config.detuning_grid_points, w0)?, config.grid(config.detuning_grid_points, w1)?];
        let psi0 = Wavefunction2D::product(&fock_state(0, &grids[0])?, &fock_state(1, &grids[1])?);
        let schedule = Schedule::new(vec![Segment {
            label: format!("hold_{name}"),
            duration,
            programs: [FrequencyProgram::Hold(w0), FrequencyProgram::Hold(w1)],
            hopping: true,
        }])?;
        // Sample the fast off-resonant oscillation at least ten times per period.
        let delta = (w0 - w1).abs();
        let stride = ((2.0 * PI / delta / config.dt() / 10.0).floor() as usize).max(1);
        let options = PropagationOptions {
            dt: config.dt(),
            snapshot_stride: stride,
            fock_pairs: vec![[1, 0]],
            gate_frequency: f.gate,
            capture_boundaries: false,
        };
        let run = Propagator::new(spec, grids)?.run(&psi0, &schedule, &options)?;
        report.absorb(&run);
        let transfer = run.snapshots.iter().map(|s| s.pop_memory[0]).fold(0.0, f64::max);
        let bound = off_resonant_bound(kappa, delta);
        let ratio = transfer / bound;
        worst_ratio = [worst_ratio[0].min(ratio), worst_ratio[1].max(ratio)];
        report.set(&format!("max_transfer_{name}"), transfer);
        report.set(&format!("bound_{name}"), bound);
        report.set(&format!("ratio_{name}"), ratio);
        table.push_str(&format!("{name},{delta:.10e},{transfer:.10e},{bound:.10e},{ratio:.6}\n"));
    }
    report.checks = vec![
        Check::at_most("max_transfer_h_l", report.metrics["max_transfer_h_l"], DETUNED_TRANSFER_TOL),
        Check::between("min_ratio_to_bound", worst_ratio[0], Some(0.5), Some(2.0)),
        Check::between("max_ratio_to_bound", worst_ratio[1], Some(0.5), Some(2.0)),
    ];
    let artifacts = vec![Artifact { file_name: "detuning.csv".into(), contents: table.into_bytes() }];
    Ok(RunOutput::new(report, artifacts, started))
}

fn conversion_ramps(config: &ExperimentConfig) -> Result<[(&'static str, BProfile); 2]> {
    let f = config.frequencies();
    Ok([
        ("down", make_b_profile(f.high, f.gate, config.t_fc(), config.sigma)?),
        ("up", make_b_profile(f.low, f.gate, config.t_fc(), config.sigma)?),
    ])
}

/// Adiabaticity figures of both conversions for `n` in 1, 10, 100.
pub fn run_adiabaticity_table(config: &ExperimentConfig) -> Result<RunOutput> {
    let started = Instant::now();
    config.validate()?;
    let mut report = RunReport::new("adiabaticity", config);
    let mut table = String::from("ramp,n,metric,small_g,cycles\n");
    for (name, profile) in conversion_ramps(config)? {
        let cycles = cycle_count(&profile);
        report.set(&format!("cycles_{name}"), cycles);
        for n in [1u32, 10, 100] {
            let metric = adiabaticity_metric(&profile, n);
            let small = adiabaticity_small_g(&profile, n);
            report.set(&format!("metric_{name}_n{n}"), metric);
            report.set(&format!("small_g_{name}_n{n}"), small);
            table.push_str(&format!("{name},{n},{metric:.10e},{small:.10e},{cycles:.6}\n"));
        }
    }
    report.set("fc_rate_khz_per_us", config.fc_rate_khz_per_us());
    report.set("reference_fc_rate_khz_per_us", REFERENCE_FC_RATE_KHZ_PER_US);
    let artifacts = vec![Artifact { file_name: "adiabaticity.csv".into(), contents: table.into_bytes() }];
    Ok(RunOutput::new(report, artifacts, started))
}

/// Samples the conversion ramps and their inverses into `pulse.csv`.
pub fn run_pulse_export(config: &ExperimentConfig) -> Result<RunOutput> {
    let started = Instant::now();
    config.validate()?;
    let mut report = RunReport::new("pulse-export", config);
    let [(_, down), (_, up)] = conversion_ramps(config)?;
    let profiles = [down, up, down.reversed()?, up.reversed()?];
    let names = ["fc_high", "fc_low", "ifc_high", "ifc_low"];
    for (name, p) in names.iter().zip(&profiles) {
        let v = validate_profile_with(p, config.boundary_tol, config.profile_samples);
        report.set(&format!("boundary_residual_{name}"), v.max_boundary_residual());
        report.set(&format!("min_omega_sq_{name}"), v.min_omega_sq);
        report.set(&format!("theta_{name}"), theta_phase(p)?);
        report.checks.push(Check::at_most(&format!("boundary_residual_{name}"), v.max_boundary_residual(), config.boundary_tol));
    }
    report.set("fc_rate_khz_per_us", config.fc_rate_khz_per_us());
    let labelled: Vec<(&str, &BProfile)> = names.iter().copied().zip(profiles.iter()).collect();
    let artifacts =
        vec![csv_artifact("pulse.csv", |out| write_profiles_csv(out, &labelled, config.profile_samples))?];
    Ok(RunOutput::new(report, artifacts, started))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConvergenceTarget {
    Hom,
    SwapGkp,
}

/// Reruns an experiment at half the step and at twice the grid size.
pub fn run_convergence(config: &ExperimentConfig, target: ConvergenceTarget) -> Result<RunOutput> {
    let started = Instant::now();
    let base = ExperimentConfig { hom_baseline: false, ..config.clone() };
    let (name, tolerance) = match target {
        ConvergenceTarget::Hom => ("hom", HOM_INFIDELITY_TOL),
        ConvergenceTarget::SwapGkp => ("swap-gkp", SWAP_INFIDELITY_TOL),
    };
    let infidelity = |dt: f64, n: usize| -> Result<f64> {
        let mut c = if n == base.grid_points { base.clone() } else { base.doubled_grid() };
        c.dt_ns = dt * 1e9;
        let out = match target {
            ConvergenceTarget::Hom => run_hom(&c)?,
            ConvergenceTarget::SwapGkp => run_swap_gkp(&c)?,
        };
        out.report.metric("infidelity")
    };
    let conv = convergence_check(infidelity, config.dt(), config.grid_points, tolerance)?;
    let mut report = RunReport::new(&format!("convergence-{name}"), config);
    report.checks = vec![
        Check::at_most("dt_change", conv.dt_change, 0.1 * tolerance),
        Check::at_most("grid_change", conv.grid_change, 0.1 * tolerance),
    ];
    report.set("baseline", conv.baseline);
    report.set("half_dt", conv.half_dt);
    report.set("double_grid", conv.double_grid);
    report.convergence = Some(conv);
    Ok(RunOutput::new(report, Vec::new(), started))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> ExperimentConfig {
        ExperimentConfig { grid_points: 32, theta_over_pi: 0.01, hom_baseline: false, ..Default::default() }
    }

    #[test]
    fn config_defaults_round_trip_through_toml() {
        let c = ExperimentConfig::default();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), c);
        assert_eq!(ExperimentConfig::from_toml_str("").unwrap(), c);
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_ordering() {
        assert!(matches!(ExperimentConfig::from_toml_str("omega_x_mhz = 1.0"), Err(OdbError::Parse(_))));
        let r = ExperimentConfig::from_toml_str("omega_m_mhz = 2.7");
        assert!(matches!(r, Err(OdbError::Configuration(_))));
        assert!(ExperimentConfig::from_toml_str("grid_points = 100").is_err());
        assert!(ExperimentConfig::from_toml_str("theta_over_pi = -0.1").is_err());
    }

    #[test]
    fn kappa_override_and_hold_time() {
        let c = ExperimentConfig { kappa_khz: Some(0.5), ..Default::default() };
        assert!((c.kappa().unwrap() - 2.0 * PI * 500.0).abs() < 1e-9);
        assert!((c.hold_time(PI / 4.0).unwrap() - 0.5 * PI / (2.0 * PI * 500.0)).abs() < 1e-15);
    }

    #[test]
    fn schedule_has_three_segments_and_echo() {
        let c = ExperimentConfig::default();
        let plan = build_odb_schedule(&c, PI / 4.0).unwrap();
        let labels: Vec<&str> = plan.schedule.segments.iter().map(|s| s.label.as_str()).collect();
        assert_eq!(labels, ["fc", "hold", "ifc"]);
        assert!((plan.timing.t3 - (2.0 * c.t_fc() + plan.timing.t_b)).abs() < 1e-18);
        let echo = echo_schedule(&plan.schedule).unwrap();
        assert!((echo[0].start_mhz[0] - 2.64).abs() < 1e-5 && (echo[0].end_mhz[1] - 2.42).abs() < 1e-5);
        assert!((echo[2].end_mhz[0] - 2.64).abs() < 1e-5 && (echo[2].end_mhz[1] - 2.20).abs() < 1e-5);
        assert!(plan.timing.theta_hm < 0.0 && plan.timing.theta_lm < 0.0);
    }

    #[test]
    fn zero_angle_skips_the_hold() {
        let plan = build_odb_schedule(&ExperimentConfig::default(), 0.0).unwrap();
        assert_eq!(plan.schedule.segments.len(), 2);
        assert_eq!(plan.timing.t_b, 0.0);
    }

    #[test]
    fn physical_phase_gate_hold_times_are_within_one_beat() {
        let c = ExperimentConfig::default();
        let plan = build_odb_schedule(&c, FRAC_PI_2).unwrap();
        let gate = physical_phase_gate(&c, &plan, [1.0, -2.0]).unwrap();
        let f = c.frequencies();
        let beats = [2.0 * PI / (f.high - f.gate), 2.0 * PI / (f.gate - f.low)];
        for (j, beat) in beats.iter().enumerate() {
            let hold: f64 =
                gate.segments.iter().filter(|s| s.label == format!("pg{j}_hold")).map(|s| s.duration).sum();
            assert!(hold >= 0.0 && hold < *beat);
        }
    }

    #[test]
    fn quick_hom_run_reports_consistent_numbers() {
        let out = run_hom(&quick()).unwrap();
        let r = &out.report;
        assert!(r.max_norm_drift < 1e-8);
        let fid = r.fidelity.unwrap();
        assert!((0.0..=1.0 + 1e-12).contains(&fid.overlap_sqr));
        // A small angle leaves most of the population in |1,1>.
        assert!(r.metric("pop_memory_1_1_final").unwrap() > 0.99);
        assert!(r.metric("infidelity").unwrap() < 1e-3);
        assert!(out.artifacts.iter().any(|a| a.file_name == "populations.csv"));
    }

    #[test]
    fn reports_serialize_and_write() {
        let out = run_adiabaticity_table(&ExperimentConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        out.write_to(dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("report.json")).unwrap();
        let back: RunReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, out.report);
        assert!(dir.path().join("adiabaticity.csv").exists());
    }

    #[test]
    fn fc_rate_vanishes_for_long_ramps() {
        let c = ExperimentConfig { t_fc_us: 1e12, ..Default::default() };
        assert!(c.fc_rate_khz_per_us() < 1e-9);
    }

    #[test]
    fn off_resonant_bound_limits() {
        assert_eq!(off_resonant_bound(1.0, 0.0), 1.0);
        assert_eq!(off_resonant_bound(0.0, 1.0), 0.0);
        assert!((off_resonant_bound(1.0, 1000.0) - 1e-6).abs() < 1e-11);
    }
}
