//! Acceptance run: one PASS/FAIL line per criterion, full-size simulations included.
//!
//! Expect roughly twenty minutes on one core; the convergence gates dominate.

use std::f64::consts::{FRAC_PI_4, PI};
use std::process::ExitCode;
use std::time::Instant;

use odb_core::experiments::{
    build_odb_schedule, run_adiabaticity_table, run_detuning_check, run_hom, run_swap_gkp, ExperimentConfig,
    RunReport, HOM_INFIDELITY_TOL, SWAP_INFIDELITY_TOL,
};
use odb_core::lewis_riesenfeld::{bogoliubov_at, ermakov_solve_from, fc_matrix, theta_phase};
use odb_core::pulses::{make_b_profile, omega_of_t, validate_profile, BProfile, DEFAULT_BOUNDARY_TOL};
use odb_core::states::{fock_state, fock_state_at, Grid1D, Wavefunction2D};
use odb_core::symplectic::{bs_matrix, fc_block, odb_matrix, ps_matrix, TwoModeTransform};
use odb_core::tdse::{
    convergence_check, FrequencyProgram, HamiltonianSpec, PropagationOptions, Propagator, Schedule, Segment,
};
use odb_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TWO_PI: f64 = 2.0 * PI;

struct Line {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(lines: &mut Vec<Line>, name: &'static str, outcome: Result<(bool, String)>) {
    let (pass, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    lines.push(Line { name, pass, detail });
}

fn w(mhz: f64) -> f64 {
    TWO_PI * mhz * 1e6
}

/// `|<1; a|1; b>|^2` for oscillators of frequency `a` and `b`.
fn one_phonon_overlap(a: f64, b: f64) -> f64 {
    (2.0 * (a * b).sqrt() / (a + b)).powi(3)
}

/// Coulomb exchange rate from first principles, rad/s.
fn coulomb_rate(d: f64, mass_u: f64, omega: f64) -> f64 {
    let e = 1.602_176_634e-19;
    let eps0 = 8.854_187_812_8e-12;
    let u = 1.660_539_066_60e-27;
    e * e / (4.0 * PI * eps0 * d.powi(3) * mass_u * u * omega)
}

fn hom_populations(r: &RunReport, secs: f64) -> Result<(bool, String)> {
    let p20 = r.metric("pop_memory_2_0_final")?;
    let p02 = r.metric("pop_memory_0_2_final")?;
    let p11 = r.metric("pop_memory_1_1_final")?;
    let pass = (p20 - 0.5).abs() <= 0.01 && (p02 - 0.5).abs() <= 0.01 && p11 <= 0.01 && secs <= 900.0;
    Ok((pass, format!("P20 = {p20:.5}, P02 = {p02:.5}, P11 = {p11:.2e}, main run {secs:.0} s")))
}

fn hom_infidelity(r: &RunReport) -> Result<(bool, String)> {
    let inf = r.metric("infidelity")?;
    let base = r.metric("baseline_infidelity")?;
    let cross = r.metric("baseline_fock_infidelity")?;
    Ok((
        inf <= HOM_INFIDELITY_TOL && cross <= 1e-4,
        format!("1 - F = {inf:.3e} (hopping off during ramps {base:.2e}, Fock-amplitude cross-check {cross:.2e})"),
    ))
}

fn mid_gate_overlap(r: &RunReport, config: &ExperimentConfig) -> Result<(bool, String)> {
    let f = config.frequencies();
    let oracle = one_phonon_overlap(f.high, f.gate) * one_phonon_overlap(f.low, f.gate);
    let memory = r.metric("pop_memory_1_1_at_fc")?;
    let gate = r.metric("pop_gate_1_1_at_fc")?;
    // The 0.994 overlap shows up in the memory-frequency basis; in the gate
    // basis the converted state is |1,1> to within ramp error.
    let pass = (memory - 0.994).abs() <= 0.002 && (memory - oracle).abs() <= 1e-4 && gate > 0.999;
    Ok((pass, format!("memory basis {memory:.5}, oracle {oracle:.5}, gate basis {gate:.6}")))
}

fn gkp_swap(r: &RunReport) -> Result<(bool, String)> {
    let inf = r.metric("infidelity")?;
    let l1 = [r.metric("l1_compensated_mode0")?, r.metric("l1_compensated_mode1")?];
    let raw = [r.metric("l1_uncompensated_mode0")?, r.metric("l1_uncompensated_mode1")?];
    let pass = inf <= SWAP_INFIDELITY_TOL && l1.iter().all(|&d| d <= 0.05) && raw[0] > l1[0] && raw[1] > l1[1];
    Ok((
        pass,
        format!(
            "1 - |<>| = {inf:.3e}, L1 = {:.2e} / {:.2e} (uncompensated {:.2} / {:.2})",
            l1[0], l1[1], raw[0], raw[1]
        ),
    ))
}

fn calibration(config: &ExperimentConfig) -> Result<(bool, String)> {
    let kappa = config.kappa()?;
    let oracle = coulomb_rate(43.8e-6, 40.0, w(2.42));
    let hz = kappa / TWO_PI;
    let angle = kappa * 579e-6 / 2.0;
    let t_b = build_odb_schedule(config, FRAC_PI_4)?.timing.t_b;
    let pass = (kappa - oracle).abs() <= 1e-9 * oracle
        && (hz - 432.0).abs() <= 0.005 * 432.0
        && (angle - FRAC_PI_4).abs() <= 0.005 * FRAC_PI_4;
    Ok((pass, format!("kappa = 2pi x {hz:.2} Hz, kappa x 579 us / 2 = {angle:.5} (pi/4 = {FRAC_PI_4:.5}), T_B = {:.1} us", t_b * 1e6)))
}

fn adiabaticity(config: &ExperimentConfig) -> Result<(bool, String)> {
    let r = run_adiabaticity_table(config)?.report;
    let down = r.metric("metric_down_n1")?;
    let up = r.metric("metric_up_n1")?;
    let c_up = r.metric("cycles_up")?;
    let c_down = r.metric("cycles_down")?;
    let rate = r.metric("fc_rate_khz_per_us")?;
    let pass = (down - 6e-4).abs() <= 0.1 * 6e-4
        && (up - 7e-4).abs() <= 0.1 * 7e-4
        && (c_up - 9.0).abs() <= 0.05 * 9.0
        && (rate - 55.0).abs() < 1e-9;
    Ok((
        pass,
        format!("metric down {down:.3e}, up {up:.3e}; cycles up {c_up:.2} (down {c_down:.2}); FC rate {rate} kHz/us"),
    ))
}

fn random_profile(rng: &mut ChaCha8Rng) -> BProfile {
    loop {
        let wi = w(rng.gen_range(1.5..3.0));
        let wf = wi * rng.gen_range(0.8..1.25);
        let t = rng.gen_range(2e-6..10e-6);
        let sigma = rng.gen_range(3.0..8.0);
        if let Ok(p) = make_b_profile(wi, wf, t, sigma) {
            return p;
        }
    }
}

fn random_transform(rng: &mut ChaCha8Rng, ramps: &[BProfile]) -> Result<TwoModeTransform> {
    let mut m = TwoModeTransform::identity();
    for _ in 0..6 {
        let layer = match rng.gen_range(0..3) {
            0 => bs_matrix(rng.gen_range(-PI..PI)),
            1 => ps_matrix(rng.gen_range(-1e4..1e4), rng.gen_range(-1e4..1e4)),
            _ => fc_block(
                &fc_matrix(&ramps[rng.gen_range(0..ramps.len())])?,
                &fc_matrix(&ramps[rng.gen_range(0..ramps.len())])?,
            ),
        };
        m = layer.then_after(&m);
    }
    Ok(m)
}

fn property_suite(config: &ExperimentConfig) -> Result<(bool, String)> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20240611);
    let mut notes = Vec::new();
    let mut pass = true;

    let mut worst = 0.0f64;
    for _ in 0..20 {
        let p = random_profile(&mut rng);
        for k in 0..1000 {
            let t = p.duration() * k as f64 / 999.0;
            worst = worst.max((bogoliubov_at(&p, t)?.constraint() - 1.0).abs());
        }
    }
    pass &= worst <= 1e-12;
    notes.push(format!("bogoliubov {worst:.1e}"));

    let f = config.frequencies();
    let ramps = [
        make_b_profile(f.high, f.gate, config.t_fc(), config.sigma)?,
        make_b_profile(f.low, f.gate, config.t_fc(), config.sigma)?,
    ];
    let (mut ode, mut resid, mut theta_gap, mut round_trip) = (0.0f64, 0.0f64, 0.0f64, true);
    for p in &ramps {
        let start = p.ramp(0.0)?;
        let traj = ermakov_solve_from(|t| omega_of_t(p, t).unwrap(), p.omega_i, p.duration(), (start.b, start.bdot), None)?;
        for (t, b) in traj.t.iter().zip(&traj.b) {
            ode = ode.max((b - p.ramp(*t)?.b).abs());
        }
        for k in 0..=1000 {
            let t = p.duration() * k as f64 / 1000.0;
            let r = p.ramp(t)?;
            let w_t = omega_of_t(p, t)?;
            let e = r.bddot + w_t * w_t * r.b - p.omega_i.powi(2) / r.b.powi(3);
            resid = resid.max(e.abs() / p.omega_i.powi(2));
        }
        let back = p.reversed()?;
        theta_gap = theta_gap.max((theta_phase(p)? - theta_phase(&back)?).abs());
        let total = fc_matrix(&back)?.then_after(&fc_matrix(p)?);
        round_trip &= total.off_diagonal() <= 2.0 * validate_profile(p, DEFAULT_BOUNDARY_TOL).max_boundary_residual();
    }
    pass &= ode <= 1e-8 && resid <= 1e-8 && theta_gap <= 1e-9 && round_trip;
    notes.push(format!("ermakov |db| {ode:.1e} residual {resid:.1e}"));
    notes.push(format!("theta up/down {theta_gap:.1e}"));
    notes.push(format!("fc-ifc pure phase {round_trip}"));

    let mut metric = 0.0f64;
    for _ in 0..100 {
        metric = metric.max(random_transform(&mut rng, &ramps)?.metric_error());
    }
    let plan = build_odb_schedule(config, FRAC_PI_4)?;
    metric = metric.max(odb_matrix(FRAC_PI_4, &plan.timing).metric_error());
    pass &= metric <= 1e-12;
    notes.push(format!("metric {metric:.1e}"));

    // Resonant exchange at the gate frequency on memory-scaled grids, out to 2 T_B.
    let kappa = config.kappa()?;
    let grids = [Grid1D::balanced(32, f.high)?, Grid1D::balanced(32, f.low)?];
    let spec = HamiltonianSpec { omega: [f.high, f.low], kappa, kappa_reference: f.gate, include_hopping: true };
    let psi = Wavefunction2D::product(&fock_state_at(0, f.gate, &grids[0])?, &fock_state_at(1, f.gate, &grids[1])?);
    let hold = Schedule::new(vec![Segment {
        label: "hold".into(),
        duration: 2.0 * plan.timing.t_b,
        programs: [FrequencyProgram::Hold(f.gate), FrequencyProgram::Hold(f.gate)],
        hopping: true,
    }])?;
    let opts = PropagationOptions {
        dt: 5e-9,
        snapshot_stride: 5000,
        fock_pairs: vec![[0, 1]],
        gate_frequency: f.gate,
        capture_boundaries: false,
    };
    let run = Propagator::new(spec, grids)?.run(&psi, &hold, &opts)?;
    let rabi = run
        .snapshots
        .iter()
        .map(|s| (s.pop_gate[0] - (0.5 * kappa * s.t).cos().powi(2)).abs())
        .fold(0.0, f64::max);
    let mut drift = run.max_norm_drift;
    pass &= rabi <= 1e-4;
    notes.push(format!("rabi {rabi:.1e}"));

    // Conversion alone, hopping off: |n, n> stays |n, n> in the gate basis.
    let grids = config.memory_grids()?;
    let mut ramp = build_odb_schedule(config, 0.0)?.schedule.segments[0].clone();
    ramp.hopping = false;
    let fc = Schedule::new(vec![ramp])?;
    let mut propagator = Propagator::new(spec, grids)?;
    let mut kept = 1.0f64;
    for n in 0..=5 {
        let psi = Wavefunction2D::product(&fock_state(n, &grids[0])?, &fock_state(n, &grids[1])?);
        let opts = PropagationOptions { fock_pairs: vec![[n, n]], dt: config.dt(), snapshot_stride: 1 << 20, ..opts.clone() };
        let run = propagator.run(&psi, &fc, &opts)?;
        kept = kept.min(run.snapshots.last().map_or(0.0, |s| s.pop_gate[0]));
        drift = drift.max(run.max_norm_drift);
    }
    pass &= kept >= 0.999 && drift <= 1e-8;
    notes.push(format!("fc populations {kept:.5}, norm drift {drift:.1e}"));

    let secs = started.elapsed().as_secs_f64();
    pass &= secs < 60.0;
    notes.push(format!("{secs:.0} s"));
    Ok((pass, notes.join("; ")))
}

fn detuning(config: &ExperimentConfig) -> Result<(bool, String)> {
    let r = run_detuning_check(config)?.report;
    let f = config.frequencies();
    let kappa = coulomb_rate(43.8e-6, 40.0, f.gate);
    let oracle = (kappa / (f.high - f.low)).powi(2);
    let transfer = r.metric("max_transfer_h_l")?;
    let pass = transfer <= 1e-5 && transfer <= 2.0 * oracle && transfer >= 0.5 * oracle && r.all_checks_pass();
    Ok((pass, format!("max transfer {transfer:.3e} vs (kappa/delta)^2 = {oracle:.3e}")))
}

/// Infidelity of a rerun, or the already computed one at the default step and grid.
fn infidelity_at(plain: &ExperimentConfig, base: f64, swap_gate: bool, dt: f64, n: usize) -> Result<f64> {
    if dt == plain.dt() && n == plain.grid_points {
        return Ok(base);
    }
    let mut c = if n == plain.grid_points { plain.clone() } else { plain.doubled_grid() };
    c.dt_ns = dt * 1e9;
    let out = if swap_gate { run_swap_gkp(&c)? } else { run_hom(&c)? };
    out.report.metric("infidelity")
}

fn convergence(config: &ExperimentConfig, hom: &RunReport, swap: &RunReport) -> Result<(bool, String)> {
    let plain = ExperimentConfig { hom_baseline: false, ..config.clone() };
    let (hb, sb) = (hom.metric("infidelity")?, swap.metric("infidelity")?);
    let (dt, n) = (plain.dt(), plain.grid_points);
    let h = convergence_check(|dt, n| infidelity_at(&plain, hb, false, dt, n), dt, n, HOM_INFIDELITY_TOL)?;
    let s = convergence_check(|dt, n| infidelity_at(&plain, sb, true, dt, n), dt, n, SWAP_INFIDELITY_TOL)?;
    Ok((
        h.pass && s.pass,
        format!(
            "HOM dt {:.1e} grid {:.1e} (limit {:.0e}); SWAP dt {:.1e} grid {:.1e} (limit {:.0e})",
            h.dt_change,
            h.grid_change,
            0.1 * HOM_INFIDELITY_TOL,
            s.dt_change,
            s.grid_change,
            0.1 * SWAP_INFIDELITY_TOL
        ),
    ))
}

fn main() -> ExitCode {
    let config = ExperimentConfig::default();
    let mut lines = Vec::new();

    report(&mut lines, "calibration identity", calibration(&config));
    report(&mut lines, "adiabaticity table", adiabaticity(&config));
    report(&mut lines, "property suite", property_suite(&config));
    report(&mut lines, "detuning suppression", detuning(&config));

    let hom = run_hom(&config).map(|o| o.report);
    let secs = hom.as_ref().ok().and_then(|r| r.metric("main_run_s").ok()).unwrap_or(f64::NAN);
    report(&mut lines, "HOM populations", hom.as_ref().map_err(clone_err).and_then(|r| hom_populations(r, secs)));
    report(&mut lines, "HOM infidelity", hom.as_ref().map_err(clone_err).and_then(hom_infidelity));
    report(&mut lines, "mid-gate overlap", hom.as_ref().map_err(clone_err).and_then(|r| mid_gate_overlap(r, &config)));

    let swap_config = ExperimentConfig { hom_baseline: false, ..config.clone() };
    let swap = run_swap_gkp(&swap_config).map(|o| o.report);
    report(&mut lines, "GKP SWAP", swap.as_ref().map_err(clone_err).and_then(gkp_swap));

    let conv = match (&hom, &swap) {
        (Ok(h), Ok(s)) => convergence(&config, h, s),
        _ => Ok((false, "skipped: a baseline run failed".into())),
    };
    report(&mut lines, "convergence gates", conv);

    let failed: Vec<&str> = lines.iter().filter(|l| !l.pass).map(|l| l.name).collect();
    println!("{} of {} criteria passed", lines.len() - failed.len(), lines.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        for l in lines.iter().filter(|l| !l.pass) {
            eprintln!("failed: {} ({})", l.name, l.detail);
        }
        ExitCode::FAILURE
    }
}

fn clone_err(e: &odb_core::OdbError) -> odb_core::OdbError {
    odb_core::OdbError::Domain(e.to_string())
}
