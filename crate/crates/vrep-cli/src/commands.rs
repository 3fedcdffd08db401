//! The five subcommands and the run-directory file layout.
//!
//! A run directory accumulates: `trace.bin` and `rdm0.bin` from
//! generate-reference, `ks0.bin` from init-ks, then `potential.bin`,
//! `ks_density.bin`, `ks_final.bin`, `diagnostics.txt`, and metadata files
//! from invert. Reports are emitted next to them as `report_t*.txt`.
//! Commands print brief summaries on stdout; everything a rerun needs to
//! reproduce the files is in the config and the files themselves (no
//! timestamps, so identical runs are byte-identical).

use std::fs;
use std::fmt::Write as _;
use std::f64::consts::{FRAC_PI_2, PI};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::SymmetricEigen;
use vrep_core::io;
use vrep_core::krylov::SolveOptions;
use vrep_core::ksinit::{assign_phases_single, state_from_density_and_phases};
use vrep_core::lattice::{kinetic_dense, Grid, KineticOp};
use vrep_core::propagation::{invert_trajectory_from, PropagatorConfig};
use vrep_core::state::{DensityTrace, KSState};
use vrep_core::systems::{
    harmonic_test, ks_state_from_frame, natural_orbital_seeds, reference_trajectory_seeded,
    two_electron_desk, two_electron_system, InitialState, KsInitParams, ModelSystem,
};
use vrep_core::{Error, C64};

use crate::config::{method_name, RunConfig, System};

/// Failure classes mapped to exit codes: Config -> 2, Numerical -> 3,
/// Io -> 4 (0 is success; bad command lines exit 2 via the parser).
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numerical(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(s) | CliError::Numerical(s) | CliError::Io(s) => s,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match &e {
            Error::Io(_) | Error::Format(_) => CliError::Io(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

/// File names inside a run directory.
pub struct RunDir {
    dir: PathBuf,
}

impl RunDir {
    pub fn new(dir: &Path) -> Self {
        RunDir { dir: dir.to_path_buf() }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn trace(&self) -> PathBuf {
        self.path("trace.bin")
    }
    pub fn rdm0(&self) -> PathBuf {
        self.path("rdm0.bin")
    }
    pub fn ks0(&self) -> PathBuf {
        self.path("ks0.bin")
    }
    pub fn potential(&self) -> PathBuf {
        self.path("potential.bin")
    }
    pub fn ks_density(&self) -> PathBuf {
        self.path("ks_density.bin")
    }
    pub fn ks_final(&self) -> PathBuf {
        self.path("ks_final.bin")
    }
    pub fn diagnostics(&self) -> PathBuf {
        self.path("diagnostics.txt")
    }
    pub fn reference_meta(&self) -> PathBuf {
        self.path("reference_meta.txt")
    }
    pub fn init_meta(&self) -> PathBuf {
        self.path("init_meta.txt")
    }
    pub fn invert_meta(&self) -> PathBuf {
        self.path("invert_meta.txt")
    }
    pub fn report(&self, t: f64) -> PathBuf {
        self.path(&format!("report_t{t:.4}.txt"))
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text)
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

fn linf_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// The model the config describes; presets may override dt and steps,
/// custom systems are assembled from the grid keys and the potential table.
pub fn build_system(cfg: &RunConfig) -> Result<ModelSystem, CliError> {
    let mut sys = match cfg.system {
        System::Harmonic => harmonic_test(),
        System::TwoElectron => {
            if cfg.full_scale {
                two_electron_system()
            } else {
                two_electron_desk()
            }
        }
        System::Custom => build_custom(cfg)?,
    };
    if let Some(dt) = cfg.dt {
        sys.dt = dt;
    }
    if let Some(steps) = cfg.steps {
        sys.steps = steps;
    }
    Ok(sys)
}

fn build_custom(cfg: &RunConfig) -> Result<ModelSystem, CliError> {
    let points = cfg.points.expect("validated");
    let x_max = cfg.x_max.expect("validated");
    let dx = 2.0 * x_max / (points as f64 - 1.0);
    let grid = Grid::new(
        1,
        points,
        dx,
        vec![cfg.offset.unwrap_or(0.0)],
        cfg.mass.unwrap_or(1.0),
        1.0,
    )
    .map_err(|e| CliError::Config(e.to_string()))?;

    let table_path = cfg.potential_file.as_ref().expect("validated");
    let table = read_potential_table(table_path, grid.len())?;

    let initial = match &cfg.initial_file {
        Some(p) => {
            let st = io::read_state(p)?;
            if st.grid() != &grid {
                return Err(CliError::Config(format!(
                    "initial state file {} uses a different grid than the configured one",
                    p.display()
                )));
            }
            if st.orbitals().len() != 1 {
                return Err(CliError::Config(format!(
                    "initial state file {} holds {} orbitals, custom systems take one",
                    p.display(),
                    st.orbitals().len()
                )));
            }
            InitialState::Vector(st.orbitals()[0].clone())
        }
        None => InitialState::Vector(ground_state(&grid, &table)?),
    };

    let xs = grid.axis_coordinates(0);
    let x0 = xs[0];
    let last = table.len() - 1;
    let tbl = table;
    Ok(ModelSystem {
        grid,
        external: Arc::new(move |x, _t| {
            let i = ((x - x0) / dx).round().clamp(0.0, last as f64) as usize;
            tbl[i]
        }),
        interaction: None,
        initial,
        dt: cfg.dt.unwrap_or(1.0),
        steps: cfg.steps.unwrap_or(0),
    })
}

fn read_potential_table(path: &Path, len: usize) -> Result<Vec<f64>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("cannot read potential file {}: {e}", path.display())))?;
    let mut vals = Vec::new();
    for tok in text.split_whitespace() {
        let x: f64 = tok.parse().map_err(|_| {
            CliError::Config(format!(
                "potential file {}: non-numeric entry {tok:?}",
                path.display()
            ))
        })?;
        if !x.is_finite() {
            return Err(CliError::Config(format!(
                "potential file {}: non-finite entry",
                path.display()
            )));
        }
        vals.push(x);
    }
    if vals.len() != len {
        return Err(CliError::Config(format!(
            "potential file {}: {} values for a {len}-point grid",
            path.display(),
            vals.len()
        )));
    }
    Ok(vals)
}

fn ground_state(grid: &Grid, v: &[f64]) -> Result<Vec<C64>, CliError> {
    let mut h = kinetic_dense(grid, grid.len())?;
    for i in 0..grid.len() {
        h[(i, i)] += v[i];
    }
    let eig = SymmetricEigen::new(h);
    let mut k = 0;
    for i in 1..eig.eigenvalues.len() {
        if eig.eigenvalues[i] < eig.eigenvalues[k] {
            k = i;
        }
    }
    Ok(eig
        .eigenvectors
        .column(k)
        .iter()
        .map(|&x| C64::new(x, 0.0))
        .collect())
}

fn propagator_config(cfg: &RunConfig, dt: f64, particles: usize) -> PropagatorConfig {
    let mut p = PropagatorConfig::new(dt);
    p.krylov_dim = cfg.resolved_krylov_dim(particles);
    p.sc_tol = cfg.sc_tol;
    p.inner_tol = cfg.inner_tol;
    p.max_inner = cfg.max_inner;
    p.max_outer = cfg.max_outer;
    p.max_dv = cfg.max_dv;
    p.outer_relax = cfg.outer_relax;
    p.e0 = cfg.e0;
    p.reassign_phases_every_step = cfg.reassign_phases;
    p.phase_tol = cfg.phase_tol;
    p.phase_max_iter = cfg.phase_max_iter;
    p.blowup_threshold = cfg.blowup_threshold;
    p.method = cfg.method;
    p.solver = SolveOptions {
        tol: cfg.solver_tol,
        max_iter: cfg.solver_max_iter,
        rcond: cfg.rcond,
    };
    p.prune_threshold = cfg.prune_threshold;
    p.dense_cap = cfg.dense_cap;
    p
}

fn ksinit_params(cfg: &RunConfig) -> KsInitParams {
    KsInitParams {
        sweep_tol: cfg.sweep_tol,
        max_sweeps: cfg.max_sweeps,
        phase_tol: cfg.phase_tol,
        phase_max_iter: cfg.phase_max_iter,
        method: cfg.method,
    }
}

pub fn cmd_generate_reference(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = RunDir::new(&cfg.out);
    fs::create_dir_all(&cfg.out)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", cfg.out.display())))?;
    let sys = build_system(cfg)?;
    let kdim = cfg.resolved_krylov_dim(sys.particles());
    let seed = if cfg.seed == 0 { None } else { Some(cfg.seed) };
    let run = reference_trajectory_seeded(&sys, kdim, cfg.eig_tol, seed)?;

    io::write_density_trace(&dir.trace(), &run.trace)?;
    io::write_rdm(&dir.rdm0(), &sys.grid, &run.initial_rdm)?;

    let mut meta = String::new();
    let _ = writeln!(meta, "command generate-reference");
    let _ = writeln!(meta, "system {}", cfg.system.name());
    let _ = writeln!(meta, "full_scale {}", cfg.full_scale);
    let _ = writeln!(meta, "particles {}", sys.particles());
    let _ = writeln!(meta, "points {}", sys.grid.points_per_dim());
    let _ = writeln!(meta, "dx {}", sys.grid.dx());
    let _ = writeln!(meta, "offset {}", sys.grid.offsets()[0]);
    let _ = writeln!(meta, "mass {}", sys.grid.mass());
    let _ = writeln!(meta, "frames {}", run.trace.frames());
    let _ = writeln!(meta, "dt {}", sys.dt);
    let _ = writeln!(meta, "krylov_dim {kdim}");
    let _ = writeln!(meta, "seed {}", cfg.seed);
    if let Some(t) = &run.triplet {
        let _ = writeln!(meta, "triplet_energy {}", t.energy);
        let _ = writeln!(meta, "triplet_residual {:e}", t.residual);
        let _ = writeln!(meta, "triplet_matvecs {}", t.matvecs);
    }
    write_text(&dir.reference_meta(), &meta)?;

    println!(
        "wrote {} frames of {} points to {}",
        run.trace.frames(),
        sys.grid.points_per_dim(),
        dir.trace().display()
    );
    Ok(())
}

/// Build the KS state matching a trace frame and report the achieved
/// ||ndot - ndot_aim||_inf.
///
/// One particle: the KS orbital at frame 0 is the model's own initial
/// wavepacket (amplitudes sqrt(n), phases from the analytic state), polished
/// by Newton phase assignment. Starting the phases from zero instead would
/// flip the sign of every other nodal domain; that state shares n and ndot
/// with the true one but not n-double-dot, and the potential forcing it
/// along the target trajectory is near-singular at the nodes. Restart
/// frames have no analytic state and fall back to zero initial phases.
///
/// Two particles: natural-orbital seeds from the stored initial 1RDM, then
/// the density sweep and multi-orbital phase assignment.
fn build_ks_state(
    cfg: &RunConfig,
    trace: &DensityTrace,
    frame: usize,
    dir: &RunDir,
) -> Result<(KSState, f64), CliError> {
    let grid = &trace.grid;
    let state = match trace.particles {
        1 => {
            let n = &trace.n[frame];
            let theta0 = if frame == 0 {
                let sys = build_system(cfg)?;
                if sys.grid != *grid {
                    return Err(CliError::Config(
                        "configured system grid does not match the trace; check system/full_scale"
                            .into(),
                    ));
                }
                let psi0 = sys.analytic_initial().ok_or_else(|| {
                    CliError::Config(
                        "one-particle trace but the configured system is two-particle".into(),
                    )
                })?;
                psi0.iter().map(|z| z.arg()).collect()
            } else {
                vec![0.0; grid.len()]
            };
            let pv = assign_phases_single(
                n,
                &trace.n_dot[frame],
                &theta0,
                grid,
                cfg.phase_tol,
                cfg.phase_max_iter,
                cfg.method,
            )?;
            state_from_density_and_phases(grid, n, &pv.theta)?
        }
        2 => {
            let (rdm_grid, rdm) = io::read_rdm(&dir.rdm0())?;
            if &rdm_grid != grid {
                return Err(CliError::Config(
                    "reduced density matrix and trace use different grids".into(),
                ));
            }
            let (u1, u2) = natural_orbital_seeds(&rdm)?;
            ks_state_from_frame(
                grid,
                &u1,
                &u2,
                &trace.n[frame],
                &trace.n_dot[frame],
                &ksinit_params(cfg),
            )?
        }
        p => {
            return Err(CliError::Config(format!(
                "traces with {p} particles are not supported"
            )))
        }
    };
    let kin = KineticOp::new(grid);
    let achieved = linf_diff(&state.density_derivative(&kin), &trace.n_dot[frame]);
    Ok((state, achieved))
}

pub fn cmd_init_ks(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = RunDir::new(&cfg.out);
    let trace = io::read_density_trace(&dir.trace())?;
    let (state, achieved) = build_ks_state(cfg, &trace, 0, &dir)?;
    io::write_state(&dir.ks0(), &state)?;

    let mut meta = String::new();
    let _ = writeln!(meta, "command init-ks");
    let _ = writeln!(meta, "frame 0");
    let _ = writeln!(meta, "time {}", trace.times[0]);
    let _ = writeln!(meta, "particles {}", trace.particles);
    let _ = writeln!(meta, "orbitals {}", state.orbitals().len());
    let _ = writeln!(meta, "ndot_residual {achieved:e}");
    write_text(&dir.init_meta(), &meta)?;

    println!(
        "wrote {} with ndot residual {achieved:.3e}",
        dir.ks0().display()
    );
    Ok(())
}

pub fn cmd_invert(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = RunDir::new(&cfg.out);
    let trace = io::read_density_trace(&dir.trace())?;

    let start_frame = match cfg.restart_time {
        Some(t) => trace
            .frame_at(t)
            .map_err(|e| CliError::Config(e.to_string()))?,
        None => 0,
    };

    // A restart rebuilds the state from the trace with fresh phase
    // assignment; a plain run consumes the state init-ks wrote.
    let state = if cfg.restart_time.is_some() {
        let (state, achieved) = build_ks_state(cfg, &trace, start_frame, &dir)?;
        println!(
            "restarting at t = {} (frame {start_frame}) with fresh phases, ndot residual {achieved:.3e}",
            trace.times[start_frame]
        );
        state
    } else {
        let st = io::read_state(&dir.ks0())?;
        if st.grid() != &trace.grid {
            return Err(CliError::Config(
                "KS state and trace use different grids".into(),
            ));
        }
        st
    };

    let dt = if trace.dt() > 0.0 {
        trace.dt()
    } else {
        cfg.dt.unwrap_or(1.0)
    };
    let pcfg = propagator_config(cfg, dt, trace.particles);
    let outcome = invert_trajectory_from(&trace, &state, None, &pcfg, start_frame)?;

    io::write_potential_trace(&dir.potential(), &trace.grid, trace.particles, &outcome.potential)?;
    let frames_done = outcome.potential.len();
    let ks_trace = DensityTrace {
        grid: trace.grid.clone(),
        particles: trace.particles,
        times: outcome.potential.times.clone(),
        n: outcome.densities.clone(),
        n_dot: outcome.density_derivatives.clone(),
        n_ddot: vec![vec![0.0; trace.grid.len()]; frames_done],
    };
    io::write_density_trace(&dir.ks_density(), &ks_trace)?;
    io::write_state(&dir.ks_final(), &outcome.final_state)?;

    let mut diag = String::from(
        "# frame time density_error outer inner solver fb_residual clamps pruned psi_delta phase_iters phase_failed\n",
    );
    for (i, d) in outcome.diagnostics.iter().enumerate() {
        let _ = writeln!(
            diag,
            "{} {} {:e} {} {} {} {:e} {} {} {:e} {} {}",
            start_frame + i,
            outcome.potential.times[i],
            outcome.density_errors[i],
            d.outer_iterations,
            d.inner_iterations,
            d.solver_iterations,
            d.fb_residual,
            d.clamp_activations,
            d.pruned_points,
            d.psi_delta,
            d.phase_iterations,
            d.phase_reassign_failed,
        );
    }
    write_text(&dir.diagnostics(), &diag)?;

    let max_err = outcome.density_errors.iter().cloned().fold(0.0, f64::max);
    let mut meta = String::new();
    let _ = writeln!(meta, "command invert");
    let _ = writeln!(meta, "method {}", method_name(cfg.method));
    let _ = writeln!(meta, "start_frame {start_frame}");
    let _ = writeln!(meta, "start_time {}", trace.times[start_frame]);
    let _ = writeln!(meta, "frames_total {}", trace.frames());
    let _ = writeln!(meta, "frames_completed {frames_done}");
    let _ = writeln!(meta, "final_time {}", outcome.potential.times[frames_done - 1]);
    let _ = writeln!(meta, "max_density_error {max_err:e}");
    let outer: usize = outcome.diagnostics.iter().map(|d| d.outer_iterations).sum();
    let solver: usize = outcome.diagnostics.iter().map(|d| d.solver_iterations).sum();
    let clamps: usize = outcome.diagnostics.iter().map(|d| d.clamp_activations).sum();
    let phase_failures = outcome
        .diagnostics
        .iter()
        .filter(|d| d.phase_reassign_failed)
        .count();
    let _ = writeln!(meta, "total_outer_iterations {outer}");
    let _ = writeln!(meta, "total_solver_iterations {solver}");
    let _ = writeln!(meta, "clamp_activations {clamps}");
    let _ = writeln!(meta, "phase_reassign_failures {phase_failures}");
    match &outcome.failure {
        None => {
            let _ = writeln!(meta, "failure none");
        }
        Some(f) => {
            let _ = writeln!(meta, "failure_time {}", f.time);
            let _ = writeln!(meta, "failure_step {}", f.step);
            let _ = writeln!(meta, "failure_reason {}", f.reason);
            let _ = writeln!(meta, "failure_density_error {:e}", f.density_error);
        }
    }
    write_text(&dir.invert_meta(), &meta)?;

    match outcome.failure {
        Some(f) => Err(CliError::Numerical(format!(
            "inversion failed at t = {} (step {}): {}; partial trace of {frames_done} frames kept",
            f.time, f.step, f.reason
        ))),
        None => {
            println!(
                "inverted {frames_done} frames to t = {}, max density error {max_err:.3e}",
                outcome.potential.times[frames_done - 1]
            );
            Ok(())
        }
    }
}

fn default_snapshots(cfg: &RunConfig, trace: &DensityTrace) -> Vec<f64> {
    match cfg.system {
        System::Harmonic => vec![0.0, FRAC_PI_2, PI],
        System::TwoElectron => vec![0.0, 3.5, 5.3, 5.75],
        System::Custom => {
            let t0 = trace.times[0];
            let t1 = *trace.times.last().unwrap();
            let mut ts = vec![t0, t0 + 0.5 * (t1 - t0), t1];
            ts.dedup();
            ts
        }
    }
}

fn nearest_index(times: &[f64], t: f64, tol: f64) -> Option<usize> {
    let mut best = None;
    let mut best_d = f64::INFINITY;
    for (i, &ti) in times.iter().enumerate() {
        let d = (ti - t).abs();
        if d < best_d {
            best_d = d;
            best = Some(i);
        }
    }
    best.filter(|_| best_d <= tol)
}

pub fn cmd_report(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = RunDir::new(&cfg.out);
    let trace = io::read_density_trace(&dir.trace())?;
    let pf = io::read_potential_trace(&dir.potential())?;
    let ksd = io::read_density_trace(&dir.ks_density())?;
    if pf.grid != trace.grid || ksd.grid != trace.grid {
        return Err(CliError::Config(
            "run directory files use different grids".into(),
        ));
    }
    if ksd.frames() != pf.trace.len() {
        return Err(CliError::Config(
            "run directory inconsistent: KS density and potential frame counts differ".into(),
        ));
    }
    let sys = build_system(cfg)?;
    if sys.grid != trace.grid {
        return Err(CliError::Config(
            "configured system grid does not match the trace; check system/full_scale".into(),
        ));
    }

    let times = cfg
        .snapshots
        .clone()
        .unwrap_or_else(|| default_snapshots(cfg, &trace));
    let tol = if trace.dt() > 0.0 { 0.5 * trace.dt() } else { 1e-12 };
    let xs = trace.grid.axis_coordinates(0);
    let mut emitted = 0;

    for &t in &times {
        let fi = match trace.frame_at(t) {
            Ok(i) => i,
            Err(_) => {
                eprintln!("warning: snapshot t = {t} is not on the trace mesh; skipping");
                continue;
            }
        };
        let ti = trace.times[fi];
        let pi = match nearest_index(&pf.trace.times, ti, tol) {
            Some(i) => i,
            None => {
                eprintln!("warning: snapshot t = {t} is not covered by the inverted run; skipping");
                continue;
            }
        };

        let n_exact = &trace.n[fi];
        let n_ks = &ksd.n[pi];
        let v_exact = sys.potential_at(ti)?;
        let v_rec = &pf.trace.v[pi];

        // Gauge: shift the recovered potential to coincide with the exact
        // one at the maximum-density point; the error there is zero by
        // definition, as is the density error at the inversion's own first
        // frame.
        let p = argmax(n_exact);
        let shift = v_exact[p] - v_rec[p];
        let mut body = String::new();
        let _ = writeln!(body, "# snapshot t = {ti} (frame {fi})");
        let _ = writeln!(body, "# x n_exact n_ks v_exact v_recovered abs_dn abs_dv");
        for j in 0..xs.len() {
            let v_al = v_rec[j] + shift;
            let dn = if pi == 0 {
                0.0
            } else {
                (n_ks[j] - n_exact[j]).abs()
            };
            let dv = if j == p { 0.0 } else { (v_al - v_exact[j]).abs() };
            let _ = writeln!(
                body,
                "{:.10e} {:.10e} {:.10e} {:.10e} {:.10e} {:.10e} {:.10e}",
                xs[j], n_exact[j], n_ks[j], v_exact[j], v_al, dn, dv
            );
        }
        let path = dir.report(ti);
        write_text(&path, &body)?;
        println!("wrote {}", path.display());
        emitted += 1;
    }

    if emitted == 0 {
        return Err(CliError::Config(
            "no requested snapshot is covered by the run directory".into(),
        ));
    }
    Ok(())
}
