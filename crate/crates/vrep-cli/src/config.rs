//! Flat key-value run configuration.
//!
//! A config file holds `key value` lines; blank lines and lines starting
//! with `#` are skipped. Every key has a default, so an empty (or absent)
//! file is a valid configuration. Unknown keys are rejected. Command-line
//! flags override file values. `print-config` dumps the merged result in a
//! form that parses back to the same configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use vrep_core::krylov::SolveMethod;

use crate::commands::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum System {
    Harmonic,
    TwoElectron,
    Custom,
}

impl System {
    pub fn name(self) -> &'static str {
        match self {
            System::Harmonic => "harmonic",
            System::TwoElectron => "two_electron",
            System::Custom => "custom",
        }
    }
}

pub fn method_name(m: SolveMethod) -> &'static str {
    match m {
        SolveMethod::Krylov => "minres_qlp",
        SolveMethod::Lsqr => "lsqr",
        SolveMethod::Pseudoinverse => "pinv",
    }
}

/// Everything a run needs, merged from defaults, the config file, and
/// flags. `None` in the optional numeric fields means "per-system default"
/// (dt, steps, krylov_dim, grid parameters) or "disabled" (restart_time,
/// max_dv, solver_max_iter, snapshots).
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub system: System,
    pub out: PathBuf,
    pub seed: u64,
    pub full_scale: bool,
    pub restart_time: Option<f64>,

    pub dt: Option<f64>,
    pub steps: Option<usize>,
    pub krylov_dim: Option<usize>,

    pub points: Option<usize>,
    pub x_max: Option<f64>,
    pub mass: Option<f64>,
    pub offset: Option<f64>,
    pub potential_file: Option<PathBuf>,
    pub initial_file: Option<PathBuf>,

    pub eig_tol: f64,

    pub sc_tol: f64,
    pub inner_tol: f64,
    pub max_inner: usize,
    pub max_outer: usize,
    pub max_dv: Option<f64>,
    pub outer_relax: f64,
    pub e0: f64,
    pub reassign_phases: bool,
    pub phase_tol: f64,
    pub phase_max_iter: usize,
    pub blowup_threshold: f64,

    pub method: SolveMethod,
    pub solver_tol: f64,
    pub solver_max_iter: Option<usize>,
    pub rcond: f64,
    pub prune_threshold: f64,
    pub dense_cap: usize,

    pub sweep_tol: f64,
    pub max_sweeps: usize,

    pub inertia_zero_threshold: f64,

    pub snapshots: Option<Vec<f64>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            system: System::Harmonic,
            out: PathBuf::from("out"),
            seed: 0,
            full_scale: false,
            restart_time: None,
            dt: None,
            steps: None,
            krylov_dim: None,
            points: None,
            x_max: None,
            mass: None,
            offset: None,
            potential_file: None,
            initial_file: None,
            eig_tol: 1e-10,
            sc_tol: 1e-10,
            inner_tol: 1e-14,
            max_inner: 60,
            max_outer: 40,
            max_dv: None,
            outer_relax: 1.0,
            e0: 0.0,
            reassign_phases: true,
            phase_tol: 1e-10,
            phase_max_iter: 40,
            blowup_threshold: 1e-2,
            method: SolveMethod::Krylov,
            solver_tol: 1e-12,
            solver_max_iter: None,
            rcond: 1e-12,
            prune_threshold: 1e-15,
            dense_cap: 4096,
            sweep_tol: 1e-12,
            max_sweeps: 5000,
            inertia_zero_threshold: 1e-9,
            snapshots: None,
        }
    }
}

/// (key, default, description), in dump order. The single source for the
/// key universe: `apply` and `get` cover exactly these names.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("system", "harmonic", "model: harmonic | two_electron | custom"),
    ("out", "out", "run directory for generated and consumed files"),
    ("seed", "0", "eigensolver start; 0 = deterministic non-interacting start"),
    ("full_scale", "false", "two-electron model on the full 271-point grid"),
    ("restart_time", "none", "resume an inversion at this trace time"),
    ("dt", "auto", "time step; auto = per-system preset"),
    ("steps", "auto", "number of steps (frames - 1); auto = per-system preset"),
    ("krylov_dim", "auto", "Lanczos dimension for exp(-iH dt); auto = 16, or 50 for two-electron"),
    ("points", "auto", "grid points, odd (custom system only)"),
    ("x_max", "auto", "grid half-width (custom system only)"),
    ("mass", "auto", "particle mass; auto = 1 (custom system only)"),
    ("offset", "auto", "grid offset; auto = 0 (custom system only)"),
    ("potential_file", "none", "custom system: text file of potential values, one per grid point"),
    ("initial_file", "none", "custom system: one-orbital state file; none = ground state of the table"),
    ("eig_tol", "0.0000000001", "residual target for the triplet eigensolve"),
    ("sc_tol", "0.0000000001", "self-consistency threshold of the outer inversion loop"),
    ("inner_tol", "0.00000000000001", "fixed-point threshold of the inner inversion loop"),
    ("max_inner", "60", "inner-loop iteration cap"),
    ("max_outer", "40", "outer-loop iteration cap; exceeding it fails the step"),
    ("max_dv", "none", "per-point per-step clamp on the potential change; none disables"),
    ("outer_relax", "1", "under-relaxation of the outer potential update, in (0, 1]"),
    ("e0", "0", "energy gauge: recovered potential shifted so the KS energy equals this"),
    ("reassign_phases", "true", "re-run phase assignment after every accepted step"),
    ("phase_tol", "0.0000000001", "residual target for phase assignment"),
    ("phase_max_iter", "40", "phase-assignment iteration cap"),
    ("blowup_threshold", "0.01", "density error that declares an inversion failed"),
    ("method", "minres_qlp", "force-balance solver: minres_qlp | lsqr | pinv"),
    ("solver_tol", "0.000000000001", "relative residual tolerance of the linear solver"),
    ("solver_max_iter", "none", "linear-solver iteration cap; none = 4 x problem size"),
    ("rcond", "0.000000000001", "relative singular-value cutoff for rank decisions"),
    ("prune_threshold", "0.000000000000001", "relative density below which points leave the potential solve"),
    ("dense_cap", "4096", "largest problem size the dense pseudoinverse path accepts"),
    ("sweep_tol", "0.000000000001", "density residual target for the two-orbital sweep"),
    ("max_sweeps", "5000", "two-orbital sweep iteration cap"),
    ("inertia_zero_threshold", "0.000000001", "relative eigenvalue floor for inertia counts"),
    ("snapshots", "auto", "report times, comma-separated; auto = per-system defaults"),
];

fn bad(key: &str, value: &str, want: &str) -> String {
    format!("config key {key}: expected {want}, got {value:?}")
}

fn parse_f64(key: &str, v: &str) -> Result<f64, String> {
    let x: f64 = v.parse().map_err(|_| bad(key, v, "a number"))?;
    if !x.is_finite() {
        return Err(bad(key, v, "a finite number"));
    }
    Ok(x)
}

fn parse_pos(key: &str, v: &str) -> Result<f64, String> {
    let x = parse_f64(key, v)?;
    if x <= 0.0 {
        return Err(bad(key, v, "a positive number"));
    }
    Ok(x)
}

fn parse_usize(key: &str, v: &str) -> Result<usize, String> {
    v.parse().map_err(|_| bad(key, v, "a non-negative integer"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, v, "true or false")),
    }
}

fn opt<T>(v: &str, sentinel: &str, f: impl FnOnce(&str) -> Result<T, String>) -> Result<Option<T>, String> {
    if v == sentinel {
        Ok(None)
    } else {
        f(v).map(Some)
    }
}

impl RunConfig {
    /// Set one key from its textual value.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        match key {
            "system" => {
                self.system = match v {
                    "harmonic" => System::Harmonic,
                    "two_electron" => System::TwoElectron,
                    "custom" => System::Custom,
                    _ => return Err(bad(key, v, "harmonic | two_electron | custom")),
                }
            }
            "out" => self.out = PathBuf::from(v),
            "seed" => self.seed = v.parse().map_err(|_| bad(key, v, "an unsigned integer"))?,
            "full_scale" => self.full_scale = parse_bool(key, v)?,
            "restart_time" => self.restart_time = opt(v, "none", |s| parse_f64(key, s))?,
            "dt" => self.dt = opt(v, "auto", |s| parse_pos(key, s))?,
            "steps" => self.steps = opt(v, "auto", |s| parse_usize(key, s))?,
            "krylov_dim" => {
                self.krylov_dim = opt(v, "auto", |s| parse_usize(key, s))?;
                if let Some(k) = self.krylov_dim {
                    if k < 2 {
                        return Err(bad(key, v, "an integer >= 2"));
                    }
                }
            }
            "points" => {
                self.points = opt(v, "auto", |s| parse_usize(key, s))?;
                if let Some(p) = self.points {
                    if p < 3 || p % 2 == 0 {
                        return Err(bad(key, v, "an odd integer >= 3"));
                    }
                }
            }
            "x_max" => self.x_max = opt(v, "auto", |s| parse_pos(key, s))?,
            "mass" => self.mass = opt(v, "auto", |s| parse_pos(key, s))?,
            "offset" => self.offset = opt(v, "auto", |s| parse_f64(key, s))?,
            "potential_file" => self.potential_file = opt(v, "none", |s| Ok(PathBuf::from(s)))?,
            "initial_file" => self.initial_file = opt(v, "none", |s| Ok(PathBuf::from(s)))?,
            "eig_tol" => self.eig_tol = parse_pos(key, v)?,
            "sc_tol" => self.sc_tol = parse_pos(key, v)?,
            "inner_tol" => self.inner_tol = parse_pos(key, v)?,
            "max_inner" => self.max_inner = parse_usize(key, v)?.max(1),
            "max_outer" => self.max_outer = parse_usize(key, v)?.max(1),
            "max_dv" => self.max_dv = opt(v, "none", |s| parse_pos(key, s))?,
            "outer_relax" => {
                let a = parse_pos(key, v)?;
                if a > 1.0 {
                    return Err(format!("{key} must be in (0, 1], got {v}"));
                }
                self.outer_relax = a;
            }
            "e0" => self.e0 = parse_f64(key, v)?,
            "reassign_phases" => self.reassign_phases = parse_bool(key, v)?,
            "phase_tol" => self.phase_tol = parse_pos(key, v)?,
            "phase_max_iter" => self.phase_max_iter = parse_usize(key, v)?.max(1),
            "blowup_threshold" => self.blowup_threshold = parse_pos(key, v)?,
            "method" => {
                self.method = match v {
                    "minres_qlp" => SolveMethod::Krylov,
                    "lsqr" => SolveMethod::Lsqr,
                    "pinv" => SolveMethod::Pseudoinverse,
                    _ => return Err(bad(key, v, "minres_qlp | lsqr | pinv")),
                }
            }
            "solver_tol" => self.solver_tol = parse_pos(key, v)?,
            "solver_max_iter" => self.solver_max_iter = opt(v, "none", |s| parse_usize(key, s))?,
            "rcond" => self.rcond = parse_pos(key, v)?,
            "prune_threshold" => self.prune_threshold = parse_pos(key, v)?,
            "dense_cap" => self.dense_cap = parse_usize(key, v)?.max(1),
            "sweep_tol" => self.sweep_tol = parse_pos(key, v)?,
            "max_sweeps" => self.max_sweeps = parse_usize(key, v)?.max(1),
            "inertia_zero_threshold" => self.inertia_zero_threshold = parse_pos(key, v)?,
            "snapshots" => {
                self.snapshots = opt(v, "auto", |s| {
                    s.split(',')
                        .map(|p| parse_f64(key, p.trim()))
                        .collect::<Result<Vec<f64>, String>>()
                })?
            }
            _ => return Err(format!("unknown config key {key:?}")),
        }
        Ok(())
    }

    /// Textual value of one key, inverse of `apply`.
    pub fn get(&self, key: &str) -> String {
        fn f(x: f64) -> String {
            format!("{x}")
        }
        fn of(x: Option<f64>, none: &str) -> String {
            x.map(f).unwrap_or_else(|| none.to_string())
        }
        fn ou(x: Option<usize>, none: &str) -> String {
            x.map(|v| v.to_string()).unwrap_or_else(|| none.to_string())
        }
        fn op(x: &Option<PathBuf>) -> String {
            x.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "none".to_string())
        }
        match key {
            "system" => self.system.name().to_string(),
            "out" => self.out.display().to_string(),
            "seed" => self.seed.to_string(),
            "full_scale" => self.full_scale.to_string(),
            "restart_time" => of(self.restart_time, "none"),
            "dt" => of(self.dt, "auto"),
            "steps" => ou(self.steps, "auto"),
            "krylov_dim" => ou(self.krylov_dim, "auto"),
            "points" => ou(self.points, "auto"),
            "x_max" => of(self.x_max, "auto"),
            "mass" => of(self.mass, "auto"),
            "offset" => of(self.offset, "auto"),
            "potential_file" => op(&self.potential_file),
            "initial_file" => op(&self.initial_file),
            "eig_tol" => f(self.eig_tol),
            "sc_tol" => f(self.sc_tol),
            "inner_tol" => f(self.inner_tol),
            "max_inner" => self.max_inner.to_string(),
            "max_outer" => self.max_outer.to_string(),
            "max_dv" => of(self.max_dv, "none"),
            "outer_relax" => f(self.outer_relax),
            "e0" => f(self.e0),
            "reassign_phases" => self.reassign_phases.to_string(),
            "phase_tol" => f(self.phase_tol),
            "phase_max_iter" => self.phase_max_iter.to_string(),
            "blowup_threshold" => f(self.blowup_threshold),
            "method" => method_name(self.method).to_string(),
            "solver_tol" => f(self.solver_tol),
            "solver_max_iter" => ou(self.solver_max_iter, "none"),
            "rcond" => f(self.rcond),
            "prune_threshold" => f(self.prune_threshold),
            "dense_cap" => self.dense_cap.to_string(),
            "sweep_tol" => f(self.sweep_tol),
            "max_sweeps" => self.max_sweeps.to_string(),
            "inertia_zero_threshold" => f(self.inertia_zero_threshold),
            "snapshots" => self
                .snapshots
                .as_ref()
                .map(|ts| {
                    ts.iter()
                        .map(|t| format!("{t}"))
                        .collect::<Vec<_>>()
                        .join(",")
                })
                .unwrap_or_else(|| "auto".to_string()),
            _ => unreachable!("get called with unknown key {key}"),
        }
    }

    /// Cross-field checks that single-key parsing cannot do.
    pub fn validate(&self) -> Result<(), String> {
        let custom_only: &[(&str, bool)] = &[
            ("points", self.points.is_some()),
            ("x_max", self.x_max.is_some()),
            ("mass", self.mass.is_some()),
            ("offset", self.offset.is_some()),
            ("potential_file", self.potential_file.is_some()),
            ("initial_file", self.initial_file.is_some()),
        ];
        if self.system == System::Custom {
            for (key, need) in [
                ("points", self.points.is_some()),
                ("x_max", self.x_max.is_some()),
                ("dt", self.dt.is_some()),
                ("steps", self.steps.is_some()),
                ("potential_file", self.potential_file.is_some()),
            ] {
                if !need {
                    return Err(format!("system custom requires the {key} key"));
                }
            }
        } else {
            for (key, set) in custom_only {
                if *set {
                    return Err(format!(
                        "config key {key} is only valid for system custom"
                    ));
                }
            }
            if self.full_scale && self.system != System::TwoElectron {
                return Err("full_scale is only valid for system two_electron".into());
            }
        }
        Ok(())
    }

    /// Merged configuration as a parseable key-value listing.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (key, _, _) in KEYS {
            let _ = writeln!(s, "{key} {}", self.get(key));
        }
        s
    }

    pub fn resolved_krylov_dim(&self, particles: usize) -> usize {
        self.krylov_dim
            .unwrap_or(if particles == 2 { 50 } else { 16 })
    }
}

/// `--help` appendix documenting every config key and its default.
pub fn key_help() -> String {
    let mut s = String::from(
        "Configuration file: flat `key value` lines; `#` starts a comment line.\n\
         All keys with their defaults (also dumped by `print-config`):\n",
    );
    for (key, default, desc) in KEYS {
        let _ = writeln!(s, "  {key:<24} {default:<22} {desc}");
    }
    s
}

/// Flag overrides applied on top of the config file.
#[derive(Debug, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub restart_time: Option<f64>,
    pub full_scale: bool,
    pub seed: Option<u64>,
}

/// Defaults, then the config file (if given), then flag overrides.
pub fn load(path: Option<&Path>, flags: &Overrides) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(p) = path {
        let text = std::fs::read_to_string(p)
            .map_err(|e| CliError::Io(format!("cannot read config file {}: {e}", p.display())))?;
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once(char::is_whitespace)
                .ok_or_else(|| {
                    CliError::Config(format!(
                        "{}:{}: expected `key value`, got {line:?}",
                        p.display(),
                        ln + 1
                    ))
                })?;
            cfg.apply(key, value)
                .map_err(|e| CliError::Config(format!("{}:{}: {e}", p.display(), ln + 1)))?;
        }
    }
    if let Some(out) = &flags.out {
        cfg.out = out.clone();
    }
    if let Some(t) = flags.restart_time {
        if !t.is_finite() {
            return Err(CliError::Config("--restart-time must be finite".into()));
        }
        cfg.restart_time = Some(t);
    }
    if flags.full_scale {
        cfg.full_scale = true;
    }
    if let Some(seed) = flags.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(CliError::Config)?;
    Ok(cfg)
}
