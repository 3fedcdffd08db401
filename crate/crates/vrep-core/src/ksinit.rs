//! Preparation of consistent initial Kohn-Sham states.
//!
//! A KS inversion run needs a starting state whose density AND density
//! derivative match the target trajectory at t = 0. Amplitudes come from the
//! density directly, c_j = sqrt(n_j) e^(i theta_j); the phases are found by
//! Newton iteration on the map theta -> n_dot(theta), whose Jacobian is
//! exactly the force-balance matrix up to a factor: J = -hbar K. One phase
//! per particle is gauge (fixed at that particle's density maximum), and
//! zero-density points drop out of the system on their own because their K
//! rows vanish.
//!
//! For interacting reference states the natural orbitals of the one-body
//! density matrix seed the KS orbitals; an elementwise sweep then bends the
//! orbital pair until its density matches the target exactly while staying
//! orthonormal.

use crate::error::Error;
use crate::forcebalance::{fb_dense, ForceBalanceOperator};
use crate::krylov::{
    build_preconditioner, lsqr, pinv_solve, preconditioned_solve, preconditioned_solve_lsqr,
    LinearOperator, SolveMethod, SolveOptions,
};
use crate::lattice::{Grid, KineticOp};
use crate::state::{KSState, OneRdm};
use crate::C64;
use nalgebra::DMatrix;

/// Result of single-particle phase assignment. `theta[gauge_index]` equals
/// its input value; `iterations` counts Newton steps taken.
#[derive(Debug, Clone)]
pub struct PhaseVector {
    pub theta: Vec<f64>,
    pub gauge_index: usize,
    pub iterations: usize,
    pub residual: f64,
}

/// Result of multi-particle phase assignment.
#[derive(Debug, Clone)]
pub struct MultiPhaseOutcome {
    pub state: KSState,
    pub gauge_indices: Vec<usize>,
    pub iterations: usize,
    pub residual: f64,
}

/// c_j = sqrt(n_j) e^(i theta_j).
pub fn state_from_density_and_phases(
    grid: &Grid,
    n: &[f64],
    theta: &[f64],
) -> Result<KSState, Error> {
    if n.len() != grid.len() || theta.len() != grid.len() {
        return Err(Error::ShapeMismatch(format!(
            "density/phase length {} / {} vs grid {}",
            n.len(),
            theta.len(),
            grid.len()
        )));
    }
    if n.iter().any(|&x| x < 0.0 || !x.is_finite()) {
        return Err(Error::invalid_input("density must be nonnegative and finite"));
    }
    let orb: Vec<C64> = n
        .iter()
        .zip(theta)
        .map(|(&nj, &th)| C64::from_polar(nj.sqrt(), th))
        .collect();
    KSState::new(grid.clone(), vec![orb])
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

fn linf_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn check_n_dot_aim(n_dot_aim: &[f64], len: usize) -> Result<(), Error> {
    if n_dot_aim.len() != len {
        return Err(Error::ShapeMismatch(format!(
            "n_dot_aim length {} vs grid {len}",
            n_dot_aim.len()
        )));
    }
    let total: f64 = n_dot_aim.iter().sum();
    let scale: f64 = n_dot_aim.iter().map(|x| x.abs()).fold(1.0, f64::max);
    if total.abs() > 1e-6 * scale {
        return Err(Error::invalid_input(format!(
            "n_dot_aim must sum to zero (particle conservation), got {total:.3e}"
        )));
    }
    Ok(())
}

/// Solve K delta = rhs for one Newton step, by the configured method.
fn solve_newton_step(
    state: &KSState,
    kin: &KineticOp,
    rhs: &[f64],
    method: SolveMethod,
    opts: &SolveOptions,
) -> Result<Vec<f64>, Error> {
    match method {
        SolveMethod::Krylov | SolveMethod::Lsqr => {
            let op = ForceBalanceOperator::new(state, kin);
            let pre = build_preconditioner(&op.diagonal(), 1e-15);
            let rep = if method == SolveMethod::Krylov {
                preconditioned_solve(&op, &pre, rhs, opts)
            } else {
                preconditioned_solve_lsqr(&op, &pre, rhs, opts)
            };
            if !rep.converged() {
                return Err(Error::SolverFailure(format!(
                    "phase Newton step: {:?} after {} iterations, residual {:.3e}",
                    rep.flag, rep.iterations, rep.residual_norm
                )));
            }
            Ok(rep.solution)
        }
        SolveMethod::Pseudoinverse => {
            let k = fb_dense(state, 4096)?;
            let mean = rhs.iter().sum::<f64>() / rhs.len() as f64;
            let centered: Vec<f64> = rhs.iter().map(|x| x - mean).collect();
            pinv_solve(&k, &centered, opts.rcond)
        }
    }
}

/// Newton phase assignment for one particle: find theta with
/// density_derivative(sqrt(n) e^(i theta)) = n_dot_aim.
///
/// Each step solves K delta = (n_dot - n_dot_aim)/hbar and updates
/// theta += delta - delta_p (the gauge point p = argmax n stays put). A full
/// step that increases the residual is halved up to 20 times.
pub fn assign_phases_single(
    n: &[f64],
    n_dot_aim: &[f64],
    theta0: &[f64],
    grid: &Grid,
    tol: f64,
    max_iter: usize,
    method: SolveMethod,
) -> Result<PhaseVector, Error> {
    let (pv, converged) =
        assign_phases_single_best_effort(n, n_dot_aim, theta0, grid, tol, max_iter, method)?;
    if converged {
        Ok(pv)
    } else {
        Err(Error::PhaseAssignment {
            residual: pv.residual,
            iterations: pv.iterations,
        })
    }
}

/// Same Newton iteration as [`assign_phases_single`], but a run that stops
/// short of `tol` returns the best iterate with `false` instead of an error.
/// The damped acceptance only ever takes strict residual improvements, so
/// the returned phases are never worse than `theta0`.
pub(crate) fn assign_phases_single_best_effort(
    n: &[f64],
    n_dot_aim: &[f64],
    theta0: &[f64],
    grid: &Grid,
    tol: f64,
    max_iter: usize,
    method: SolveMethod,
) -> Result<(PhaseVector, bool), Error> {
    check_n_dot_aim(n_dot_aim, grid.len())?;
    let kin = KineticOp::new(grid);
    let p = argmax(n);
    let mut theta = theta0.to_vec();
    let mut state = state_from_density_and_phases(grid, n, &theta)?;
    let mut nd = state.density_derivative(&kin);
    let mut residual = linf_diff(&nd, n_dot_aim);
    let opts = SolveOptions {
        tol: 1e-12,
        ..Default::default()
    };

    let mut iterations = 0;
    for iter in 0..max_iter {
        if residual <= tol {
            break;
        }
        let rhs: Vec<f64> = nd
            .iter()
            .zip(n_dot_aim)
            .map(|(a, b)| (a - b) / grid.hbar())
            .collect();
        // A Newton step whose linear solve stalls ends the iteration at the
        // best phases found so far; shape or input problems still propagate.
        let mut delta = match solve_newton_step(&state, &kin, &rhs, method, &opts) {
            Ok(d) => d,
            Err(Error::SolverFailure(_)) => break,
            Err(other) => return Err(other),
        };
        let dp = delta[p];
        for d in &mut delta {
            *d -= dp;
        }

        // Damped acceptance: halve until the residual stops increasing.
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..=20 {
            let trial: Vec<f64> = theta
                .iter()
                .zip(&delta)
                .map(|(t, d)| t + step * d)
                .collect();
            let trial_state = state_from_density_and_phases(grid, n, &trial)?;
            let trial_nd = trial_state.density_derivative(&kin);
            let trial_res = linf_diff(&trial_nd, n_dot_aim);
            if trial_res < residual {
                theta = trial;
                state = trial_state;
                nd = trial_nd;
                residual = trial_res;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        iterations = iter + 1;
        if !accepted {
            break;
        }
    }
    let converged = residual <= tol;
    Ok((
        PhaseVector {
            theta,
            gauge_index: p,
            iterations,
            residual,
        },
        converged,
    ))
}

/// Horizontal block operator [K^(1), K^(2), ..., K^(N)] with per-particle
/// diagonal column scaling, for the under-determined multi-particle phase
/// system.
struct BlockPhaseOperator<'a> {
    ops: Vec<ForceBalanceOperator<'a>>,
    col_scale: Vec<f64>,
    l: usize,
}

impl LinearOperator for BlockPhaseOperator<'_> {
    fn rows(&self) -> usize {
        self.l
    }

    fn cols(&self) -> usize {
        self.l * self.ops.len()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.l];
        let mut buf = vec![0.0; self.l];
        for (i, op) in self.ops.iter().enumerate() {
            let block = &x[i * self.l..(i + 1) * self.l];
            let scale = &self.col_scale[i * self.l..(i + 1) * self.l];
            for j in 0..self.l {
                buf[j] = block[j] * scale[j];
            }
            let ki = op.matvec(&buf);
            for j in 0..self.l {
                y[j] += ki[j];
            }
        }
        y
    }

    fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols()];
        for (i, op) in self.ops.iter().enumerate() {
            let ki = op.matvec(y); // K symmetric
            let scale = &self.col_scale[i * self.l..(i + 1) * self.l];
            let block = &mut out[i * self.l..(i + 1) * self.l];
            for j in 0..self.l {
                block[j] = ki[j] * scale[j];
            }
        }
        out
    }
}

/// Newton phase assignment for N particles: amplitudes are held fixed, all
/// N phase vectors update together through the block system
/// [K^(1), ..., K^(N)] Delta = (n_dot - n_dot_aim)/hbar, solved min-norm by
/// LSQR (or pseudoinverse). Each particle keeps its own gauge point.
pub fn assign_phases_multi(
    state: &KSState,
    n_dot_aim: &[f64],
    tol: f64,
    max_iter: usize,
    method: SolveMethod,
) -> Result<MultiPhaseOutcome, Error> {
    let (out, converged) = assign_phases_multi_best_effort(state, n_dot_aim, tol, max_iter, method)?;
    if converged {
        Ok(out)
    } else {
        Err(Error::PhaseAssignment {
            residual: out.residual,
            iterations: out.iterations,
        })
    }
}

/// Best-effort variant of [`assign_phases_multi`]; see
/// [`assign_phases_single_best_effort`] for the contract.
pub(crate) fn assign_phases_multi_best_effort(
    state: &KSState,
    n_dot_aim: &[f64],
    tol: f64,
    max_iter: usize,
    method: SolveMethod,
) -> Result<(MultiPhaseOutcome, bool), Error> {
    let grid = state.grid().clone();
    let l = grid.len();
    check_n_dot_aim(n_dot_aim, l)?;
    let kin = KineticOp::new(&grid);
    let nparts = state.particles();

    // Fixed amplitudes, evolving phases.
    let amps: Vec<Vec<f64>> = state
        .orbitals()
        .iter()
        .map(|orb| orb.iter().map(|z| z.norm()).collect())
        .collect();
    let mut thetas: Vec<Vec<f64>> = state
        .orbitals()
        .iter()
        .map(|orb| orb.iter().map(|z| z.arg()).collect())
        .collect();
    let gauge_indices: Vec<usize> = amps.iter().map(|a| argmax(a)).collect();

    let build = |thetas: &[Vec<f64>]| -> Result<KSState, Error> {
        let orbs: Vec<Vec<C64>> = amps
            .iter()
            .zip(thetas)
            .map(|(a, th)| {
                a.iter()
                    .zip(th)
                    .map(|(&r, &t)| C64::from_polar(r, t))
                    .collect()
            })
            .collect();
        KSState::new(grid.clone(), orbs)
    };

    let mut cur = build(&thetas)?;
    let mut nd = cur.density_derivative(&kin);
    let mut residual = linf_diff(&nd, n_dot_aim);
    let opts = SolveOptions {
        tol: 1e-12,
        ..Default::default()
    };

    let mut iterations = 0;
    for iter in 0..max_iter {
        if residual <= tol {
            break;
        }
        let rhs: Vec<f64> = nd
            .iter()
            .zip(n_dot_aim)
            .map(|(a, b)| (a - b) / grid.hbar())
            .collect();

        // Per-orbital operators on single-orbital views of the state.
        let singles: Vec<KSState> = cur
            .orbitals()
            .iter()
            .map(|orb| KSState::new(grid.clone(), vec![orb.clone()]).expect("orbital view"))
            .collect();
        let delta_full: Vec<f64> = match method {
            // The block system is solved by LSQR either way; the blocks are
            // rectangular in effect once column-scaled.
            SolveMethod::Krylov | SolveMethod::Lsqr => {
                let ops: Vec<ForceBalanceOperator> = singles
                    .iter()
                    .map(|s| ForceBalanceOperator::new(s, &kin))
                    .collect();
                let mut col_scale = Vec::with_capacity(nparts * l);
                for op in &ops {
                    let pre = build_preconditioner(&op.diagonal(), 1e-15);
                    col_scale.extend_from_slice(pre.sqrt_m());
                }
                let block = BlockPhaseOperator { ops, col_scale, l };
                let rep = lsqr(&block, &rhs, &opts);
                if !rep.converged() {
                    // A stalled linear solve ends the iteration at the best
                    // phases found so far.
                    break;
                }
                // Undo the column scaling.
                rep.solution
                    .iter()
                    .zip(&block.col_scale)
                    .map(|(y, w)| y * w)
                    .collect()
            }
            SolveMethod::Pseudoinverse => {
                if l * nparts > 4096 {
                    return Err(Error::DenseTooLarge {
                        size: l * nparts,
                        cap: 4096,
                    });
                }
                let mut kblock: DMatrix<f64> = DMatrix::zeros(l, l * nparts);
                for (i, s) in singles.iter().enumerate() {
                    let ki = fb_dense(s, 4096)?;
                    kblock.view_mut((0, i * l), (l, l)).copy_from(&ki);
                }
                pinv_solve(&kblock, &rhs, opts.rcond)?
            }
        };

        // Per-particle gauge pinning.
        let mut delta: Vec<Vec<f64>> = (0..nparts)
            .map(|i| delta_full[i * l..(i + 1) * l].to_vec())
            .collect();
        for (i, d) in delta.iter_mut().enumerate() {
            let dp = d[gauge_indices[i]];
            for x in d.iter_mut() {
                *x -= dp;
            }
        }

        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..=20 {
            let trial: Vec<Vec<f64>> = thetas
                .iter()
                .zip(&delta)
                .map(|(th, d)| th.iter().zip(d).map(|(t, x)| t + step * x).collect())
                .collect();
            let trial_state = build(&trial)?;
            let trial_nd = trial_state.density_derivative(&kin);
            let trial_res = linf_diff(&trial_nd, n_dot_aim);
            if trial_res < residual {
                thetas = trial;
                cur = trial_state;
                nd = trial_nd;
                residual = trial_res;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        iterations = iter + 1;
        if !accepted {
            break;
        }
    }
    let converged = residual <= tol;
    Ok((
        MultiPhaseOutcome {
            state: cur,
            gauge_indices,
            iterations,
            residual,
        },
        converged,
    ))
}

/// Natural orbitals and occupations: the top eigenpairs of the Hermitian
/// PSD one-body density matrix, occupations descending. Each orbital's
/// global phase is fixed by making its largest-magnitude component real
/// and positive.
#[derive(Debug, Clone)]
pub struct NaturalOrbitalSet {
    pub occupations: Vec<f64>,
    pub orbitals: Vec<Vec<C64>>,
}

pub fn natural_orbitals(rho: &OneRdm, rank: usize) -> NaturalOrbitalSet {
    let dense = rho.to_dense();
    let n = dense.nrows();
    let eig = nalgebra::SymmetricEigen::new(dense);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let rank = rank.min(n);
    let mut occupations = Vec::with_capacity(rank);
    let mut orbitals = Vec::with_capacity(rank);
    for &k in order.iter().take(rank) {
        occupations.push(eig.eigenvalues[k]);
        let mut orb: Vec<C64> = (0..n).map(|j| eig.eigenvectors[(j, k)]).collect();
        // Phase fix: largest-|component| entry becomes real positive.
        let jmax = (0..n)
            .max_by(|&a, &b| orb[a].norm().partial_cmp(&orb[b].norm()).unwrap())
            .unwrap();
        let mag = orb[jmax].norm();
        if mag > 0.0 {
            let phase = orb[jmax] / mag;
            let rot = phase.conj();
            for z in &mut orb {
                *z *= rot;
            }
        }
        orbitals.push(orb);
    }
    NaturalOrbitalSet {
        occupations,
        orbitals,
    }
}

/// Elementwise density-matching sweep for a two-electron KS orbital pair.
///
/// Starting from orthonormal real guesses (typically natural orbitals of an
/// interacting state), each sweep walks the grid in ascending index order
/// and rebalances the pair at each point so u1^2 + u2^2 = n there, keeping
/// signs. The two update rules alternate between sweeps:
///
/// ```text
/// even sweeps:  if u1_i^2 < n_i  ->  u2_i = sgn(u2_i) sqrt(n_i - u1_i^2)
/// odd sweeps:   if u2_i^2 < n_i  ->  u1_i = sgn(u1_i) sqrt(n_i - u2_i^2)
/// ```
///
/// (predicates on the squared amplitudes, which is what the update formula
/// needs to stay real). Alternation matters: applying both rules in the same
/// pass leaves u1 untouched wherever the first rule fired, and the
/// sweep/orthonormalization pair then cycles with period two instead of
/// converging. Where the active rule cannot fire (the kept square already
/// meets or exceeds n_i), the pair is rescaled proportionally so the point
/// matches exactly, which also forces both orbitals to zero at zero-density
/// points. After each sweep the pair is re-orthonormalized by Gram-Schmidt
/// anchored at u1.
pub fn ks_orbitals_from_density(
    u1: &[f64],
    u2: &[f64],
    n_target: &[f64],
    tol: f64,
    max_sweeps: usize,
) -> Result<(Vec<f64>, Vec<f64>), Error> {
    let l = n_target.len();
    if u1.len() != l || u2.len() != l {
        return Err(Error::ShapeMismatch(format!(
            "orbital lengths {} / {} vs density {l}",
            u1.len(),
            u2.len()
        )));
    }
    if n_target.iter().any(|&x| x < 0.0 || !x.is_finite()) {
        return Err(Error::invalid_input("target density must be nonnegative"));
    }
    let total: f64 = n_target.iter().sum();
    if (total - 2.0).abs() > 1e-6 {
        return Err(Error::invalid_input(format!(
            "two-electron target density must sum to 2, got {total:.8}"
        )));
    }
    let sgn = |x: f64| if x < 0.0 { -1.0 } else { 1.0 };
    let mut a = u1.to_vec();
    let mut b = u2.to_vec();
    for sweep in 0..max_sweeps {
        for i in 0..l {
            let ni = n_target[i];
            // (kept, adjusted) alternate between sweeps.
            let (keep, adj) = if sweep % 2 == 0 {
                (&mut a[i], &mut b[i])
            } else {
                (&mut b[i], &mut a[i])
            };
            if *keep * *keep < ni {
                *adj = sgn(*adj) * (ni - *keep * *keep).sqrt();
            } else {
                // The kept square meets or exceeds n_i (includes n_i = 0):
                // proportional rescale to match the point exactly.
                let s2 = *keep * *keep + *adj * *adj;
                if s2 > 0.0 {
                    let f = (ni / s2).sqrt();
                    *keep *= f;
                    *adj *= f;
                }
            }
        }
        // Gram-Schmidt, u1 anchored.
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 {
            return Err(Error::invalid_input("sweep collapsed first orbital to zero"));
        }
        for x in &mut a {
            *x /= na;
        }
        let overlap: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        for (y, x) in b.iter_mut().zip(&a) {
            *y -= overlap * x;
        }
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nb == 0.0 {
            return Err(Error::invalid_input("sweep collapsed second orbital to zero"));
        }
        for y in &mut b {
            *y /= nb;
        }

        let err = (0..l)
            .map(|i| (a[i] * a[i] + b[i] * b[i] - n_target[i]).abs())
            .fold(0.0, f64::max);
        if err <= tol {
            return Ok((a, b));
        }
        // Convergence stalls only if the target is not representable by an
        // orthonormal pair; surface the residual.
        if sweep + 1 == max_sweeps {
            return Err(Error::PhaseAssignment {
                residual: err,
                iterations: max_sweeps,
            });
        }
    }
    unreachable!("loop returns or errors before falling through");
}
