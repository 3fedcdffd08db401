//! Force-balance equation: the linear relation tying the local potential to
//! the second time derivative of the lattice density.
//!
//! For orbitals evolving under H = T + diag(v) the density obeys
//! `n''_j = q_j + (K v)_j`, where the free part collects kinetic-only terms,
//!
//! ```text
//! q_j = (2/hbar^2) sum_i [ |(T c)_j|^2 - Re( conj(c_j) (T^2 c)_j ) ]
//! ```
//!
//! and K is symmetric, built from the one-body density matrix rho:
//!
//! ```text
//! K_jk = -(2/hbar^2) T_jk Re(rho_jk)                (j != k)
//! K_jj =  (2/hbar^2) sum_{k != j} T_jk Re(rho_jk)
//! ```
//!
//! Every row of K sums to zero, so constant potentials act trivially: the
//! potential is recoverable only up to a gauge shift. Zero-density points
//! null further directions. Solvers therefore always face a singular system
//! and the Krylov module's min-norm machinery handles it.
//!
//! K is never assembled in the hot path. The matvec uses the Hadamard
//! structure: with c = r + i*im per orbital,
//!
//! ```text
//! (K x)_j = -(2/hbar^2) sum_i [ r_j (T(r o x))_j + im_j (T(im o x))_j ]
//!           + d_j x_j,        d_j = (2/hbar^2) sum_i Re[conj(c_j)(T c)_j]
//! ```
//!
//! which costs two kinetic applications per orbital.

use crate::error::Error;
use crate::krylov::LinearOperator;
use crate::lattice::{kinetic_dense, KineticOp};
use crate::state::KSState;
use nalgebra::DMatrix;

/// Free (kinetic-only) density acceleration q of a state.
pub fn free_acceleration(state: &KSState, kin: &KineticOp) -> Vec<f64> {
    let n = state.grid().len();
    assert_eq!(kin.len(), n, "kinetic operator does not match state grid");
    let hbar = state.grid().hbar();
    let scale = 2.0 / (hbar * hbar);
    let mut q = vec![0.0; n];
    for orb in state.orbitals() {
        let tc = kin.apply(orb);
        let ttc = kin.apply(&tc);
        for j in 0..n {
            q[j] += scale * (tc[j].norm_sqr() - (orb[j].conj() * ttc[j]).re);
        }
    }
    q
}

/// Right-hand side of the force-balance solve: s = n''_aim - q.
pub fn forced_acceleration(n_ddot_aim: &[f64], q: &[f64]) -> Vec<f64> {
    assert_eq!(n_ddot_aim.len(), q.len(), "acceleration length mismatch");
    n_ddot_aim.iter().zip(q).map(|(a, b)| a - b).collect()
}

/// Matrix-free force-balance operator K for a fixed state.
///
/// Holds per-orbital real/imaginary parts and the precomputed diagonal
/// correction; borrows the kinetic table, which outlives every solve.
pub struct ForceBalanceOperator<'a> {
    kin: &'a KineticOp,
    re: Vec<Vec<f64>>,
    im: Vec<Vec<f64>>,
    diag_corr: Vec<f64>,
    density: Vec<f64>,
    scale: f64,
}

impl<'a> ForceBalanceOperator<'a> {
    pub fn new(state: &KSState, kin: &'a KineticOp) -> Self {
        let n = state.grid().len();
        assert_eq!(kin.len(), n, "kinetic operator does not match state grid");
        let hbar = state.grid().hbar();
        let scale = 2.0 / (hbar * hbar);
        let mut re = Vec::with_capacity(state.particles());
        let mut im = Vec::with_capacity(state.particles());
        let mut diag_corr = vec![0.0; n];
        for orb in state.orbitals() {
            let tc = kin.apply(orb);
            for j in 0..n {
                diag_corr[j] += scale * (orb[j].conj() * tc[j]).re;
            }
            re.push(orb.iter().map(|z| z.re).collect());
            im.push(orb.iter().map(|z| z.im).collect());
        }
        ForceBalanceOperator {
            kin,
            re,
            im,
            diag_corr,
            density: state.density(),
            scale,
        }
    }

    pub fn size(&self) -> usize {
        self.diag_corr.len()
    }

    /// K x through the Hadamard structure; two kinetic applications per
    /// orbital.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.size();
        assert_eq!(x.len(), n, "matvec length mismatch");
        let mut y: Vec<f64> = self
            .diag_corr
            .iter()
            .zip(x)
            .map(|(d, xi)| d * xi)
            .collect();
        let mut buf = vec![0.0; n];
        for (r, i) in self.re.iter().zip(&self.im) {
            for j in 0..n {
                buf[j] = r[j] * x[j];
            }
            let tr = self.kin.apply_real(&buf);
            for j in 0..n {
                y[j] -= self.scale * r[j] * tr[j];
            }
            for j in 0..n {
                buf[j] = i[j] * x[j];
            }
            let ti = self.kin.apply_real(&buf);
            for j in 0..n {
                y[j] -= self.scale * i[j] * ti[j];
            }
        }
        y
    }

    /// diag(K)_j = -(2/hbar^2) T_jj n_j + d_j, with T_jj the constant dense
    /// diagonal of the multi-dimensional kinetic operator.
    pub fn diagonal(&self) -> Vec<f64> {
        let tjj = self.kin.diagonal_element();
        self.density
            .iter()
            .zip(&self.diag_corr)
            .map(|(nj, dj)| -self.scale * tjj * nj + dj)
            .collect()
    }
}

impl LinearOperator for ForceBalanceOperator<'_> {
    fn rows(&self) -> usize {
        self.size()
    }

    fn cols(&self) -> usize {
        self.size()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.matvec(x)
    }
}

/// Dense assembly of K for oracle tests, inertia checks, and pseudoinverse
/// solves on desk-size grids. Refuses grids beyond `cap` points.
pub fn fb_dense(state: &KSState, cap: usize) -> Result<DMatrix<f64>, Error> {
    let grid = state.grid();
    let t = kinetic_dense(grid, cap)?;
    let n = grid.len();
    let hbar = grid.hbar();
    let scale = 2.0 / (hbar * hbar);
    // Re(rho) from the factored orbitals.
    let mut rho_re: DMatrix<f64> = DMatrix::zeros(n, n);
    for orb in state.orbitals() {
        for j in 0..n {
            for k in 0..n {
                rho_re[(j, k)] += orb[j].re * orb[k].re + orb[j].im * orb[k].im;
            }
        }
    }
    let mut k_mat: DMatrix<f64> = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut rowsum = 0.0;
        for k in 0..n {
            let a = t[(j, k)] * rho_re[(j, k)];
            k_mat[(j, k)] = -scale * a;
            rowsum += a;
        }
        k_mat[(j, j)] += scale * rowsum;
    }
    Ok(k_mat)
}

/// diag(K) without assembling K; seed for the diagonal preconditioner.
pub fn fb_diagonal(state: &KSState, kin: &KineticOp) -> Vec<f64> {
    ForceBalanceOperator::new(state, kin).diagonal()
}
