//! Kohn-Sham state on the lattice: orbital storage, densities and their
//! analytic time derivatives, the one-particle reduced density matrix, and
//! the target density trajectory container.
//!
//! Conventions: orbital coefficients carry no dx weight, so sums over lattice
//! points are plain sums: n_j = sum_i |c_j|^2 with sum_j n_j = N for
//! normalized orbitals.

use crate::error::Error;
use crate::lattice::{Grid, KineticOp};
use crate::C64;
use nalgebra::DMatrix;

/// N single-particle orbitals on a shared grid. Orbitals are occupancy-1
/// (spin-parallel electrons); the density is the plain sum over orbitals.
#[derive(Debug, Clone)]
pub struct KSState {
    grid: Grid,
    orbitals: Vec<Vec<C64>>,
}

impl KSState {
    pub fn new(grid: Grid, orbitals: Vec<Vec<C64>>) -> Result<Self, Error> {
        if orbitals.is_empty() {
            return Err(Error::invalid_input("state needs at least one orbital"));
        }
        let n = grid.len();
        for (i, orb) in orbitals.iter().enumerate() {
            if orb.len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "orbital {i} has {} points, grid has {n}",
                    orb.len()
                )));
            }
        }
        Ok(KSState { grid, orbitals })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn particles(&self) -> usize {
        self.orbitals.len()
    }

    pub fn orbitals(&self) -> &[Vec<C64>] {
        &self.orbitals
    }

    pub fn orbitals_mut(&mut self) -> &mut [Vec<C64>] {
        &mut self.orbitals
    }

    pub fn orbital_norms(&self) -> Vec<f64> {
        self.orbitals
            .iter()
            .map(|c| c.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt())
            .collect()
    }

    /// Rescale every orbital to unit norm.
    pub fn normalize(&mut self) {
        for orb in &mut self.orbitals {
            let norm: f64 = orb.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            if norm > 0.0 {
                for z in orb.iter_mut() {
                    *z /= norm;
                }
            }
        }
    }

    /// n_j = sum_i |c_j^(i)|^2.
    pub fn density(&self) -> Vec<f64> {
        let mut n = vec![0.0; self.grid.len()];
        for orb in &self.orbitals {
            for (nj, c) in n.iter_mut().zip(orb) {
                *nj += c.norm_sqr();
            }
        }
        n
    }

    /// Analytic density time derivative under any Hamiltonian T + diag(v):
    /// the local potential commutes with the density, so
    /// n_dot_j = (2/hbar) sum_i Im[conj(c_j) (T c)_j].
    pub fn density_derivative(&self, kin: &KineticOp) -> Vec<f64> {
        let scale = 2.0 / self.grid.hbar();
        let mut nd = vec![0.0; self.grid.len()];
        for orb in &self.orbitals {
            let tc = kin.apply(orb);
            for j in 0..nd.len() {
                nd[j] += scale * (orb[j].conj() * tc[j]).im;
            }
        }
        nd
    }

    /// One-particle reduced density matrix in factored form.
    pub fn one_rdm(&self) -> OneRdm {
        OneRdm::Factored(self.orbitals.clone())
    }
}

/// Convenience wrappers matching the operation signatures; hot paths hold a
/// [`KineticOp`] and call the methods directly.
pub fn density(state: &KSState) -> Vec<f64> {
    state.density()
}

pub fn density_derivative(state: &KSState, grid: &Grid) -> Vec<f64> {
    state.density_derivative(&KineticOp::new(grid))
}

pub fn one_rdm(state: &KSState) -> OneRdm {
    state.one_rdm()
}

/// One-particle reduced density matrix, rho_jk = <a_j^dag a_k> = sum c_j conj(c_k).
///
/// Kept factored (the N orbitals) wherever it comes from a KS state; the
/// dense form appears for interacting reference states and oracle tests.
#[derive(Debug, Clone)]
pub enum OneRdm {
    Factored(Vec<Vec<C64>>),
    Dense(DMatrix<C64>),
}

impl OneRdm {
    pub fn len(&self) -> usize {
        match self {
            OneRdm::Factored(orbs) => orbs.first().map_or(0, |o| o.len()),
            OneRdm::Dense(m) => m.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_dense(&self) -> DMatrix<C64> {
        match self {
            OneRdm::Dense(m) => m.clone(),
            OneRdm::Factored(orbs) => {
                let n = self.len();
                let mut m = DMatrix::from_element(n, n, C64::new(0.0, 0.0));
                for orb in orbs {
                    for j in 0..n {
                        for k in 0..n {
                            m[(j, k)] += orb[j] * orb[k].conj();
                        }
                    }
                }
                m
            }
        }
    }

    /// Real diagonal: the density.
    pub fn diagonal(&self) -> Vec<f64> {
        match self {
            OneRdm::Factored(orbs) => {
                let n = self.len();
                let mut d = vec![0.0; n];
                for orb in orbs {
                    for (dj, c) in d.iter_mut().zip(orb) {
                        *dj += c.norm_sqr();
                    }
                }
                d
            }
            OneRdm::Dense(m) => (0..m.nrows()).map(|j| m[(j, j)].re).collect(),
        }
    }

    pub fn trace(&self) -> f64 {
        self.diagonal().iter().sum()
    }
}

/// Target density trajectory: n, n_dot, n_ddot sampled on a uniform time
/// mesh. Produced by the reference simulator, consumed by the inversion.
#[derive(Debug, Clone)]
pub struct DensityTrace {
    pub grid: Grid,
    pub particles: usize,
    pub times: Vec<f64>,
    pub n: Vec<Vec<f64>>,
    pub n_dot: Vec<Vec<f64>>,
    pub n_ddot: Vec<Vec<f64>>,
}

impl DensityTrace {
    pub fn frames(&self) -> usize {
        self.times.len()
    }

    pub fn dt(&self) -> f64 {
        if self.times.len() < 2 {
            0.0
        } else {
            self.times[1] - self.times[0]
        }
    }

    /// Structural and physical sanity checks:
    /// matching lengths, uniform time mesh, n >= 0, sum n = N and
    /// sum n_dot = 0 within 1e-8 on every frame.
    pub fn validate(&self) -> Result<(), Error> {
        let frames = self.times.len();
        if frames == 0 {
            return Err(Error::invalid_input("trace has no frames"));
        }
        if self.n.len() != frames || self.n_dot.len() != frames || self.n_ddot.len() != frames {
            return Err(Error::ShapeMismatch(format!(
                "trace arrays disagree on frame count: times {frames}, n {}, n_dot {}, n_ddot {}",
                self.n.len(),
                self.n_dot.len(),
                self.n_ddot.len()
            )));
        }
        let np = self.grid.len();
        for f in 0..frames {
            if self.n[f].len() != np || self.n_dot[f].len() != np || self.n_ddot[f].len() != np {
                return Err(Error::ShapeMismatch(format!(
                    "frame {f} length mismatch with grid ({np} points)"
                )));
            }
            if self.n[f].iter().any(|&x| x < -1e-12 || !x.is_finite()) {
                return Err(Error::invalid_input(format!(
                    "frame {f}: density has negative or non-finite entries"
                )));
            }
            let sum_n: f64 = self.n[f].iter().sum();
            if (sum_n - self.particles as f64).abs() > 1e-8 {
                return Err(Error::invalid_input(format!(
                    "frame {f}: density sums to {sum_n}, expected {}",
                    self.particles
                )));
            }
            let sum_nd: f64 = self.n_dot[f].iter().sum();
            if sum_nd.abs() > 1e-8 {
                return Err(Error::invalid_input(format!(
                    "frame {f}: density derivative sums to {sum_nd}, expected 0"
                )));
            }
        }
        if frames > 1 {
            let dt = self.dt();
            if !(dt > 0.0) {
                return Err(Error::invalid_input("time mesh must be increasing"));
            }
            for f in 1..frames {
                let step = self.times[f] - self.times[f - 1];
                if (step - dt).abs() > 1e-10 * dt.max(1.0) {
                    return Err(Error::invalid_input(format!(
                        "non-uniform time mesh at frame {f}: step {step}, dt {dt}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Index of the frame closest to time t (within half a step).
    pub fn frame_at(&self, t: f64) -> Result<usize, Error> {
        let dt = self.dt();
        if self.times.is_empty() {
            return Err(Error::invalid_input("trace has no frames"));
        }
        if dt == 0.0 {
            return Ok(0);
        }
        let idx = ((t - self.times[0]) / dt).round();
        if idx < 0.0 || idx as usize >= self.times.len() {
            return Err(Error::invalid_input(format!(
                "time {t} outside trace range [{}, {}]",
                self.times[0],
                self.times[self.times.len() - 1]
            )));
        }
        let idx = idx as usize;
        if (self.times[idx] - t).abs() > 0.5 * dt {
            return Err(Error::invalid_input(format!(
                "time {t} does not land on the trace mesh (nearest {})",
                self.times[idx]
            )));
        }
        Ok(idx)
    }
}
