//! Uniform sinc-DVR lattice and the kinetic-energy operator on it.
//!
//! Grid points along each axis sit at x = m*dx + offset with integer
//! m = 0, ±1, ..., ±(L-1)/2, L odd. The kinetic matrix is the sinc-DVR
//! (Colbert-Miller) second-derivative matrix in the positive-definite
//! convention:
//!
//!   T_mm  = hbar^2 / (2 mass dx^2) * pi^2 / 3
//!   T_mm' = hbar^2 / (mass dx^2) * (-1)^(m-m') / (m-m')^2,  m != m'
//!
//! In D dimensions T is the Kronecker sum of the 1D matrix; it is never
//! materialized as an L^D x L^D matrix outside dense oracles. The matvec is
//! performed as D one-dimensional contractions, O(D * L^(D+1)).
//!
//! Flat indexing is row-major with dimension 0 slowest.

use crate::error::Error;
use crate::C64;
use nalgebra::DMatrix;

pub const MAX_DIMS: usize = 3;

/// Uniform lattice description. `points_per_dim` is the same odd L along
/// every axis; `offsets` shift each axis independently.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    dims: usize,
    points_per_dim: usize,
    dx: f64,
    offsets: Vec<f64>,
    mass: f64,
    hbar: f64,
}

impl Grid {
    pub fn new(
        dims: usize,
        points_per_dim: usize,
        dx: f64,
        offsets: Vec<f64>,
        mass: f64,
        hbar: f64,
    ) -> Result<Self, Error> {
        if dims == 0 || dims > MAX_DIMS {
            return Err(Error::InvalidGrid(format!(
                "dims must be 1..={MAX_DIMS}, got {dims}"
            )));
        }
        if points_per_dim % 2 == 0 || points_per_dim == 0 {
            return Err(Error::InvalidGrid(format!(
                "points_per_dim must be odd, got {points_per_dim}"
            )));
        }
        if !(dx > 0.0) || !dx.is_finite() {
            return Err(Error::InvalidGrid(format!("dx must be positive, got {dx}")));
        }
        if offsets.len() != dims {
            return Err(Error::InvalidGrid(format!(
                "expected {dims} offsets, got {}",
                offsets.len()
            )));
        }
        if offsets.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGrid("offsets must be finite".into()));
        }
        if !(mass > 0.0) || !(hbar > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "mass and hbar must be positive, got mass={mass} hbar={hbar}"
            )));
        }
        Ok(Grid {
            dims,
            points_per_dim,
            dx,
            offsets,
            mass,
            hbar,
        })
    }

    /// 1D grid symmetric about the origin with mass = hbar = 1.
    pub fn symmetric_1d(points: usize, x_max: f64) -> Result<Self, Error> {
        if points < 2 {
            return Err(Error::InvalidGrid("need at least 3 points".into()));
        }
        let dx = 2.0 * x_max / (points as f64 - 1.0);
        Grid::new(1, points, dx, vec![0.0], 1.0, 1.0)
    }

    pub fn with_mass(mut self, mass: f64) -> Self {
        self.mass = mass;
        self
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn points_per_dim(&self) -> usize {
        self.points_per_dim
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn hbar(&self) -> f64 {
        self.hbar
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    /// Largest |m|: (L-1)/2.
    pub fn half_span(&self) -> i64 {
        (self.points_per_dim as i64 - 1) / 2
    }

    /// Total number of lattice points, L^D.
    pub fn len(&self) -> usize {
        self.points_per_dim.pow(self.dims as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Coordinate of flat axis index i (0-based) along `dim`.
    pub fn coordinate(&self, dim: usize, i: usize) -> f64 {
        debug_assert!(dim < self.dims && i < self.points_per_dim);
        (i as i64 - self.half_span()) as f64 * self.dx + self.offsets[dim]
    }

    /// All coordinates along one axis.
    pub fn axis_coordinates(&self, dim: usize) -> Vec<f64> {
        (0..self.points_per_dim)
            .map(|i| self.coordinate(dim, i))
            .collect()
    }

    /// Coordinates of a flat multi-dimensional index (dimension 0 slowest).
    pub fn point(&self, flat: usize) -> Vec<f64> {
        debug_assert!(flat < self.len());
        let l = self.points_per_dim;
        let mut rem = flat;
        let mut out = vec![0.0; self.dims];
        for d in (0..self.dims).rev() {
            out[d] = self.coordinate(d, rem % l);
            rem /= l;
        }
        out
    }

    /// Sample a scalar field f(x) over the whole lattice, flat order.
    pub fn sample(&self, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        (0..self.len()).map(|i| f(&self.point(i))).collect()
    }
}

/// One 1D kinetic matrix element between signed indices m and m'.
///
/// Panics if an index lies outside the grid range (caller contract).
pub fn kinetic_element(m: i64, m_prime: i64, grid: &Grid) -> f64 {
    let span = grid.half_span();
    assert!(
        m.abs() <= span && m_prime.abs() <= span,
        "kinetic_element index out of range: |{m}|, |{m_prime}| > {span}"
    );
    let pref = grid.hbar * grid.hbar / (grid.mass * grid.dx * grid.dx);
    if m == m_prime {
        // hbar^2/(2 m dx^2) * pi^2/3
        0.5 * pref * std::f64::consts::PI * std::f64::consts::PI / 3.0
    } else {
        let k = m - m_prime;
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        pref * sign / ((k * k) as f64)
    }
}

/// Cached 1D kinetic matrix with multi-dimensional application.
///
/// The D-dimensional operator is sum_d I x..x T x..x I; `apply` performs the
/// D axis contractions without forming the big matrix.
#[derive(Debug, Clone)]
pub struct KineticOp {
    l: usize,
    dims: usize,
    /// Row-major L x L 1D matrix.
    t: Vec<f64>,
}

impl KineticOp {
    pub fn new(grid: &Grid) -> Self {
        let l = grid.points_per_dim;
        let span = grid.half_span();
        let mut t = vec![0.0; l * l];
        for i in 0..l {
            for j in 0..l {
                t[i * l + j] = kinetic_element(i as i64 - span, j as i64 - span, grid);
            }
        }
        KineticOp {
            l,
            dims: grid.dims,
            t,
        }
    }

    pub fn points_per_dim(&self) -> usize {
        self.l
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.l.pow(self.dims as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Dense diagonal entry of the full multi-dimensional operator; the
    /// Kronecker sum makes it the same at every lattice point.
    pub fn diagonal_element(&self) -> f64 {
        self.dims as f64 * self.t[0]
    }

    /// The 1D matrix as a dense nalgebra matrix (oracle/building block).
    pub fn dense_1d(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.l, self.l, |i, j| self.t[i * self.l + j])
    }

    /// y += (T along axis `d`) x for one axis.
    fn contract_axis<S>(&self, d: usize, x: &[S], y: &mut [S])
    where
        S: Copy + std::ops::AddAssign + std::ops::Mul<f64, Output = S>,
    {
        let l = self.l;
        let n = self.len();
        let stride = l.pow((self.dims - 1 - d) as u32);
        let block = stride * l;
        if stride == 1 {
            // Contiguous lines: straightforward row-times-line dot products.
            for base in (0..n).step_by(block) {
                let xline = &x[base..base + l];
                for i in 0..l {
                    let trow = &self.t[i * l..(i + 1) * l];
                    let mut acc = xline[0] * trow[0];
                    for j in 1..l {
                        acc += xline[j] * trow[j];
                    }
                    y[base + i] += acc;
                }
            }
        } else {
            // Panel form: stream stride-long contiguous panels so the inner
            // loop vectorizes even though the axis itself is strided.
            for base in (0..n).step_by(block) {
                for i in 0..l {
                    let yrow = base + i * stride;
                    for j in 0..l {
                        let tij = self.t[i * l + j];
                        let xrow = base + j * stride;
                        for s in 0..stride {
                            y[yrow + s] += x[xrow + s] * tij;
                        }
                    }
                }
            }
        }
    }

    fn apply_generic<S>(&self, x: &[S], zero: S) -> Vec<S>
    where
        S: Copy + std::ops::AddAssign + std::ops::Mul<f64, Output = S>,
    {
        assert_eq!(x.len(), self.len(), "kinetic matvec size mismatch");
        let mut y = vec![zero; x.len()];
        for d in 0..self.dims {
            self.contract_axis(d, x, &mut y);
        }
        y
    }

    /// y = T x for a complex lattice vector.
    pub fn apply(&self, x: &[C64]) -> Vec<C64> {
        self.apply_generic(x, C64::new(0.0, 0.0))
    }

    /// y = T x for a real lattice vector.
    pub fn apply_real(&self, x: &[f64]) -> Vec<f64> {
        self.apply_generic(x, 0.0)
    }
}

/// Convenience one-shot matvec: builds the 1D matrix and applies it.
/// Hot paths should hold a [`KineticOp`] instead.
pub fn kinetic_matvec(grid: &Grid, c: &[C64]) -> Vec<C64> {
    KineticOp::new(grid).apply(c)
}

/// Elementwise application of a diagonal (local) potential.
pub fn potential_apply(v: &[f64], c: &[C64]) -> Vec<C64> {
    assert_eq!(v.len(), c.len(), "potential_apply size mismatch");
    v.iter().zip(c).map(|(&vj, &cj)| cj * vj).collect()
}

/// Densely assembled D-dimensional kinetic matrix (Kronecker sum).
///
/// Oracle and small-system use only: refuses sizes above `cap` points.
pub fn kinetic_dense(grid: &Grid, cap: usize) -> Result<DMatrix<f64>, Error> {
    let n = grid.len();
    if n > cap {
        return Err(Error::DenseTooLarge { size: n, cap });
    }
    let op = KineticOp::new(grid);
    let l = grid.points_per_dim();
    let d = grid.dims();
    let mut out = DMatrix::zeros(n, n);
    // Entry (a, b): sum over axes of T1[a_d, b_d] * prod_{e != d} delta(a_e, b_e).
    let digits = |mut flat: usize| -> [usize; MAX_DIMS] {
        let mut out = [0usize; MAX_DIMS];
        for k in (0..d).rev() {
            out[k] = flat % l;
            flat /= l;
        }
        out
    };
    for a in 0..n {
        let da = digits(a);
        for b in 0..n {
            let db = digits(b);
            let mut acc = 0.0;
            for ax in 0..d {
                let mut agree = true;
                for e in 0..d {
                    if e != ax && da[e] != db[e] {
                        agree = false;
                        break;
                    }
                }
                if agree {
                    acc += op.t[da[ax] * l + db[ax]];
                }
            }
            out[(a, b)] = acc;
        }
    }
    Ok(out)
}
