//! Iterative solvers for the singular symmetric and rectangular linear
//! systems produced by the force-balance equation.
//!
//! The force-balance matrix K is symmetric, dense-structured but cheap to
//! apply, and always singular (constants are in its null space; zero-density
//! points add more). The solvers here therefore return the minimum-norm
//! least-squares solution: among the minimizers of ||Ax - b|| the one with
//! minimal ||x||, which for consistent nonsingular systems is the exact
//! solution.
//!
//! `minres_qlp` computes the defining MINRES-QLP iterate
//! x_k = V_k pinv(T_k) (beta_1 e_1) from a stored Lanczos basis with full
//! reorthogonalization and a rank-revealing solve of the projected
//! (k+1) x k tridiagonal problem. At this crate's problem sizes the stored
//! basis is cheap and makes the min-norm property robust; the constant-memory
//! QLP recurrences would compute the same iterate.
//!
//! `lsqr` is the Golub-Kahan bidiagonalization solver for rectangular
//! systems, used for the under-determined multi-particle phase block system.

use crate::error::Error;
use nalgebra::{DMatrix, DVector};

/// Strategy for the singular force-balance and phase solves: matrix-free
/// Krylov iteration, or dense assembly plus pseudoinverse (only for grids
/// under the dense cap; the paper route for 1D problems).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMethod {
    /// MINRES-QLP on the preconditioned operator.
    Krylov,
    /// LSQR on the preconditioned operator.
    Lsqr,
    Pseudoinverse,
}

/// Matrix-free linear operator over real vectors.
///
/// `apply_transpose` defaults to `apply`, which is only valid for symmetric
/// operators; rectangular operators must override it.
pub trait LinearOperator {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
    fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(self.rows(), self.cols(), "default apply_transpose needs a square, symmetric operator");
        self.apply(y)
    }
}

/// Dense matrix wrapper, used by oracle tests and small assembled systems.
pub struct DenseOperator {
    m: DMatrix<f64>,
}

impl DenseOperator {
    pub fn new(m: DMatrix<f64>) -> Self {
        DenseOperator { m }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }
}

impl LinearOperator for DenseOperator {
    fn rows(&self) -> usize {
        self.m.nrows()
    }

    fn cols(&self) -> usize {
        self.m.ncols()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (&self.m * DVector::from_column_slice(x)).data.into()
    }

    fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        (self.m.transpose() * DVector::from_column_slice(y))
            .data
            .into()
    }
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    /// Relative tolerance on the residual (and on the normal-equation
    /// residual for inconsistent systems).
    pub tol: f64,
    /// Iteration cap; `None` means 4 * problem size.
    pub max_iter: Option<usize>,
    /// Relative singular-value cutoff for rank decisions (projected problem
    /// in `minres_qlp`, dense pseudoinverse in `pinv_solve`).
    pub rcond: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-10,
            max_iter: None,
            rcond: 1e-12,
        }
    }
}

/// Why the solver stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveFlag {
    /// Residual driven below tol * ||b||: consistent system solved.
    Converged,
    /// Normal-equation residual converged but ||Ax - b|| stayed finite:
    /// the right-hand side has a component in the operator's null space and
    /// the least-squares solution was returned.
    NullSpaceRhsComponent,
    /// Lanczos/bidiagonalization found an invariant subspace; the returned
    /// solution is exact within it.
    Breakdown,
    /// Iteration cap hit before any convergence test fired.
    MaxIter,
}

/// Solver outcome. `residual_norm` is recomputed post-hoc from the returned
/// solution with one extra operator application, never trusted from solver
/// internals.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub solution: Vec<f64>,
    pub iterations: usize,
    pub residual_norm: f64,
    pub flag: SolveFlag,
}

impl SolveReport {
    pub fn converged(&self) -> bool {
        matches!(
            self.flag,
            SolveFlag::Converged | SolveFlag::NullSpaceRhsComponent | SolveFlag::Breakdown
        )
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn recomputed_residual(a: &dyn LinearOperator, x: &[f64], b: &[f64]) -> f64 {
    let ax = a.apply(x);
    ax.iter()
        .zip(b)
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        .sqrt()
}

/// Minimum-norm least-squares solution of the (k+1) x k Lanczos tridiagonal
/// problem min ||T y - beta1 e1|| via SVD with relative cutoff `rcond`.
fn projected_min_norm(alphas: &[f64], betas: &[f64], beta1: f64, rcond: f64) -> Vec<f64> {
    let k = alphas.len();
    let mut t = DMatrix::zeros(k + 1, k);
    for j in 0..k {
        t[(j, j)] = alphas[j];
        // betas[j] = beta_{j+1}: subdiagonal and superdiagonal.
        t[(j + 1, j)] = betas[j];
        if j + 1 < k {
            t[(j, j + 1)] = betas[j];
        }
    }
    let svd = t.svd(true, true);
    let u = svd.u.as_ref().expect("svd u");
    let vt = svd.v_t.as_ref().expect("svd v_t");
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cutoff = rcond * smax;
    let mut y = vec![0.0; k];
    for (i, &sigma) in svd.singular_values.iter().enumerate() {
        if sigma > cutoff && sigma > 0.0 {
            // coefficient = (u_i . beta1 e1) / sigma = beta1 * U[0, i] / sigma
            let coef = beta1 * u[(0, i)] / sigma;
            for j in 0..k {
                y[j] += coef * vt[(i, j)];
            }
        }
    }
    y
}

/// MINRES-QLP: minimum-norm least-squares solve of a symmetric (possibly
/// singular, possibly inconsistent) system A x = b.
///
/// Lanczos with full reorthogonalization builds V_k and the tridiagonal
/// T_k; a Givens QR of T_k maintains the exact projected residual for the
/// stopping tests; the returned iterate is x = V_k pinv(T_k) beta1 e1.
pub fn minres_qlp(a: &dyn LinearOperator, b: &[f64], opts: &SolveOptions) -> SolveReport {
    let n = b.len();
    assert_eq!(a.rows(), n, "rhs length mismatch");
    assert_eq!(a.rows(), a.cols(), "minres_qlp needs a square operator");
    let max_iter = opts.max_iter.unwrap_or(4 * n).min(n.max(1));
    let beta1 = norm(b);
    if beta1 == 0.0 {
        return SolveReport {
            solution: vec![0.0; n],
            iterations: 0,
            residual_norm: 0.0,
            flag: SolveFlag::Converged,
        };
    }

    // Lanczos storage.
    let mut vs: Vec<Vec<f64>> = Vec::with_capacity(16);
    vs.push(b.iter().map(|x| x / beta1).collect());
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new(); // betas[k] = beta_{k+1}

    // Givens QR bands of T (reflection convention G = [[c, s], [s, -c]]).
    let mut gamma: Vec<f64> = Vec::new(); // R[k, k]
    let mut delta: Vec<f64> = Vec::new(); // R[k-1, k]
    let mut eps: Vec<f64> = Vec::new(); // R[k-2, k]
    let mut rot: Vec<(f64, f64)> = Vec::new();
    let mut tau: Vec<f64> = Vec::new(); // rotated rhs
    let mut phi = beta1; // exact projected LS residual
    let mut anorm: f64 = 0.0;

    // Delayed-by-one ||A r|| monitor.
    let mut prev_y: Option<Vec<f64>> = None;
    let mut prev_phi = beta1;

    let mut flag = SolveFlag::MaxIter;
    let mut iterations = 0;

    for k in 0..max_iter {
        iterations = k + 1;
        // Lanczos step: w = A v_k - alpha_k v_k - beta_k v_{k-1}.
        let mut w = a.apply(&vs[k]);
        let alpha = dot(&vs[k], &w);
        for (wi, vi) in w.iter_mut().zip(&vs[k]) {
            *wi -= alpha * vi;
        }
        if k > 0 {
            let beta_k = betas[k - 1];
            for (wi, vi) in w.iter_mut().zip(&vs[k - 1]) {
                *wi -= beta_k * vi;
            }
        }
        // Full reorthogonalization keeps the projected quantities exact.
        for v in &vs {
            let c = dot(v, &w);
            for (wi, vi) in w.iter_mut().zip(v) {
                *wi -= c * vi;
            }
        }
        let beta_next = norm(&w);
        alphas.push(alpha);
        betas.push(beta_next);
        anorm = anorm
            .max(alpha.abs() + beta_next + if k > 0 { betas[k - 1] } else { 0.0 });

        // QR update for column k: entries at rows k-1 (beta_k), k (alpha), k+1 (beta_next).
        let mut r_km1 = if k > 0 { betas[k - 1] } else { 0.0 };
        let mut r_k = alpha;
        let mut e_km2 = 0.0;
        if k >= 2 {
            let (c, s) = rot[k - 2];
            // rows (k-2, k-1), row k-2 currently zero
            e_km2 = s * r_km1;
            r_km1 = -c * r_km1;
        }
        if k >= 1 {
            let (c, s) = rot[k - 1];
            let new_km1 = c * r_km1 + s * r_k;
            r_k = s * r_km1 - c * r_k;
            r_km1 = new_km1;
        }
        let rnorm_col = (r_k * r_k + beta_next * beta_next).sqrt();
        let (c_k, s_k) = if rnorm_col > 0.0 {
            (r_k / rnorm_col, beta_next / rnorm_col)
        } else {
            (1.0, 0.0)
        };
        rot.push((c_k, s_k));
        gamma.push(rnorm_col);
        delta.push(r_km1);
        eps.push(e_km2);
        tau.push(c_k * phi);
        phi *= s_k.abs();

        // Monitor solution of R y = tau by back substitution (clamped; the
        // final answer comes from the SVD, this is only for stopping tests).
        let m = k + 1;
        let mut y = vec![0.0; m];
        let gmax = gamma.iter().cloned().fold(0.0, f64::max);
        for i in (0..m).rev() {
            let mut rhs = tau[i];
            if i + 1 < m {
                rhs -= delta[i + 1] * y[i + 1];
            }
            if i + 2 < m {
                rhs -= eps[i + 2] * y[i + 2];
            }
            y[i] = if gamma[i].abs() > 1e-14 * gmax.max(1e-300) {
                rhs / gamma[i]
            } else {
                0.0
            };
        }

        // ||A r|| for the PREVIOUS iterate (needs this iteration's column).
        if let Some(yp) = prev_y.take() {
            let mp = yp.len();
            // rho = beta1 e1 - T_{mp} yp, length mp + 1
            let mut rho = vec![0.0; mp + 1];
            rho[0] = beta1;
            for j in 0..mp {
                rho[j] -= alphas[j] * yp[j];
                if j > 0 {
                    rho[j] -= betas[j - 1] * yp[j - 1];
                }
                if j + 1 < mp {
                    rho[j] -= betas[j] * yp[j + 1];
                }
                rho[j + 1] -= betas[j] * yp[j];
            }
            // ||T_{mp+1} rho||: tridiagonal with columns 0..mp known.
            let rows = mp + 2;
            let mut trho = vec![0.0; rows];
            for j in 0..mp + 1 {
                trho[j] += alphas[j] * rho[j];
                if j > 0 {
                    trho[j] += betas[j - 1] * rho[j - 1];
                }
                if j + 1 < mp + 1 {
                    trho[j] += betas[j] * rho[j + 1];
                }
                trho[j + 1] += betas[j] * rho[j];
            }
            let arnorm = norm(&trho);
            if arnorm <= opts.tol * anorm.max(1e-300) * prev_phi.max(1e-300) {
                flag = if prev_phi <= opts.tol * beta1 {
                    SolveFlag::Converged
                } else {
                    SolveFlag::NullSpaceRhsComponent
                };
                // Use the previous basis size: drop the last Lanczos column.
                alphas.pop();
                betas.pop();
                break;
            }
        }
        prev_y = Some(y);
        prev_phi = phi;

        if phi <= opts.tol * beta1 {
            flag = SolveFlag::Converged;
            break;
        }
        if beta_next <= f64::EPSILON * anorm.max(1.0) * (n as f64) {
            flag = SolveFlag::Breakdown;
            break;
        }
        if k + 1 == max_iter {
            break;
        }
        vs.push(w.into_iter().map(|x| x / beta_next).collect());
    }

    // Min-norm solve of the projected problem, then lift.
    let y = projected_min_norm(&alphas, &betas, beta1, opts.rcond);
    let mut x = vec![0.0; n];
    for (j, yj) in y.iter().enumerate() {
        for (xi, vi) in x.iter_mut().zip(&vs[j]) {
            *xi += yj * vi;
        }
    }
    let residual_norm = recomputed_residual(a, &x, b);
    if flag == SolveFlag::Breakdown {
        // Invariant subspace exhausted: the returned iterate is the exact
        // min-norm least-squares solution, so classify by the residual.
        flag = if residual_norm <= opts.tol * beta1 {
            SolveFlag::Converged
        } else {
            SolveFlag::NullSpaceRhsComponent
        };
    }
    SolveReport {
        solution: x,
        iterations,
        residual_norm,
        flag,
    }
}

/// LSQR (Golub-Kahan bidiagonalization) for min ||Ax - b|| with A of any
/// shape; returns the minimum-norm least-squares solution. Both Krylov bases
/// are reorthogonalized, which keeps the min-norm property sharp at this
/// crate's problem sizes.
pub fn lsqr(a: &dyn LinearOperator, b: &[f64], opts: &SolveOptions) -> SolveReport {
    let rows = a.rows();
    let cols = a.cols();
    assert_eq!(b.len(), rows, "rhs length mismatch");
    let max_iter = opts.max_iter.unwrap_or(4 * cols.max(rows));
    let bnorm = norm(b);
    if bnorm == 0.0 {
        return SolveReport {
            solution: vec![0.0; cols],
            iterations: 0,
            residual_norm: 0.0,
            flag: SolveFlag::Converged,
        };
    }

    let mut us: Vec<Vec<f64>> = Vec::new();
    let mut vss: Vec<Vec<f64>> = Vec::new();

    let mut beta = bnorm;
    let mut u: Vec<f64> = b.iter().map(|x| x / beta).collect();
    us.push(u.clone());
    let mut v = a.apply_transpose(&u);
    let mut alpha = norm(&v);
    if alpha == 0.0 {
        // b is orthogonal to the range of A: x = 0 is the LS solution.
        return SolveReport {
            solution: vec![0.0; cols],
            iterations: 0,
            residual_norm: bnorm,
            flag: SolveFlag::NullSpaceRhsComponent,
        };
    }
    for x in &mut v {
        *x /= alpha;
    }
    vss.push(v.clone());

    let mut w = v.clone();
    let mut x = vec![0.0; cols];
    let mut phibar = beta;
    let mut rhobar = alpha;
    let mut anorm2 = alpha * alpha;

    let mut flag = SolveFlag::MaxIter;
    let mut iterations = 0;

    for iter in 0..max_iter {
        iterations = iter + 1;
        // u = A v - alpha u
        let mut au = a.apply(&v);
        for (ui, &x0) in au.iter_mut().zip(&u) {
            *ui -= alpha * x0;
        }
        for prev in &us {
            let c = dot(prev, &au);
            for (ui, pi) in au.iter_mut().zip(prev) {
                *ui -= c * pi;
            }
        }
        beta = norm(&au);
        if beta > 0.0 {
            for ui in &mut au {
                *ui /= beta;
            }
            u = au;
            us.push(u.clone());
        }
        anorm2 += beta * beta;

        // v = A^T u - beta v
        if beta > 0.0 {
            let mut atv = a.apply_transpose(&u);
            for (vi, &x0) in atv.iter_mut().zip(&v) {
                *vi -= beta * x0;
            }
            for prev in &vss {
                let c = dot(prev, &atv);
                for (vi, pi) in atv.iter_mut().zip(prev) {
                    *vi -= c * pi;
                }
            }
            alpha = norm(&atv);
            if alpha > 0.0 {
                for vi in &mut atv {
                    *vi /= alpha;
                }
                v = atv;
                vss.push(v.clone());
            }
            anorm2 += alpha * alpha;
        } else {
            alpha = 0.0;
        }

        // Plane rotation.
        let rho = (rhobar * rhobar + beta * beta).sqrt();
        let c = rhobar / rho;
        let s = beta / rho;
        let theta = s * alpha;
        rhobar = -c * alpha;
        let phi = c * phibar;
        phibar *= s;

        let t1 = phi / rho;
        let t2 = -theta / rho;
        for j in 0..cols {
            x[j] += t1 * w[j];
            w[j] = v[j] + t2 * w[j];
        }

        let anorm = anorm2.sqrt();
        // Direct normal-equation residual: cheap at these sizes and immune
        // to estimate drift.
        let r: Vec<f64> = {
            let ax = a.apply(&x);
            ax.iter().zip(b).map(|(p, q)| q - p).collect()
        };
        let rnorm = norm(&r);
        let arnorm = norm(&a.apply_transpose(&r));
        let xnorm = norm(&x);
        if rnorm <= opts.tol * (anorm * xnorm + bnorm) {
            flag = SolveFlag::Converged;
            break;
        }
        if arnorm <= opts.tol * anorm * rnorm.max(1e-300) {
            flag = SolveFlag::NullSpaceRhsComponent;
            break;
        }
        if beta == 0.0 || alpha == 0.0 {
            flag = SolveFlag::Breakdown;
            break;
        }
    }

    let residual_norm = recomputed_residual(a, &x, b);
    if flag == SolveFlag::Breakdown && residual_norm <= opts.tol * bnorm {
        flag = SolveFlag::Converged;
    }
    SolveReport {
        solution: x,
        iterations,
        residual_norm,
        flag,
    }
}

/// Dense Moore-Penrose pseudoinverse solve via SVD; singular values below
/// rcond * sigma_max are truncated.
pub fn pinv_solve(a: &DMatrix<f64>, b: &[f64], rcond: f64) -> Result<Vec<f64>, Error> {
    if a.nrows() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "pinv_solve: matrix has {} rows, rhs {}",
            a.nrows(),
            b.len()
        )));
    }
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd u");
    let vt = svd.v_t.as_ref().expect("svd v_t");
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cutoff = rcond * smax;
    let mut x = vec![0.0; a.ncols()];
    for (i, &sigma) in svd.singular_values.iter().enumerate() {
        if sigma > cutoff && sigma > 0.0 {
            let mut ub = 0.0;
            for r in 0..a.nrows() {
                ub += u[(r, i)] * b[r];
            }
            let coef = ub / sigma;
            for j in 0..a.ncols() {
                x[j] += coef * vt[(i, j)];
            }
        }
    }
    Ok(x)
}

/// Diagonal (Jacobi) preconditioner m_j = 1 / |K_jj| with pruning of
/// numerically zero diagonal entries (zero-density lattice points).
#[derive(Debug, Clone)]
pub struct DiagonalPreconditioner {
    m: Vec<f64>,
    sqrt_m: Vec<f64>,
    pruned: Vec<bool>,
}

impl DiagonalPreconditioner {
    pub fn m(&self) -> &[f64] {
        &self.m
    }

    pub fn sqrt_m(&self) -> &[f64] {
        &self.sqrt_m
    }

    pub fn pruned(&self) -> &[bool] {
        &self.pruned
    }

    pub fn pruned_count(&self) -> usize {
        self.pruned.iter().filter(|&&p| p).count()
    }

    pub fn identity(n: usize) -> Self {
        DiagonalPreconditioner {
            m: vec![1.0; n],
            sqrt_m: vec![1.0; n],
            pruned: vec![false; n],
        }
    }
}

/// Build the diagonal preconditioner from the operator diagonal. Entries
/// with |d_j| < threshold_rel * max|d| are pruned to zero weight.
pub fn build_preconditioner(diag: &[f64], threshold_rel: f64) -> DiagonalPreconditioner {
    let max_abs = diag.iter().map(|d| d.abs()).fold(0.0, f64::max);
    let cutoff = threshold_rel * max_abs;
    let mut m = Vec::with_capacity(diag.len());
    let mut sqrt_m = Vec::with_capacity(diag.len());
    let mut pruned = Vec::with_capacity(diag.len());
    for &d in diag {
        if max_abs == 0.0 || d.abs() < cutoff || d == 0.0 {
            m.push(0.0);
            sqrt_m.push(0.0);
            pruned.push(true);
        } else {
            m.push(1.0 / d.abs());
            sqrt_m.push((1.0 / d.abs()).sqrt());
            pruned.push(false);
        }
    }
    DiagonalPreconditioner { m, sqrt_m, pruned }
}

/// Symmetrically preconditioned operator  M^(1/2) A M^(1/2).
pub struct PreconditionedOperator<'a> {
    op: &'a dyn LinearOperator,
    sqrt_m: &'a [f64],
}

impl<'a> PreconditionedOperator<'a> {
    pub fn new(op: &'a dyn LinearOperator, pre: &'a DiagonalPreconditioner) -> Self {
        assert_eq!(op.rows(), pre.sqrt_m.len());
        PreconditionedOperator {
            op,
            sqrt_m: &pre.sqrt_m,
        }
    }
}

impl LinearOperator for PreconditionedOperator<'_> {
    fn rows(&self) -> usize {
        self.op.rows()
    }

    fn cols(&self) -> usize {
        self.op.cols()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let scaled: Vec<f64> = x.iter().zip(self.sqrt_m).map(|(xi, s)| xi * s).collect();
        let mut y = self.op.apply(&scaled);
        for (yi, s) in y.iter_mut().zip(self.sqrt_m) {
            *yi *= s;
        }
        y
    }
}

/// Solve K v = s for a symmetric singular K through the symmetric
/// preconditioning M^(1/2) K M^(1/2) y = M^(1/2) s, v = M^(1/2) y.
///
/// The constant-vector component (always in K's null space) is projected out
/// of the right-hand side first; pruned points get v_j = 0, to be handled by
/// the caller (the propagation loop carries the previous value forward).
/// The report's residual refers to the preconditioned system actually solved.
pub fn preconditioned_solve(
    op: &dyn LinearOperator,
    pre: &DiagonalPreconditioner,
    s: &[f64],
    opts: &SolveOptions,
) -> SolveReport {
    preconditioned_with(op, pre, s, opts, minres_qlp)
}

/// Same preconditioning and gauge projection, LSQR as the inner iteration.
pub fn preconditioned_solve_lsqr(
    op: &dyn LinearOperator,
    pre: &DiagonalPreconditioner,
    s: &[f64],
    opts: &SolveOptions,
) -> SolveReport {
    preconditioned_with(op, pre, s, opts, lsqr)
}

fn preconditioned_with(
    op: &dyn LinearOperator,
    pre: &DiagonalPreconditioner,
    s: &[f64],
    opts: &SolveOptions,
    solver: fn(&dyn LinearOperator, &[f64], &SolveOptions) -> SolveReport,
) -> SolveReport {
    let n = s.len();
    assert_eq!(op.rows(), n);
    let mean = s.iter().sum::<f64>() / n as f64;
    let s_hat: Vec<f64> = s
        .iter()
        .zip(pre.sqrt_m())
        .map(|(si, w)| (si - mean) * w)
        .collect();
    let pop = PreconditionedOperator::new(op, pre);
    let mut report = solver(&pop, &s_hat, opts);
    for (xi, w) in report.solution.iter_mut().zip(pre.sqrt_m()) {
        *xi *= w;
    }
    report
}
