//! Shared helpers for in-crate unit tests.

use crate::C64;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_real_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    let u = Uniform::new(-1.0, 1.0);
    (0..n).map(|_| u.sample(&mut r)).collect()
}

pub fn rand_complex_vec(n: usize, seed: u64) -> Vec<C64> {
    let mut r = rng(seed);
    let u = Uniform::new(-1.0, 1.0);
    (0..n)
        .map(|_| C64::new(u.sample(&mut r), u.sample(&mut r)))
        .collect()
}

/// Normalized random complex vector.
pub fn rand_state(n: usize, seed: u64) -> Vec<C64> {
    let mut v = rand_complex_vec(n, seed);
    let norm: f64 = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    for z in &mut v {
        *z /= norm;
    }
    v
}

#[track_caller]
pub fn assert_close(got: f64, want: f64, tol: f64, what: &str) {
    assert!(
        (got - want).abs() <= tol,
        "{what}: got {got:.16e}, want {want:.16e}, |diff| {:.3e} > tol {tol:.3e}",
        (got - want).abs()
    );
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn linf(a: &[f64]) -> f64 {
    a.iter().map(|x| x.abs()).fold(0.0, f64::max)
}

/// Exact dense propagator oracle: c(dt) = exp(-i H dt / hbar) c through the
/// eigendecomposition of the real symmetric H. Test-only, O(n^3) per call.
pub fn evolve_dense(h: &nalgebra::DMatrix<f64>, hbar: f64, dt: f64, c: &[C64]) -> Vec<C64> {
    let n = h.nrows();
    assert_eq!(c.len(), n);
    let eig = nalgebra::SymmetricEigen::new(h.clone());
    // a = U^T c
    let mut a = vec![C64::new(0.0, 0.0); n];
    for k in 0..n {
        for j in 0..n {
            a[k] += eig.eigenvectors[(j, k)] * c[j];
        }
    }
    for k in 0..n {
        a[k] *= C64::from_polar(1.0, -eig.eigenvalues[k] * dt / hbar);
    }
    let mut out = vec![C64::new(0.0, 0.0); n];
    for j in 0..n {
        for k in 0..n {
            out[j] += eig.eigenvectors[(j, k)] * a[k];
        }
    }
    out
}
