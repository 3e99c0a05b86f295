#![allow(dead_code)]

use cfw::matops::{Matrix, SymMatrix};
use rand::Rng;

/// Random orthogonal matrix from Gram–Schmidt on uniform vectors.
pub fn random_orthogonal(n: usize, rng: &mut impl Rng) -> Matrix {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(n);
    while q.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-3 {
            q.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    Matrix::from_rows(&q).unwrap()
}

/// `Q·diag(spectrum)·Qᵀ` for a random orthogonal `Q`.
pub fn spd_with_spectrum(spectrum: &[f64], rng: &mut impl Rng) -> SymMatrix {
    let q = random_orthogonal(spectrum.len(), rng);
    let a = q.transpose().matmul(&Matrix::from_diag(spectrum)).unwrap().matmul(&q).unwrap();
    SymMatrix::from_symmetrized(a).unwrap()
}

/// SPD matrix of dimension `n` with eigenvalues log-spaced over `[1, kappa]`
/// (endpoints included) and a random overall scale.
pub fn random_spd(n: usize, kappa: f64, rng: &mut impl Rng) -> SymMatrix {
    let scale = 10f64.powf(rng.random_range(-2.0..2.0));
    let spectrum: Vec<f64> = (0..n)
        .map(|i| {
            let t = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
            scale * kappa.powf(t)
        })
        .collect();
    spd_with_spectrum(&spectrum, rng)
}

pub fn rel_frobenius(a: &Matrix, b: &Matrix) -> f64 {
    a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm()
}
