//! Small dense complex helpers shared by the solvers.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::{CMatrix, CVector, Error, Result, C64};

/// Draws a circularly-symmetric complex Gaussian sample with unit variance.
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R) -> C64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

pub fn random_complex_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> CMatrix {
    // Column-major fill keeps the draw order stable across nalgebra versions.
    let mut m = CMatrix::zeros(rows, cols);
    for j in 0..cols {
        for i in 0..rows {
            m[(i, j)] = complex_normal(rng);
        }
    }
    m
}

/// Random vector with unit Euclidean norm.
pub fn random_unit_vector<R: Rng + ?Sized>(len: usize, rng: &mut R) -> CVector {
    loop {
        let v = CVector::from_fn(len, |_, _| complex_normal(rng));
        let n = v.norm();
        if n > 1e-12 {
            return v / C64::from(n);
        }
    }
}

/// Gram matrix `AᴴA`.
pub fn gram(a: &CMatrix) -> CMatrix {
    a.adjoint() * a
}

/// Largest eigenvalue of a Hermitian positive semi-definite matrix.
pub fn max_eigenvalue_hermitian(g: &CMatrix) -> f64 {
    if g.nrows() == 0 {
        return 0.0;
    }
    g.clone()
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(0.0_f64, f64::max)
}

/// Solves `(G + shift·I) X = B` for Hermitian positive semi-definite `G`
/// by Cholesky factorization.
pub fn solve_hermitian(g: &CMatrix, shift: f64, b: &CMatrix) -> Result<CMatrix> {
    let n = g.nrows();
    if g.ncols() != n || b.nrows() != n {
        return Err(Error::Dimension(format!(
            "hermitian solve with {}x{} system and {} right-hand rows",
            g.nrows(),
            g.ncols(),
            b.nrows()
        )));
    }
    let mut a = g.clone();
    for i in 0..n {
        a[(i, i)] += C64::from(shift);
    }
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::Singular(format!("{n}x{n} Gram matrix is not positive definite")))?;
    Ok(chol.solve(b))
}

/// Tikhonov shift `1e-8 · trace(G) / n` used before inverting Gram matrices.
pub fn tikhonov_shift(g: &CMatrix) -> f64 {
    let n = g.nrows().max(1);
    let trace: f64 = (0..g.nrows()).map(|i| g[(i, i)].re).sum();
    1e-8 * trace / n as f64
}

pub fn frobenius_sq(m: &CMatrix) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum()
}

pub fn l1_norm(v: impl IntoIterator<Item = C64>) -> f64 {
    v.into_iter().map(|z| z.norm()).sum()
}

/// Conjugate inner product `⟨a, b⟩ = Σ conj(a_i) b_i`.
pub fn cdot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

pub fn real_to_complex(m: &DMatrix<f64>) -> CMatrix {
    m.map(C64::from)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_from_seed;

    #[test]
    fn complex_normal_has_unit_variance() {
        let mut rng = rng_from_seed(3);
        let n = 200_000;
        let var: f64 = (0..n).map(|_| complex_normal(&mut rng).norm_sqr()).sum::<f64>() / n as f64;
        assert!((var - 1.0).abs() < 0.01, "{var}");
    }

    #[test]
    fn hermitian_solve_matches_product() {
        let mut rng = rng_from_seed(11);
        let a = random_complex_matrix(6, 4, &mut rng);
        let g = gram(&a);
        let b = random_complex_matrix(4, 2, &mut rng);
        let x = solve_hermitian(&g, 0.0, &b).unwrap();
        assert!((&g * &x - &b).norm() < 1e-10);
    }

    #[test]
    fn singular_gram_is_reported() {
        let g = CMatrix::zeros(3, 3);
        let b = CMatrix::zeros(3, 1);
        assert!(matches!(solve_hermitian(&g, 0.0, &b), Err(Error::Singular(_))));
    }

    #[test]
    fn max_eigenvalue_of_diagonal() {
        let g = CMatrix::from_diagonal(&CVector::from_vec(vec![
            C64::from(1.0),
            C64::from(4.0),
            C64::from(2.5),
        ]));
        assert!((max_eigenvalue_hermitian(&g) - 4.0).abs() < 1e-12);
    }
}
