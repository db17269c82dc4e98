//! Small complex linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type CMat = DMatrix<Complex64>;
pub type CVec = DVector<Complex64>;

pub const J: Complex64 = Complex64::new(0.0, 1.0);

/// Solves `A x = b` for Hermitian positive definite `A`.
pub fn solve_hpd(a: &CMat, b: &CVec) -> Result<CVec> {
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("matrix is not Hermitian positive definite".into()))?;
    Ok(chol.solve(b))
}

/// `n x n` DFT matrix with unit-modulus entries, so `F F^H = n I`.
pub fn dft_matrix(n: usize) -> CMat {
    CMat::from_fn(n, n, |r, c| {
        let phase = -2.0 * std::f64::consts::PI * (r * c) as f64 / n as f64;
        Complex64::from_polar(1.0, phase)
    })
}

/// Circularly-symmetric complex Gaussian samples with per-entry variance `var`.
pub fn complex_gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, var: f64, rng: &mut R) -> CMat {
    let s = (var / 2.0).sqrt();
    CMat::from_fn(rows, cols, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        Complex64::new(s * re, s * im)
    })
}

pub fn norm_sqr(v: &CVec) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum()
}

/// `a^H b` for column vectors.
pub fn inner(a: &CVec, b: &CVec) -> Complex64 {
    a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum()
}

pub fn identity(n: usize) -> CMat {
    CMat::identity(n, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn dft_rows_are_orthogonal() {
        for n in [1, 2, 4, 7, 64] {
            let f = dft_matrix(n);
            let g = &f * f.adjoint();
            let err = (g - CMat::identity(n, n) * Complex64::new(n as f64, 0.0)).norm();
            assert!(err < 1e-10 * n as f64, "n={n} err={err}");
        }
    }

    #[test]
    fn hpd_solve_matches_inverse() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let b = complex_gaussian(4, 4, 1.0, &mut rng);
        let a = &b * b.adjoint() + CMat::identity(4, 4);
        let rhs = complex_gaussian(4, 1, 1.0, &mut rng).column(0).into_owned();
        let x = solve_hpd(&a, &rhs).unwrap();
        assert!((&a * &x - &rhs).norm() < 1e-12);
    }

    #[test]
    fn gaussian_variance() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let z = complex_gaussian(200, 200, 2.5, &mut rng);
        let v = z.iter().map(|x| x.norm_sqr()).sum::<f64>() / 40_000.0;
        assert!((v - 2.5).abs() < 0.05);
    }
}
