//! Spectral norm by power iteration, and the matrix–vector alignment
//! cosine built on it.

use super::{dot, norm, Matrix, Rng};
use crate::error::{Error, Result};

/// Seed of the power-iteration start vector.
pub const POWER_ITERATION_SEED: u64 = 0x5EED;
pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralNorm {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Largest singular value of `w` by power iteration on `WᵀW`.
///
/// The start vector is drawn from [`POWER_ITERATION_SEED`]. Iteration stops
/// when successive estimates differ by less than `tol` relatively; after
/// `max_iter` the best estimate is returned with `converged = false`.
pub fn spectral_norm_with(w: &Matrix, tol: f64, max_iter: usize) -> Result<SpectralNorm> {
    if w.is_empty() {
        return Err(Error::Shape("spectral norm of an empty matrix".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::Config(format!("tolerance must be positive, got {tol}")));
    }
    w.ensure_finite("spectral_norm input")?;
    if w.data().iter().all(|&v| v == 0.0) {
        return Ok(SpectralNorm {
            value: 0.0,
            iterations: 0,
            converged: true,
        });
    }

    let mut rng = Rng::new(POWER_ITERATION_SEED);
    let mut v: Vec<f64> = (0..w.cols()).map(|_| rng.normal()).collect();
    normalize(&mut v);

    let mut estimate = 0.0;
    let mut best = 0.0f64;
    for it in 1..=max_iter {
        let wv = w.matvec(&v)?;
        // Rayleigh quotient of WᵀW at the unit vector v.
        let sigma = norm(&wv);
        best = best.max(sigma);
        let mut next = vec![0.0; w.cols()];
        for (r, &s) in w.row_iter().zip(&wv) {
            for (n, &x) in next.iter_mut().zip(r) {
                *n += s * x;
            }
        }
        if norm(&next) == 0.0 {
            // start vector landed in the null space; restart from a fresh draw
            v = (0..w.cols()).map(|_| rng.normal()).collect();
            normalize(&mut v);
            continue;
        }
        normalize(&mut next);
        v = next;
        if it > 1 && (sigma - estimate).abs() <= tol * sigma {
            return Ok(SpectralNorm {
                value: best,
                iterations: it,
                converged: true,
            });
        }
        estimate = sigma;
    }
    Ok(SpectralNorm {
        value: best,
        iterations: max_iter,
        converged: false,
    })
}

/// Spectral norm with the default tolerance and iteration cap.
pub fn spectral_norm(w: &Matrix) -> Result<f64> {
    spectral_norm_with(w, DEFAULT_TOL, DEFAULT_MAX_ITER).map(|s| s.value)
}

/// `‖Ax‖ / (‖A‖_* ‖x‖)`, clamped to `[0, 1]`.
pub fn matrix_vector_angle_cos(a: &Matrix, x: &[f64]) -> Result<f64> {
    let sigma = spectral_norm(a)?;
    angle_cos_with_norm(a, sigma, x)
}

/// As [`matrix_vector_angle_cos`] with a precomputed spectral norm.
pub fn angle_cos_with_norm(a: &Matrix, sigma: f64, x: &[f64]) -> Result<f64> {
    let nx = norm(x);
    if nx == 0.0 {
        return Err(Error::Undefined("angle with a zero vector".into()));
    }
    if sigma == 0.0 {
        return Err(Error::Undefined("angle with a zero matrix".into()));
    }
    let ax = norm(&a.matvec(x)?);
    Ok((ax / (sigma * nx)).clamp(0.0, 1.0))
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_diagonal() {
        let s = spectral_norm(&Matrix::identity(5)).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
        let d = spectral_norm(&Matrix::from_diag(&[3.0, 1.0])).unwrap();
        assert!((d - 3.0).abs() < 1e-9);
    }

    #[test]
    fn matches_svd_oracle() {
        let mut rng = Rng::new(17);
        for _ in 0..10 {
            let w = rng.normal_matrix(6, 4, 1.0);
            let na = nalgebra::DMatrix::from_row_slice(6, 4, w.data());
            let want = na.singular_values().max();
            let got = spectral_norm(&w).unwrap();
            assert!((got - want).abs() <= 1e-6 * want, "{got} vs {want}");
        }
    }

    #[test]
    fn homogeneous_in_scale() {
        let mut rng = Rng::new(3);
        let w = rng.normal_matrix(5, 7, 1.0);
        let s = spectral_norm(&w).unwrap();
        for c in [-3.5, 0.01, 12.0] {
            let sc = spectral_norm(&w.scale(c)).unwrap();
            assert!((sc - c.abs() * s).abs() <= 1e-10 * sc);
        }
    }

    #[test]
    fn zero_matrix_is_exactly_zero() {
        let z = spectral_norm_with(&Matrix::zeros(3, 2), 1e-10, 10).unwrap();
        assert_eq!(z.value, 0.0);
        assert!(z.converged);
    }

    #[test]
    fn reports_non_convergence() {
        let mut rng = Rng::new(1);
        let w = rng.normal_matrix(20, 20, 1.0);
        let s = spectral_norm_with(&w, 1e-15, 2).unwrap();
        assert!(!s.converged);
        assert_eq!(s.iterations, 2);
        assert!(s.value > 0.0);
    }

    #[test]
    fn rejects_bad_tolerance() {
        assert!(spectral_norm_with(&Matrix::identity(2), 0.0, 10).is_err());
    }

    #[test]
    fn angle_examples() {
        let x = [0.3, -1.2, 2.0];
        assert!((matrix_vector_angle_cos(&Matrix::identity(3), &x).unwrap() - 1.0).abs() < 1e-12);

        let a = Matrix::from_diag(&[2.0, 0.0]);
        assert_eq!(matrix_vector_angle_cos(&a, &[0.0, 1.0]).unwrap(), 0.0);

        let a = Matrix::from_diag(&[2.0, 1.0]);
        let h = 1.0 / 2f64.sqrt();
        // ‖Ax‖ = √(4/2 + 1/2) = √(5/2), ‖A‖ = 2, ‖x‖ = 1
        let want = (2.5f64).sqrt() / 2.0;
        let got = matrix_vector_angle_cos(&a, &[h, h]).unwrap();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn angle_undefined_cases() {
        assert!(matrix_vector_angle_cos(&Matrix::identity(2), &[0.0, 0.0]).is_err());
        assert!(matrix_vector_angle_cos(&Matrix::zeros(2, 2), &[1.0, 0.0]).is_err());
    }
}
