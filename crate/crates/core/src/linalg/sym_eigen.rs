use nalgebra::DMatrix;

use super::Matrix;
use crate::error::{Error, Result};

/// Eigendecomposition of a symmetric matrix, eigenvalues ascending.
#[derive(Clone, Debug)]
pub struct SymEigen {
    pub values: Vec<f64>,
    /// Eigenvectors as columns, in the order of `values`.
    pub vectors: Matrix,
}

pub fn sym_eigen(a: &Matrix) -> Result<SymEigen> {
    let n = a.rows();
    if n != a.cols() {
        return Err(Error::Shape(format!("eigen of non-square {:?}", a.shape())));
    }
    a.ensure_finite("symmetric eigen input")?;
    let m = DMatrix::from_row_slice(n, n, a.data());
    let eig = m.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok(SymEigen { values, vectors })
}

/// `Q diag(f(λ)) Qᵀ` for symmetric `a`.
pub fn sym_matrix_power(a: &Matrix, f: impl Fn(f64) -> f64) -> Result<Matrix> {
    let SymEigen { values, vectors } = sym_eigen(a)?;
    let n = values.len();
    let scaled: Vec<f64> = values.iter().map(|&l| f(l)).collect();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for (k, &d) in scaled.iter().enumerate() {
                s += vectors[(i, k)] * d * vectors[(j, k)];
            }
            out[(i, j)] = s;
        }
    }
    out.symmetrize();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Rng;

    #[test]
    fn reconstructs_and_roots() {
        let mut rng = Rng::new(2);
        let g = rng.normal_matrix(5, 5, 1.0);
        let a = g.matmul_t(&g).unwrap();
        let e = sym_eigen(&a).unwrap();
        assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
        let back = sym_matrix_power(&a, |l| l).unwrap();
        for (x, y) in back.data().iter().zip(a.data()) {
            assert!((x - y).abs() < 1e-10);
        }
        let root = sym_matrix_power(&a, |l| l.max(0.0).sqrt()).unwrap();
        let sq = root.matmul(&root).unwrap();
        for (x, y) in sq.data().iter().zip(a.data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}
