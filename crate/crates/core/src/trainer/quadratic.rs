//! Convex quadratic over a weight matrix, `½ vec(W − W*)ᵀ H vec(W − W*)`,
//! with a chosen condition number.

use crate::error::Result;
use crate::linalg::{sym_eigen, Matrix, Rng};
use crate::optim::{step, OptimizerConfig, OptimizerState};

#[derive(Clone, Debug)]
pub struct Quadratic {
    pub h: Matrix,
    pub target: Matrix,
}

impl Quadratic {
    /// `H = Q diag(λ) Qᵀ` with `λ` log-spaced from 1 to `condition` and a
    /// random orthogonal `Q`; `W*` is standard normal.
    pub fn new(rows: usize, cols: usize, condition: f64, rng: &mut Rng) -> Result<Self> {
        let d = rows * cols;
        let g = rng.normal_matrix(d, d, 1.0);
        let q = sym_eigen(&g.t_matmul(&g)?)?.vectors;
        let lambda: Vec<f64> = (0..d)
            .map(|i| condition.powf(i as f64 / (d.max(2) - 1) as f64))
            .collect();
        let mut h = q.matmul(&Matrix::from_diag(&lambda))?.matmul_t(&q)?;
        h.symmetrize();
        let target = rng.normal_matrix(rows, cols, 1.0);
        Ok(Self { h, target })
    }

    pub fn loss(&self, w: &Matrix) -> Result<f64> {
        let e = w.sub(&self.target)?;
        let he = self.h.matvec(e.data())?;
        Ok(0.5 * e.data().iter().zip(&he).map(|(a, b)| a * b).sum::<f64>())
    }

    pub fn grad(&self, w: &Matrix) -> Result<Matrix> {
        let e = w.sub(&self.target)?;
        Matrix::from_vec(w.rows(), w.cols(), self.h.matvec(e.data())?)
    }

    /// Runs `steps` updates from `W = 0`. Returns the loss before each step
    /// and after the last, plus the final weights.
    pub fn descend(&self, cfg: &OptimizerConfig, steps: usize) -> Result<(Vec<f64>, Matrix)> {
        let (m, n) = self.target.shape();
        let mut w = Matrix::zeros(m, n);
        let mut state = OptimizerState::new(cfg.kind, m, n);
        let mut losses = Vec::with_capacity(steps + 1);
        for _ in 0..steps {
            losses.push(self.loss(&w)?);
            let g = self.grad(&w)?;
            step(cfg, &mut state, &mut w, &g)?;
        }
        losses.push(self.loss(&w)?);
        Ok((losses, w))
    }
}
