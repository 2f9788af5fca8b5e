//! Reverse-mode gradients through a recorded forward pass.

use super::attention::attention_backward;
use super::forward::{ste_pullback, Cache};
use super::spec::{ModuleKind, NetworkSpec};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Gradients per module, in parameter order: `[dW]` for linear, `[dγ]`
/// (one row) for rmsnorm, `[dWq, dWk, dWv, dWo]` for attention, empty
/// otherwise.
pub type ModuleGrads = Vec<Vec<Matrix>>;

pub fn backward(net: &NetworkSpec, caches: &[Cache], dy: &Matrix) -> Result<(ModuleGrads, Matrix)> {
    if caches.len() != net.len() {
        return Err(Error::Shape("cache count differs from module count".into()));
    }
    let mut grads: ModuleGrads = vec![Vec::new(); net.len()];
    let mut g = dy.clone();
    let mut skip_grads: Vec<Matrix> = Vec::new();
    for i in (0..net.len()).rev() {
        let m = &net.modules[i];
        match (&m.kind, &caches[i]) {
            (
                ModuleKind::Linear(_),
                Cache::Linear {
                    x_used,
                    x_mask,
                    w_used,
                    w_mask,
                },
            ) => {
                let dw = ste_pullback(&g.t_matmul(x_used)?, w_mask.as_ref())?;
                let dx = ste_pullback(&g.matmul(w_used)?, x_mask.as_ref())?;
                grads[i] = vec![dw];
                g = dx;
            }
            (ModuleKind::RmsNorm(gamma), Cache::RmsNorm { x, inv_rms }) => {
                let (dx, dgamma) = rmsnorm_backward(x, inv_rms, gamma, &g);
                grads[i] = vec![Matrix::from_vec(1, gamma.len(), dgamma)?];
                g = dx;
            }
            (ModuleKind::Relu2, Cache::Relu2 { x }) => {
                g = x.zip_map(&g, |xv, gv| if xv > 0.0 { 2.0 * xv * gv } else { 0.0 })?;
            }
            (ModuleKind::ResidualEnd(_), Cache::Residual) => {
                skip_grads.push(g.clone());
            }
            (ModuleKind::ResidualBegin(tag), Cache::Residual) => {
                let s = skip_grads
                    .pop()
                    .ok_or_else(|| Error::Shape(format!("residual '{tag}' unmatched in backward")))?;
                g.add_assign(&s)?;
            }
            (ModuleKind::Attention(a), Cache::Attention(c)) => {
                let (dx, dws) = attention_backward(c, a.heads, &g)?;
                grads[i] = dws.into();
                g = dx;
            }
            _ => return Err(Error::Shape(format!("cache kind mismatch at module {i}"))),
        }
    }
    Ok((grads, g))
}

/// Exact Jacobian-vector product of `y = γ ⊙ x / rms(x)`.
fn rmsnorm_backward(x: &Matrix, inv_rms: &[f64], gamma: &[f64], dy: &Matrix) -> (Matrix, Vec<f64>) {
    let d = x.cols() as f64;
    let mut dx = Matrix::zeros(x.rows(), x.cols());
    let mut dgamma = vec![0.0; gamma.len()];
    for r in 0..x.rows() {
        let s = inv_rms[r];
        let xr = x.row(r);
        let gr = dy.row(r);
        let mut coupling = 0.0;
        for j in 0..xr.len() {
            dgamma[j] += gr[j] * xr[j] * s;
            coupling += gamma[j] * gr[j] * xr[j];
        }
        let c = s * s * s / d * coupling;
        let out = dx.row_mut(r);
        for j in 0..xr.len() {
            out[j] = gamma[j] * gr[j] * s - xr[j] * c;
        }
    }
    (dx, dgamma)
}

/// Trainable tensors in a fixed order (module order, then slot order).
/// Rmsnorm gains appear as single-row matrices.
pub fn params(net: &NetworkSpec) -> Vec<Matrix> {
    let mut out = Vec::new();
    for m in &net.modules {
        match &m.kind {
            ModuleKind::Linear(w) => out.push(w.clone()),
            ModuleKind::RmsNorm(g) => out.push(Matrix::from_vec(1, g.len(), g.clone()).expect("row")),
            ModuleKind::Attention(a) => {
                out.extend([a.wq.clone(), a.wk.clone(), a.wv.clone(), a.wo.clone()]);
            }
            _ => {}
        }
    }
    out
}

/// Inverse of [`params`].
pub fn set_params(net: &mut NetworkSpec, values: &[Matrix]) -> Result<()> {
    let mut it = values.iter();
    let mut next = |want: (usize, usize)| -> Result<Matrix> {
        let m = it
            .next()
            .ok_or_else(|| Error::Shape("too few parameter tensors".into()))?;
        if m.shape() != want {
            return Err(Error::Shape(format!("parameter {:?} vs {:?}", m.shape(), want)));
        }
        Ok(m.clone())
    };
    for m in &mut net.modules {
        match &mut m.kind {
            ModuleKind::Linear(w) => *w = next(w.shape())?,
            ModuleKind::RmsNorm(g) => *g = next((1, g.len()))?.into_data(),
            ModuleKind::Attention(a) => {
                a.wq = next(a.wq.shape())?;
                a.wk = next(a.wk.shape())?;
                a.wv = next(a.wv.shape())?;
                a.wo = next(a.wo.shape())?;
            }
            _ => {}
        }
    }
    if it.next().is_some() {
        return Err(Error::Shape("too many parameter tensors".into()));
    }
    Ok(())
}

/// Flattens [`ModuleGrads`] into the order of [`params`].
pub fn flatten_grads(grads: ModuleGrads) -> Vec<Matrix> {
    grads.into_iter().flatten().collect()
}
