use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::network::{backward, flatten_grads, forward_tape, ClipSurrogate, ModuleKind, NetworkSpec, SiteQuantizer};
use crate::quant::QuantConfig;

use super::tasks::mse;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, 1e-3)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub n_checked: usize,
    /// Closest relative distance of a Hadamard coefficient to its clip
    /// bound (QAT only; `∞` otherwise). Below about `1e-3` the finite
    /// differences may straddle a kink.
    pub min_margin: f64,
}

/// Mutable view of parameter tensor `k`, in [`crate::network::params`]
/// order.
pub fn param_slice_mut(net: &mut NetworkSpec, k: usize) -> Option<&mut [f64]> {
    let mut i = 0;
    for m in &mut net.modules {
        let slots: Vec<&mut [f64]> = match &mut m.kind {
            ModuleKind::Linear(w) => vec![w.data_mut()],
            ModuleKind::RmsNorm(g) => vec![g.as_mut_slice()],
            ModuleKind::Attention(a) => vec![
                a.wq.data_mut(),
                a.wk.data_mut(),
                a.wv.data_mut(),
                a.wo.data_mut(),
            ],
            _ => vec![],
        };
        for s in slots {
            if i == k {
                return Some(s);
            }
            i += 1;
        }
    }
    None
}

fn slot(w: &mut NetworkSpec, k: usize, j: usize) -> Result<&mut f64> {
    param_slice_mut(w, k)
        .and_then(|s| s.get_mut(j))
        .ok_or_else(|| Error::Shape(format!("parameter {k}[{j}] missing")))
}

fn loss(net: &NetworkSpec, x: &Matrix, y: &Matrix, q: Option<&mut ClipSurrogate>) -> Result<f64> {
    let (out, _) = forward_tape(net, x, q.map(|s| s as &mut dyn SiteQuantizer))?;
    Ok(mse(&out, y)?.0)
}

/// Compares backpropagated gradients of the mean-squared error against
/// central differences for every parameter. With `quant`, the quantizer is
/// replaced by its clip surrogate (bounds frozen at `net`), whose exact
/// derivative is what the STE backward computes.
pub fn grad_check(net: &NetworkSpec, x: &Matrix, y: &Matrix, quant: Option<&QuantConfig>) -> Result<GradCheck> {
    let mut sur = quant.map(|c| ClipSurrogate::new(*c)).transpose()?;
    let (out, caches) = forward_tape(net, x, sur.as_mut().map(|s| s as &mut dyn SiteQuantizer))?;
    let (_, dy) = mse(&out, y)?;
    let grads = flatten_grads(backward(net, &caches, &dy)?.0);
    let mut work = net.clone();
    let mut worst: f64 = 0.0;
    let mut n_checked = 0;
    for (k, g) in grads.iter().enumerate() {
        for j in 0..g.len() {
            let orig = *slot(&mut work, k, j)?;
            *slot(&mut work, k, j)? = orig + FD_STEP;
            let lp = loss(&work, x, y, sur.as_mut())?;
            *slot(&mut work, k, j)? = orig - FD_STEP;
            let lm = loss(&work, x, y, sur.as_mut())?;
            *slot(&mut work, k, j)? = orig;
            let numeric = (lp - lm) / (2.0 * FD_STEP);
            worst = worst.max(rel_error(g.data()[j], numeric));
            n_checked += 1;
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        n_checked,
        min_margin: sur.map_or(f64::INFINITY, |s| s.min_margin),
    })
}
