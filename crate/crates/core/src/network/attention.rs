//! Multi-head softmax self-attention, treated as a single module.

use super::forward::{ste_pullback, Quantized, SiteQuantizer};
use super::spec::Attention;
use crate::error::Result;
use crate::linalg::Matrix;
use crate::quant::Mask;

#[derive(Clone, Debug)]
pub struct AttentionCache {
    pub x_used: Matrix,
    pub x_mask: Option<Mask>,
    /// `wq, wk, wv, wo` as used in the forward pass.
    pub w_used: [Matrix; 4],
    pub w_masks: [Option<Mask>; 4],
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Softmax probabilities per head, `T × T`.
    pub probs: Vec<Matrix>,
    pub o_used: Matrix,
    pub o_mask: Option<Mask>,
}

pub(crate) fn attention_forward(
    idx: usize,
    a: &Attention,
    x: &Matrix,
    mut quant: Option<&mut dyn SiteQuantizer>,
) -> Result<(Matrix, AttentionCache)> {
    let ws = [&a.wq, &a.wk, &a.wv, &a.wo];
    let (xq, wq) = match quant.as_deref_mut() {
        Some(q) => {
            let xq = q.input((idx, 0), x)?;
            let mut out = Vec::with_capacity(4);
            for (s, w) in ws.iter().enumerate() {
                out.push(q.weight((idx, 1 + s as u8), w)?);
            }
            (xq, out)
        }
        None => (
            Quantized::exact(x),
            ws.iter().map(|w| Quantized::exact(w)).collect(),
        ),
    };
    let q_proj = xq.values.matmul_t(&wq[0].values)?;
    let k_proj = xq.values.matmul_t(&wq[1].values)?;
    let v_proj = xq.values.matmul_t(&wq[2].values)?;

    let t = x.rows();
    let d = x.cols();
    let dh = d / a.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut o = Matrix::zeros(t, d);
    let mut probs = Vec::with_capacity(a.heads);
    for h in 0..a.heads {
        let c0 = h * dh;
        let mut p = Matrix::zeros(t, t);
        for i in 0..t {
            let last = if a.causal { i + 1 } else { t };
            let qi = &q_proj.row(i)[c0..c0 + dh];
            let mut mx = f64::NEG_INFINITY;
            for j in 0..last {
                let kj = &k_proj.row(j)[c0..c0 + dh];
                let s = crate::linalg::dot(qi, kj) * scale;
                p[(i, j)] = s;
                mx = mx.max(s);
            }
            let mut z = 0.0;
            for j in 0..last {
                let e = (p[(i, j)] - mx).exp();
                p[(i, j)] = e;
                z += e;
            }
            for j in 0..last {
                p[(i, j)] /= z;
            }
        }
        for i in 0..t {
            for j in 0..t {
                let pij = p[(i, j)];
                if pij == 0.0 {
                    continue;
                }
                let vj = &v_proj.row(j)[c0..c0 + dh];
                let oi = &mut o.row_mut(i)[c0..c0 + dh];
                for (acc, v) in oi.iter_mut().zip(vj) {
                    *acc += pij * v;
                }
            }
        }
        probs.push(p);
    }
    let oq = match quant.as_deref_mut() {
        Some(q) => q.input((idx, 5), &o)?,
        None => Quantized::exact(&o),
    };
    let y = oq.values.matmul_t(&wq[3].values)?;
    let mut it = wq.into_iter();
    let mut next = || it.next().expect("four weights");
    let (w0, w1, w2, w3) = (next(), next(), next(), next());
    Ok((
        y,
        AttentionCache {
            x_used: xq.values,
            x_mask: xq.mask,
            w_used: [w0.values, w1.values, w2.values, w3.values],
            w_masks: [w0.mask, w1.mask, w2.mask, w3.mask],
            q: q_proj,
            k: k_proj,
            v: v_proj,
            probs,
            o_used: oq.values,
            o_mask: oq.mask,
        },
    ))
}

/// Returns `(dx, [dWq, dWk, dWv, dWo])`.
pub(crate) fn attention_backward(
    c: &AttentionCache,
    heads: usize,
    dy: &Matrix,
) -> Result<(Matrix, [Matrix; 4])> {
    let t = dy.rows();
    let d = c.x_used.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let dwo = ste_pullback(&dy.t_matmul(&c.o_used)?, c.w_masks[3].as_ref())?;
    let d_o_used = dy.matmul(&c.w_used[3])?;
    let d_o = ste_pullback(&d_o_used, c.o_mask.as_ref())?;

    let mut dq = Matrix::zeros(t, d);
    let mut dk = Matrix::zeros(t, d);
    let mut dv = Matrix::zeros(t, d);
    for (h, p) in c.probs.iter().enumerate() {
        let c0 = h * dh;
        // dP = dO_h V_hᵀ, dV_h = Pᵀ dO_h
        let mut dp = Matrix::zeros(t, t);
        for i in 0..t {
            let doi = &d_o.row(i)[c0..c0 + dh];
            for j in 0..t {
                if p[(i, j)] == 0.0 {
                    continue;
                }
                dp[(i, j)] = crate::linalg::dot(doi, &c.v.row(j)[c0..c0 + dh]);
                let pij = p[(i, j)];
                let dvj = &mut dv.row_mut(j)[c0..c0 + dh];
                for (acc, g) in dvj.iter_mut().zip(doi) {
                    *acc += pij * g;
                }
            }
        }
        // softmax backward, then the scaled score product
        for i in 0..t {
            let row_dot: f64 = (0..t).map(|j| dp[(i, j)] * p[(i, j)]).sum();
            for j in 0..t {
                let pij = p[(i, j)];
                if pij == 0.0 {
                    continue;
                }
                let ds = pij * (dp[(i, j)] - row_dot) * scale;
                for u in 0..dh {
                    dq[(i, c0 + u)] += ds * c.k[(j, c0 + u)];
                    dk[(j, c0 + u)] += ds * c.q[(i, c0 + u)];
                }
            }
        }
    }
    let dwq = ste_pullback(&dq.t_matmul(&c.x_used)?, c.w_masks[0].as_ref())?;
    let dwk = ste_pullback(&dk.t_matmul(&c.x_used)?, c.w_masks[1].as_ref())?;
    let dwv = ste_pullback(&dv.t_matmul(&c.x_used)?, c.w_masks[2].as_ref())?;
    let mut dx_used = dq.matmul(&c.w_used[0])?;
    dx_used.add_assign(&dk.matmul(&c.w_used[1])?)?;
    dx_used.add_assign(&dv.matmul(&c.w_used[2])?)?;
    let dx = ste_pullback(&dx_used, c.x_mask.as_ref())?;
    Ok((dx, [dwq, dwk, dwv, dwo]))
}
