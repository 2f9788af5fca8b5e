use std::collections::HashMap;

use super::attention::{attention_forward, AttentionCache};
use super::spec::{ModuleKind, ModuleSpec, NetworkSpec};
use crate::error::{Error, Result};
use crate::linalg::{hadamard_in_place, Matrix};
use crate::quant::{quantize_rows, Mask, QuantConfig, Scheme};

/// RMSNorm epsilon, added inside the square root.
pub const RMS_EPS: f64 = 1e-8;

/// Identifies one quantization point: (module index, slot). Linear layers
/// use slot 0 for the input and 1 for the weight; attention uses 0 for the
/// input, 1..=4 for `wq, wk, wv, wo` and 5 for the input of `wo`.
pub type Site = (usize, u8);

/// A quantized tensor plus its STE mask (Hadamard domain), if any.
#[derive(Clone, Debug)]
pub struct Quantized {
    pub values: Matrix,
    pub mask: Option<Mask>,
}

impl Quantized {
    pub fn exact(x: &Matrix) -> Self {
        Self {
            values: x.clone(),
            mask: None,
        }
    }
}

/// Supplies the quantized version of an input or weight at a site.
pub trait SiteQuantizer {
    fn input(&mut self, site: Site, x: &Matrix) -> Result<Quantized>;
    fn weight(&mut self, site: Site, w: &Matrix) -> Result<Quantized>;
}

/// Real quantizer. Weights are quantized on first use and cached, so one
/// instance gives quantize-once semantics for every evaluation that shares
/// it.
pub struct Practical {
    cfg: QuantConfig,
    weights: HashMap<Site, Quantized>,
}

impl Practical {
    pub fn new(cfg: QuantConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            weights: HashMap::new(),
        })
    }

    /// Quantized weight for a site, if it has been used.
    pub fn cached_weight(&self, site: Site) -> Option<&Matrix> {
        self.weights.get(&site).map(|q| &q.values)
    }
}

impl SiteQuantizer for Practical {
    fn input(&mut self, _site: Site, x: &Matrix) -> Result<Quantized> {
        let r = quantize_rows(x, &self.cfg)?;
        Ok(Quantized {
            values: r.values,
            mask: r.mask,
        })
    }

    fn weight(&mut self, site: Site, w: &Matrix) -> Result<Quantized> {
        if let Some(q) = self.weights.get(&site) {
            return Ok(q.clone());
        }
        let q = self.input(site, w)?;
        self.weights.insert(site, q.clone());
        Ok(q)
    }
}

/// Differentiable stand-in for the quantizer: the Hadamard-domain clip with
/// bounds frozen at their first evaluation, no rounding. Its exact
/// derivative is the STE mask, so finite differences of a network using it
/// check the QAT backward pass.
pub struct ClipSurrogate {
    cfg: QuantConfig,
    bounds: HashMap<Site, Vec<f64>>,
    /// Smallest `| |x̂| − bound | / bound` seen, over all sites.
    pub min_margin: f64,
}

impl ClipSurrogate {
    pub fn new(cfg: QuantConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            bounds: HashMap::new(),
            min_margin: f64::INFINITY,
        })
    }

    fn apply(&mut self, site: Site, x: &Matrix) -> Result<Quantized> {
        if self.cfg.scheme == Scheme::AbsmaxRtn {
            // absmax never clips: the surrogate is the identity
            return Ok(Quantized::exact(x));
        }
        let bounds = match self.bounds.get(&site) {
            Some(b) => b.clone(),
            None => {
                let (_, ratios, mut b) = crate::quant::quest_search(x, &self.cfg)?;
                // an unclipped row keeps its largest coefficient on the grid
                // edge; the real quantizer rescales rather than clips there
                for (bound, c) in b.iter_mut().zip(ratios) {
                    if c >= 1.0 {
                        *bound = f64::INFINITY;
                    }
                }
                self.bounds.insert(site, b.clone());
                b
            }
        };
        if bounds.len() != x.rows() {
            return Err(Error::Shape(format!("surrogate site {site:?} changed row count")));
        }
        let padded = x.cols().max(1).next_power_of_two();
        let mut mask = Mask::filled(x.rows(), padded, true);
        let mut values = Matrix::zeros(x.rows(), x.cols());
        let mut buf = vec![0.0; padded];
        for r in 0..x.rows() {
            buf.iter_mut().for_each(|v| *v = 0.0);
            buf[..x.cols()].copy_from_slice(x.row(r));
            hadamard_in_place(&mut buf)?;
            let b = bounds[r];
            for (j, v) in buf.iter_mut().enumerate() {
                let inside = v.abs() <= b;
                mask.bits[r * padded + j] = inside;
                if b > 0.0 && b.is_finite() {
                    self.min_margin = self.min_margin.min((v.abs() - b).abs() / b);
                }
                *v = v.clamp(-b, b);
            }
            hadamard_in_place(&mut buf)?;
            values.row_mut(r).copy_from_slice(&buf[..x.cols()]);
        }
        Ok(Quantized {
            values,
            mask: Some(mask),
        })
    }
}

impl SiteQuantizer for ClipSurrogate {
    fn input(&mut self, site: Site, x: &Matrix) -> Result<Quantized> {
        self.apply(site, x)
    }

    fn weight(&mut self, site: Site, w: &Matrix) -> Result<Quantized> {
        self.apply(site, w)
    }
}

/// Backward of a quantization site under the straight-through estimator:
/// rotate into the Hadamard domain, zero masked entries, rotate back.
pub fn ste_pullback(g: &Matrix, mask: Option<&Mask>) -> Result<Matrix> {
    let Some(mask) = mask else {
        return Ok(g.clone());
    };
    if mask.rows != g.rows() || mask.cols < g.cols() {
        return Err(Error::Shape(format!(
            "STE mask {}x{} for gradient {:?}",
            mask.rows,
            mask.cols,
            g.shape()
        )));
    }
    let mut out = Matrix::zeros(g.rows(), g.cols());
    let mut buf = vec![0.0; mask.cols];
    for r in 0..g.rows() {
        buf.iter_mut().for_each(|v| *v = 0.0);
        buf[..g.cols()].copy_from_slice(g.row(r));
        hadamard_in_place(&mut buf)?;
        for (j, v) in buf.iter_mut().enumerate() {
            if !mask.get(r, j) {
                *v = 0.0;
            }
        }
        hadamard_in_place(&mut buf)?;
        out.row_mut(r).copy_from_slice(&buf[..g.cols()]);
    }
    Ok(out)
}

/// What the backward pass needs from one module evaluation.
#[derive(Clone, Debug)]
pub enum Cache {
    Linear {
        x_used: Matrix,
        x_mask: Option<Mask>,
        w_used: Matrix,
        w_mask: Option<Mask>,
    },
    RmsNorm {
        x: Matrix,
        inv_rms: Vec<f64>,
    },
    Relu2 {
        x: Matrix,
    },
    Residual,
    Attention(Box<AttentionCache>),
}

pub fn rmsnorm(x: &Matrix, gamma: &[f64]) -> (Matrix, Vec<f64>) {
    let d = x.cols() as f64;
    let mut y = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = y.row_mut(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d;
        let s = 1.0 / (ms + RMS_EPS).sqrt();
        for (v, g) in row.iter_mut().zip(gamma) {
            *v = *v * s * g;
        }
        inv.push(s);
    }
    (y, inv)
}

pub fn relu2(x: &Matrix) -> Matrix {
    x.map(|v| if v > 0.0 { v * v } else { 0.0 })
}

/// Evaluates module `idx` on `x`. `skip` is the tensor saved by the matching
/// `residual_begin` (required for `residual_end`). With `quant = None`, or
/// for modules that do not request quantization, this is the
/// full-precision function.
pub fn module_forward(
    idx: usize,
    m: &ModuleSpec,
    x: &Matrix,
    skip: Option<&Matrix>,
    quant: Option<&mut dyn SiteQuantizer>,
) -> Result<(Matrix, Cache)> {
    let quant = if m.quantize { quant } else { None };
    match &m.kind {
        ModuleKind::Linear(w) => {
            let (xq, wq) = match quant {
                Some(q) => (q.input((idx, 0), x)?, q.weight((idx, 1), w)?),
                None => (Quantized::exact(x), Quantized::exact(w)),
            };
            let y = xq.values.matmul_t(&wq.values)?;
            Ok((
                y,
                Cache::Linear {
                    x_used: xq.values,
                    x_mask: xq.mask,
                    w_used: wq.values,
                    w_mask: wq.mask,
                },
            ))
        }
        ModuleKind::RmsNorm(g) => {
            if g.len() != x.cols() {
                return Err(Error::Shape(format!("rmsnorm width {} vs {}", g.len(), x.cols())));
            }
            let (y, inv_rms) = rmsnorm(x, g);
            Ok((
                y,
                Cache::RmsNorm {
                    x: x.clone(),
                    inv_rms,
                },
            ))
        }
        ModuleKind::Relu2 => Ok((relu2(x), Cache::Relu2 { x: x.clone() })),
        ModuleKind::ResidualBegin(_) => Ok((x.clone(), Cache::Residual)),
        ModuleKind::ResidualEnd(tag) => {
            let s = skip.ok_or_else(|| Error::Shape(format!("residual '{tag}' has no skip")))?;
            Ok((x.add(s)?, Cache::Residual))
        }
        ModuleKind::Attention(a) => {
            let (y, c) = attention_forward(idx, a, x, quant)?;
            Ok((y, Cache::Attention(Box::new(c))))
        }
    }
}

/// Runs the network, returning the output and per-module caches.
pub fn forward_tape(
    net: &NetworkSpec,
    x: &Matrix,
    mut quant: Option<&mut dyn SiteQuantizer>,
) -> Result<(Matrix, Vec<Cache>)> {
    if x.cols() != net.input_width {
        return Err(Error::Shape(format!(
            "input has {} columns, network expects {}",
            x.cols(),
            net.input_width
        )));
    }
    x.ensure_finite("network input")?;
    let mut h = x.clone();
    let mut stack: Vec<Matrix> = Vec::new();
    let mut caches = Vec::with_capacity(net.len());
    for (i, m) in net.modules.iter().enumerate() {
        let skip = match m.kind {
            ModuleKind::ResidualEnd(_) => stack.pop(),
            _ => None,
        };
        let (y, c) = module_forward(i, m, &h, skip.as_ref(), quant.as_mut().map(|q| &mut **q as &mut dyn SiteQuantizer))?;
        if let ModuleKind::ResidualBegin(_) = m.kind {
            stack.push(h);
        }
        h = y;
        caches.push(c);
    }
    Ok((h, caches))
}

/// Full-precision activations. Entry 0 is the input; entry `ℓ` is the
/// output of module `ℓ` (1-based).
pub fn forward_reference(net: &NetworkSpec, x: &Matrix) -> Result<Vec<Matrix>> {
    net.ensure_input(x)?;
    let mut hs = Vec::with_capacity(net.len() + 1);
    hs.push(x.clone());
    let mut stack: Vec<Matrix> = Vec::new();
    for (i, m) in net.modules.iter().enumerate() {
        let prev = hs.last().expect("nonempty");
        let skip = match m.kind {
            ModuleKind::ResidualEnd(_) => stack.pop(),
            _ => None,
        };
        let (y, _) = module_forward(i, m, prev, skip.as_ref(), None)?;
        if let ModuleKind::ResidualBegin(_) = m.kind {
            stack.push(prev.clone());
        }
        hs.push(y);
    }
    Ok(hs)
}

/// Network output with quantized linear layers (weights quantized once).
pub fn forward_quantized(net: &NetworkSpec, x: &Matrix, cfg: &QuantConfig) -> Result<Matrix> {
    let mut q = Practical::new(*cfg)?;
    let (y, _) = forward_tape(net, x, Some(&mut q))?;
    Ok(y)
}

/// Reference and quantized activations plus the two cross evaluations,
/// indexed like [`forward_reference`]. Entry 0 of every list is the input.
#[derive(Clone, Debug)]
pub struct DualTrace {
    pub h: Vec<Matrix>,
    pub hq: Vec<Matrix>,
    pub fq_of_h: Vec<Matrix>,
    pub f_of_hq: Vec<Matrix>,
    /// Quantized weight used by each quantized linear module.
    pub quantized_weights: Vec<Option<Matrix>>,
}

impl DualTrace {
    /// Number of modules.
    pub fn len(&self) -> usize {
        self.h.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.h.len();
        if n == 0 || self.hq.len() != n || self.fq_of_h.len() != n || self.f_of_hq.len() != n {
            return Err(Error::Shape("dual trace lists differ in length".into()));
        }
        for l in 0..n {
            let s = self.h[l].shape();
            if self.hq[l].shape() != s || self.fq_of_h[l].shape() != s || self.f_of_hq[l].shape() != s {
                return Err(Error::Shape(format!("dual trace entry {l} shapes differ")));
            }
        }
        Ok(())
    }
}

/// Runs all four evaluations `f(h)`, `fq(hq)`, `fq(h)` and `f(hq)` per
/// module. Residual skips travel with their path: evaluations on `h` add the
/// reference skip, evaluations on `hq` the quantized one.
pub fn forward_dual(net: &NetworkSpec, x: &Matrix, cfg: &QuantConfig) -> Result<DualTrace> {
    net.ensure_input(x)?;
    let mut quant = Practical::new(*cfg)?;
    let l = net.len();
    let mut t = DualTrace {
        h: Vec::with_capacity(l + 1),
        hq: Vec::with_capacity(l + 1),
        fq_of_h: Vec::with_capacity(l + 1),
        f_of_hq: Vec::with_capacity(l + 1),
        quantized_weights: vec![None; l + 1],
    };
    t.h.push(x.clone());
    t.hq.push(x.clone());
    t.fq_of_h.push(x.clone());
    t.f_of_hq.push(x.clone());
    let mut ref_stack: Vec<Matrix> = Vec::new();
    let mut q_stack: Vec<Matrix> = Vec::new();
    for (i, m) in net.modules.iter().enumerate() {
        let h = &t.h[i];
        let hq = &t.hq[i];
        let (skip_ref, skip_q) = match m.kind {
            ModuleKind::ResidualEnd(_) => (ref_stack.pop(), q_stack.pop()),
            _ => (None, None),
        };
        let (f_h, _) = module_forward(i, m, h, skip_ref.as_ref(), None)?;
        let (fq_h, _) = module_forward(i, m, h, skip_ref.as_ref(), Some(&mut quant))?;
        let (f_hq, _) = module_forward(i, m, hq, skip_q.as_ref(), None)?;
        let (fq_hq, _) = module_forward(i, m, hq, skip_q.as_ref(), Some(&mut quant))?;
        if let ModuleKind::ResidualBegin(_) = m.kind {
            ref_stack.push(h.clone());
            q_stack.push(hq.clone());
        }
        if m.quantize {
            if let ModuleKind::Linear(_) = m.kind {
                t.quantized_weights[i + 1] = quant.cached_weight((i, 1)).cloned();
            }
        }
        t.h.push(f_h);
        t.hq.push(fq_hq);
        t.fq_of_h.push(fq_h);
        t.f_of_hq.push(f_hq);
    }
    Ok(t)
}
