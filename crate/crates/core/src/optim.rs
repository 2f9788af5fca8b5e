//! AdamW, Muon, PSGD, Scion, Shampoo and SOAP for a single weight matrix,
//! with exact accounting of the floats each one keeps.
//!
//! Every state holds a copy of the latest gradient, so element counts are
//! "including gradients":
//!
//! | kind    | state elements        |
//! |---------|-----------------------|
//! | adamw   | 3mn                   |
//! | muon    | 2mn                   |
//! | psgd    | mn + m² + n²          |
//! | scion   | 2mn                   |
//! | shampoo | 3mn + m² + n² (+ m² + n² inverse roots) |
//! | soap    | 3mn + 2m² + 2n²       |

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{spectral_norm, sym_eigen, sym_matrix_power, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adamw,
    Muon,
    Psgd,
    Scion,
    Shampoo,
    Soap,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 6] = [
        OptimizerKind::Adamw,
        OptimizerKind::Muon,
        OptimizerKind::Psgd,
        OptimizerKind::Scion,
        OptimizerKind::Shampoo,
        OptimizerKind::Soap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Adamw => "adamw",
            OptimizerKind::Muon => "muon",
            OptimizerKind::Psgd => "psgd",
            OptimizerKind::Scion => "scion",
            OptimizerKind::Shampoo => "shampoo",
            OptimizerKind::Soap => "soap",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown optimizer '{s}'")))
    }
}

pub const QUINTIC_NS: [f64; 3] = [3.4445, -4.7750, 2.0315];
pub const CUBIC_NS: [f64; 3] = [1.5, -0.5, 0.0];

fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_momentum() -> f64 {
    0.95
}
fn d_true() -> bool {
    true
}
fn d_ns_iters() -> usize {
    5
}
fn d_freq() -> usize {
    10
}
fn d_eps() -> f64 {
    1e-8
}
fn d_damping() -> f64 {
    1e-6
}
fn d_ns() -> [f64; 3] {
    QUINTIC_NS
}
fn d_precond_beta() -> f64 {
    0.1
}
fn d_rel_damping() -> f64 {
    1e-2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    /// Muon / Scion momentum.
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    /// Nesterov look-ahead for Muon.
    #[serde(default = "d_true")]
    pub nesterov: bool,
    /// Newton–Schulz iterations `T`.
    #[serde(default = "d_ns_iters")]
    pub ns_iters: usize,
    /// Preconditioner update frequency `f`.
    #[serde(default = "d_freq")]
    pub precond_update_freq: usize,
    /// Adam denominator epsilon.
    #[serde(default = "d_eps")]
    pub epsilon: f64,
    /// Added to preconditioner eigenvalues before inverse roots.
    #[serde(default = "d_damping")]
    pub damping: f64,
    #[serde(default = "d_ns")]
    pub ns_coefficients: [f64; 3],
    /// PSGD preconditioner fitting rate.
    #[serde(default = "d_precond_beta")]
    pub precond_beta: f64,
    /// PSGD damping relative to the mean eigenvalue of each Kronecker
    /// factor's covariance.
    #[serde(default = "d_rel_damping")]
    pub precond_rel_damping: f64,
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            weight_decay: 0.0,
            beta1: d_beta1(),
            beta2: d_beta2(),
            momentum: d_momentum(),
            nesterov: true,
            ns_iters: d_ns_iters(),
            precond_update_freq: d_freq(),
            epsilon: d_eps(),
            damping: d_damping(),
            ns_coefficients: QUINTIC_NS,
            precond_beta: d_precond_beta(),
            precond_rel_damping: d_rel_damping(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if !(unit(self.beta1) && unit(self.beta2) && unit(self.momentum)) {
            return bad("betas and momentum must lie in [0, 1)");
        }
        if self.ns_iters == 0 || self.precond_update_freq == 0 {
            return bad("ns_iters and precond_update_freq must be at least 1");
        }
        if !(self.epsilon >= 0.0
            && self.damping >= 0.0
            && self.weight_decay >= 0.0
            && self.precond_rel_damping >= 0.0)
        {
            return bad("epsilon, damping and weight_decay must be non-negative");
        }
        if !(self.precond_beta > 0.0 && self.precond_beta <= 1.0) {
            return bad("precond_beta must lie in (0, 1]");
        }
        if self.ns_coefficients.iter().any(|c| !c.is_finite()) {
            return bad("ns_coefficients must be finite");
        }
        Ok(())
    }

    /// The same hyper-parameters under AdamW, used for vectors and
    /// embeddings.
    pub fn as_adamw(&self) -> Self {
        Self {
            kind: OptimizerKind::Adamw,
            ..self.clone()
        }
    }
}

/// Closed-form state size (floats, including the gradient) for an `m × n`
/// layer.
pub fn state_memory_elements(kind: OptimizerKind, m: usize, n: usize) -> usize {
    let mn = m * n;
    let (m2, n2) = (m * m, n * n);
    match kind {
        OptimizerKind::Adamw => 3 * mn,
        OptimizerKind::Muon => 2 * mn,
        OptimizerKind::Psgd => mn + m2 + n2,
        OptimizerKind::Scion => 2 * mn,
        OptimizerKind::Shampoo => 3 * mn + m2 + n2,
        OptimizerKind::Soap => 3 * mn + 2 * m2 + 2 * n2,
    }
}

/// Floats held for Shampoo's inverse-root factors, reported apart from the
/// state count.
pub fn eigenbasis_memory_elements(kind: OptimizerKind, m: usize, n: usize) -> usize {
    match kind {
        OptimizerKind::Shampoo => m * m + n * n,
        _ => 0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Buffer {
    Grad,
    Moment1,
    Moment2,
    Momentum,
    LeftStat,
    RightStat,
    LeftBasis,
    RightBasis,
    LeftPrecond,
    RightPrecond,
    LeftRoot,
    RightRoot,
}

impl Buffer {
    fn is_root(self) -> bool {
        matches!(self, Buffer::LeftRoot | Buffer::RightRoot)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    kind: OptimizerKind,
    shape: (usize, usize),
    step: u64,
    buffers: Vec<(Buffer, Matrix)>,
    frozen_bases: bool,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, rows: usize, cols: usize) -> Self {
        use Buffer::*;
        let (m, n) = (rows, cols);
        let z = || Matrix::zeros(m, n);
        let buffers: Vec<(Buffer, Matrix)> = match kind {
            OptimizerKind::Adamw => vec![(Grad, z()), (Moment1, z()), (Moment2, z())],
            OptimizerKind::Muon | OptimizerKind::Scion => vec![(Grad, z()), (Momentum, z())],
            OptimizerKind::Psgd => vec![
                (Grad, z()),
                (LeftPrecond, Matrix::identity(m)),
                (RightPrecond, Matrix::identity(n)),
            ],
            OptimizerKind::Shampoo => vec![
                (Grad, z()),
                (Moment1, z()),
                (Moment2, z()),
                (LeftStat, Matrix::zeros(m, m)),
                (RightStat, Matrix::zeros(n, n)),
                (LeftRoot, Matrix::identity(m)),
                (RightRoot, Matrix::identity(n)),
            ],
            OptimizerKind::Soap => vec![
                (Grad, z()),
                (Moment1, z()),
                (Moment2, z()),
                (LeftStat, Matrix::zeros(m, m)),
                (RightStat, Matrix::zeros(n, n)),
                (LeftBasis, Matrix::identity(m)),
                (RightBasis, Matrix::identity(n)),
            ],
        };
        Self {
            kind,
            shape: (m, n),
            step: 0,
            buffers,
            frozen_bases: false,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Floats held, excluding Shampoo's inverse roots.
    pub fn state_elements(&self) -> usize {
        self.buffers.iter().filter(|(b, _)| !b.is_root()).map(|(_, m)| m.len()).sum()
    }

    /// Floats held in Shampoo's inverse roots.
    pub fn eigenbasis_elements(&self) -> usize {
        self.buffers.iter().filter(|(b, _)| b.is_root()).map(|(_, m)| m.len()).sum()
    }

    pub fn buffer(&self, which: Buffer) -> Option<&Matrix> {
        self.buffers.iter().find(|(b, _)| *b == which).map(|(_, m)| m)
    }

    fn buf(&mut self, which: Buffer) -> &mut Matrix {
        &mut self
            .buffers
            .iter_mut()
            .find(|(b, _)| *b == which)
            .expect("buffer allocated for this kind")
            .1
    }

    fn take(&mut self, which: Buffer) -> Matrix {
        std::mem::replace(self.buf(which), Matrix::zeros(0, 0))
    }

    fn put(&mut self, which: Buffer, m: Matrix) {
        *self.buf(which) = m;
    }

    /// Pins SOAP's eigenbases to the identity for the rest of the run,
    /// which turns SOAP into AdamW.
    pub fn freeze_identity_bases(&mut self) {
        let (m, n) = self.shape;
        if self.kind == OptimizerKind::Soap {
            self.put(Buffer::LeftBasis, Matrix::identity(m));
            self.put(Buffer::RightBasis, Matrix::identity(n));
            self.frozen_bases = true;
        }
    }

    pub fn ensure_finite(&self) -> Result<()> {
        for (b, m) in &self.buffers {
            if !m.is_finite() {
                return Err(Error::NonFinite(format!("optimizer buffer {b:?}")));
            }
        }
        Ok(())
    }

    fn refresh_due(&self, cfg: &OptimizerConfig) -> bool {
        (self.step - 1) % cfg.precond_update_freq as u64 == 0
    }
}

/// `T` iterations of `X ← aX + b(XXᵀ)X + c(XXᵀ)²X`. The caller scales `x`
/// so its top singular value is at most 1. A zero matrix is returned as is.
pub fn newton_schulz(x: &Matrix, iters: usize, coeffs: [f64; 3]) -> Result<Matrix> {
    if x.data().iter().all(|&v| v == 0.0) {
        return Ok(x.clone());
    }
    let [a, b, c] = coeffs;
    // iterate on the wide orientation so XXᵀ is the smaller Gram matrix
    let tall = x.rows() > x.cols();
    let mut xm = if tall { x.transpose() } else { x.clone() };
    for _ in 0..iters {
        let gram = xm.matmul_t(&xm)?;
        let gx = gram.matmul(&xm)?;
        let mut next = xm.scale(a);
        next.axpy(b, &gx)?;
        if c != 0.0 {
            let ggx = gram.matmul(&gx)?;
            next.axpy(c, &ggx)?;
        }
        xm = next;
    }
    Ok(if tall { xm.transpose() } else { xm })
}

/// `x / σ_max(x)` followed by Newton–Schulz.
pub fn orthogonalize(x: &Matrix, iters: usize, coeffs: [f64; 3]) -> Result<Matrix> {
    let s = spectral_norm(x)?;
    if s == 0.0 {
        return Ok(x.clone());
    }
    newton_schulz(&x.scale(1.0 / s), iters, coeffs)
}

fn adam_direction(m: &Matrix, v: &Matrix, cfg: &OptimizerConfig, t: u64) -> Matrix {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    m.zip_map(v, |mi, vi| (mi / bc1) / ((vi / bc2).sqrt() + cfg.epsilon))
        .expect("same shape")
}

fn ema(acc: &mut Matrix, x: &Matrix, beta: f64) {
    for (a, v) in acc.data_mut().iter_mut().zip(x.data()) {
        *a = beta * *a + (1.0 - beta) * v;
    }
}

fn ema_sq(acc: &mut Matrix, x: &Matrix, beta: f64) {
    for (a, v) in acc.data_mut().iter_mut().zip(x.data()) {
        *a = beta * *a + (1.0 - beta) * v * v;
    }
}

/// `(A + δI)^p` on the eigenvalues, with non-positive eigenvalues mapped to
/// zero (pseudo-inverse for negative powers).
fn damped_power(a: &Matrix, damping: f64, p: f64) -> Result<Matrix> {
    sym_matrix_power(a, |l| {
        let l = l + damping;
        if l > 0.0 {
            l.powf(p)
        } else {
            0.0
        }
    })
}

/// Inverse square root of a covariance damped by `δ + ρ·mean(λ)`.
fn whitening_root(c: &Matrix, cfg: &OptimizerConfig) -> Result<Matrix> {
    let mean = (0..c.rows()).map(|i| c[(i, i)]).sum::<f64>() / c.rows() as f64;
    damped_power(c, cfg.damping + cfg.precond_rel_damping * mean.max(0.0), -0.5)
}

/// Symmetrized and scaled to spectral norm 1 (the largest eigenvalue of
/// an SPD factor), so only the shape of the whitening is fitted.
fn unit_spectral(mut p: Matrix) -> Result<Matrix> {
    p.symmetrize();
    let top = sym_eigen(&p)?.values.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    Ok(if top > 0.0 { p.scale(1.0 / top) } else { p })
}

/// Shampoo's preconditioned direction `L^(−1/4) G R^(−1/4)` given roots.
pub fn shampoo_direction(left_root: &Matrix, g: &Matrix, right_root: &Matrix) -> Result<Matrix> {
    left_root.matmul(g)?.matmul(right_root)
}

/// Applies one update in place. `w` and `g` must have the state's shape.
pub fn step(cfg: &OptimizerConfig, state: &mut OptimizerState, w: &mut Matrix, g: &Matrix) -> Result<()> {
    if cfg.kind != state.kind {
        return Err(Error::Config(format!(
            "config is {} but state is {}",
            cfg.kind.name(),
            state.kind.name()
        )));
    }
    if w.shape() != state.shape || g.shape() != state.shape {
        return Err(Error::Shape(format!(
            "weight {:?}, gradient {:?}, state {:?}",
            w.shape(),
            g.shape(),
            state.shape
        )));
    }
    g.ensure_finite("gradient")?;
    state.ensure_finite()?;
    state.step += 1;
    let t = state.step;
    state.buf(Buffer::Grad).data_mut().copy_from_slice(g.data());
    let (m, n) = state.shape;

    let update = match cfg.kind {
        OptimizerKind::Adamw => {
            ema(state.buf(Buffer::Moment1), g, cfg.beta1);
            ema_sq(state.buf(Buffer::Moment2), g, cfg.beta2);
            adam_direction(state.buffer(Buffer::Moment1).unwrap(), state.buffer(Buffer::Moment2).unwrap(), cfg, t)
        }
        OptimizerKind::Muon => {
            let buf = state.buf(Buffer::Momentum);
            *buf = buf.scale(cfg.momentum);
            buf.add_assign(g)?;
            let dir = if cfg.nesterov {
                let mut d = g.clone();
                d.axpy(cfg.momentum, buf)?;
                d
            } else {
                buf.clone()
            };
            let scale = (m.max(n) as f64 / m.min(n) as f64).sqrt();
            orthogonalize(&dir, cfg.ns_iters, cfg.ns_coefficients)?.scale(scale)
        }
        OptimizerKind::Scion => {
            ema(state.buf(Buffer::Momentum), g, cfg.momentum);
            let dir = state.buffer(Buffer::Momentum).unwrap();
            let scale = (m as f64 / n as f64).sqrt();
            orthogonalize(dir, cfg.ns_iters, cfg.ns_coefficients)?.scale(scale)
        }
        OptimizerKind::Psgd => {
            if state.refresh_due(cfg) {
                let pl = state.take(Buffer::LeftPrecond);
                let pr = state.take(Buffer::RightPrecond);
                let b = cfg.precond_beta;
                // whitening targets: P_L G P_R² Gᵀ P_L ≈ I and its transpose
                let gr = g.matmul(&pr)?;
                let left_cov = gr.matmul_t(&gr)?.scale(1.0 / n as f64);
                let mut new_l = pl.scale(1.0 - b);
                new_l.axpy(b, &whitening_root(&left_cov, cfg)?)?;
                let new_l = unit_spectral(new_l)?;
                let lg = new_l.matmul(g)?;
                let right_cov = lg.t_matmul(&lg)?.scale(1.0 / m as f64);
                let mut new_r = pr.scale(1.0 - b);
                new_r.axpy(b, &whitening_root(&right_cov, cfg)?)?;
                let new_r = unit_spectral(new_r)?;
                state.put(Buffer::LeftPrecond, new_l);
                state.put(Buffer::RightPrecond, new_r);
            }
            let pl = state.buffer(Buffer::LeftPrecond).unwrap();
            let pr = state.buffer(Buffer::RightPrecond).unwrap();
            pl.matmul(g)?.matmul(pr)?
        }
        OptimizerKind::Shampoo => {
            accumulate_stats(state, g)?;
            if state.refresh_due(cfg) {
                let l = damped_power(state.buffer(Buffer::LeftStat).unwrap(), cfg.damping, -0.25)?;
                let r = damped_power(state.buffer(Buffer::RightStat).unwrap(), cfg.damping, -0.25)?;
                state.put(Buffer::LeftRoot, l);
                state.put(Buffer::RightRoot, r);
            }
            ema(state.buf(Buffer::Moment1), g, cfg.beta1);
            ema_sq(state.buf(Buffer::Moment2), g, cfg.beta2);
            let adam = adam_direction(state.buffer(Buffer::Moment1).unwrap(), state.buffer(Buffer::Moment2).unwrap(), cfg, t);
            let dir = shampoo_direction(
                state.buffer(Buffer::LeftRoot).unwrap(),
                g,
                state.buffer(Buffer::RightRoot).unwrap(),
            )?;
            // layer-wise grafting: Shampoo direction, Adam step size
            let dn = dir.frobenius_norm();
            if dn > 0.0 {
                dir.scale(adam.frobenius_norm() / dn)
            } else {
                dir
            }
        }
        OptimizerKind::Soap => {
            accumulate_stats(state, g)?;
            if state.refresh_due(cfg) && !state.frozen_bases {
                let ql = sym_eigen(state.buffer(Buffer::LeftStat).unwrap())?.vectors;
                let qr = sym_eigen(state.buffer(Buffer::RightStat).unwrap())?.vectors;
                state.put(Buffer::LeftBasis, ql);
                state.put(Buffer::RightBasis, qr);
            }
            let ql = state.buffer(Buffer::LeftBasis).unwrap().clone();
            let qr = state.buffer(Buffer::RightBasis).unwrap().clone();
            ema(state.buf(Buffer::Moment1), g, cfg.beta1);
            let g_rot = ql.t_matmul(g)?.matmul(&qr)?;
            ema_sq(state.buf(Buffer::Moment2), &g_rot, cfg.beta2);
            let m_rot = ql.t_matmul(state.buffer(Buffer::Moment1).unwrap())?.matmul(&qr)?;
            let n_rot = adam_direction(&m_rot, state.buffer(Buffer::Moment2).unwrap(), cfg, t);
            ql.matmul(&n_rot)?.matmul_t(&qr)?
        }
    };
    if cfg.weight_decay != 0.0 {
        let decay = 1.0 - cfg.lr * cfg.weight_decay;
        w.data_mut().iter_mut().for_each(|v| *v *= decay);
    }
    w.axpy(-cfg.lr, &update)?;
    state.ensure_finite()?;
    w.ensure_finite("weights after update")
}

fn accumulate_stats(state: &mut OptimizerState, g: &Matrix) -> Result<()> {
    let ggt = g.matmul_t(g)?;
    let gtg = g.t_matmul(g)?;
    let l = state.buf(Buffer::LeftStat);
    l.add_assign(&ggt)?;
    l.symmetrize();
    let r = state.buf(Buffer::RightStat);
    r.add_assign(&gtg)?;
    r.symmetrize();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Rng;
    use proptest::prelude::*;

    fn svals(x: &Matrix) -> Vec<f64> {
        nalgebra::DMatrix::from_row_slice(x.rows(), x.cols(), x.data())
            .singular_values()
            .iter()
            .copied()
            .collect()
    }

    #[test]
    fn adamw_zero_gradient_decays() {
        let mut cfg = OptimizerConfig::new(OptimizerKind::Adamw, 0.1);
        cfg.weight_decay = 0.1;
        let mut st = OptimizerState::new(OptimizerKind::Adamw, 1, 1);
        let mut w = Matrix::from_rows(&[[1.0]]).unwrap();
        step(&cfg, &mut st, &mut w, &Matrix::zeros(1, 1)).unwrap();
        assert!((w[(0, 0)] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn cubic_ns_fixed_point_on_orthonormal_rows() {
        let mut rng = Rng::new(3);
        let a = rng.normal_matrix(6, 6, 1.0);
        let q = crate::linalg::sym_eigen(&a.t_matmul(&a).unwrap()).unwrap().vectors;
        let x = q.columns(0, 4).transpose(); // 4×6, orthonormal rows
        for t in [1, 3, 10] {
            let y = newton_schulz(&x, t, CUBIC_NS).unwrap();
            assert!(y.sub(&x).unwrap().max_abs() < 1e-10);
        }
    }

    #[test]
    fn cubic_ns_scalar_oracle() {
        let x = Matrix::from_diag(&[0.5, 0.5]);
        let y = newton_schulz(&x, 10, CUBIC_NS).unwrap();
        let mut s = 0.5f64;
        for _ in 0..10 {
            s = 1.5 * s - 0.5 * s * s * s;
        }
        for v in svals(&y) {
            assert!((v - s).abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    /// Extremes of `f(s) = as + bs³ + cs⁵` at its interior critical points,
    /// which bound every iterate once it enters the band.
    fn quintic_band() -> (f64, f64) {
        let [a, b, c] = QUINTIC_NS;
        let f = |s: f64| a * s + b * s.powi(3) + c * s.powi(5);
        // f'(s) = a + 3b s² + 5c s⁴
        let disc = (9.0 * b * b - 20.0 * a * c).sqrt();
        let s_lo = ((-3.0 * b - disc) / (10.0 * c)).sqrt();
        let s_hi = ((-3.0 * b + disc) / (10.0 * c)).sqrt();
        (f(s_hi), f(s_lo))
    }

    #[test]
    fn quintic_ns_band() {
        let (lo, hi) = quintic_band();
        assert!((lo - 0.682).abs() < 1e-3 && (hi - 1.2025).abs() < 1e-3, "{lo} {hi}");
        let mut rng = Rng::new(8);
        for _ in 0..20 {
            let x = rng.normal_matrix(4, 6, 1.0);
            let y = newton_schulz(&x.scale(1.0 / x.frobenius_norm()), 5, QUINTIC_NS).unwrap();
            for s in svals(&y) {
                assert!(s >= lo - 1e-12 && s <= hi + 1e-12, "{s}");
            }
        }
        assert_eq!(newton_schulz(&Matrix::zeros(2, 3), 5, QUINTIC_NS).unwrap(), Matrix::zeros(2, 3));
    }

    #[test]
    fn muon_orthogonal_momentum_fixed_point() {
        let mut rng = Rng::new(4);
        let a = rng.normal_matrix(5, 5, 1.0);
        let q = crate::linalg::sym_eigen(&a.t_matmul(&a).unwrap()).unwrap().vectors;
        let o = orthogonalize(&q, 7, CUBIC_NS).unwrap();
        assert!(o.sub(&q).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn shampoo_scalar_sign() {
        for g in [0.37, -2.5] {
            let mut cfg = OptimizerConfig::new(OptimizerKind::Shampoo, 1.0);
            cfg.precond_update_freq = 1;
            cfg.damping = 0.0;
            let mut st = OptimizerState::new(OptimizerKind::Shampoo, 1, 1);
            let gm = Matrix::from_rows(&[[g]]).unwrap();
            let mut w = Matrix::zeros(1, 1);
            step(&cfg, &mut st, &mut w, &gm).unwrap();
            let dir = shampoo_direction(
                st.buffer(Buffer::LeftRoot).unwrap(),
                &gm,
                st.buffer(Buffer::RightRoot).unwrap(),
            )
            .unwrap();
            // g / ((g²)^(1/4) (g²)^(1/4))
            assert!((dir[(0, 0)] - g.signum()).abs() < 1e-12);
            assert!((w[(0, 0)] + g.signum()).abs() < 1e-7);
        }
    }

    #[test]
    fn soap_with_identity_bases_is_adamw() {
        let mut rng = Rng::new(6);
        let mut soap = OptimizerConfig::new(OptimizerKind::Soap, 0.01);
        soap.weight_decay = 0.05;
        let adam = soap.as_adamw();
        let mut s1 = OptimizerState::new(OptimizerKind::Soap, 3, 4);
        s1.freeze_identity_bases();
        let mut s2 = OptimizerState::new(OptimizerKind::Adamw, 3, 4);
        let mut w1 = rng.normal_matrix(3, 4, 1.0);
        let mut w2 = w1.clone();
        for k in 0..12 {
            let g = rng.normal_matrix(3, 4, 1.0);
            step(&soap, &mut s1, &mut w1, &g).unwrap();
            step(&adam, &mut s2, &mut w2, &g).unwrap();
            assert_eq!(w1, w2, "step {k}");
        }
    }

    #[test]
    fn table5_examples() {
        assert_eq!(state_memory_elements(OptimizerKind::Adamw, 4, 8), 96);
        assert_eq!(state_memory_elements(OptimizerKind::Muon, 4, 8), 64);
        assert_eq!(state_memory_elements(OptimizerKind::Soap, 4, 8), 256);
    }

    #[test]
    fn rejects_bad_input() {
        let cfg = OptimizerConfig::new(OptimizerKind::Muon, 0.1);
        let mut st = OptimizerState::new(OptimizerKind::Muon, 2, 2);
        let mut w = Matrix::zeros(2, 2);
        let nan = Matrix::from_rows(&[[f64::NAN, 0.0], [0.0, 0.0]]).unwrap();
        assert!(step(&cfg, &mut st, &mut w, &nan).is_err());
        assert!(step(&cfg, &mut st, &mut w, &Matrix::zeros(2, 3)).is_err());
        let adam = OptimizerConfig::new(OptimizerKind::Adamw, 0.1);
        assert!(step(&adam, &mut st, &mut w, &Matrix::zeros(2, 2)).is_err());
        let mut bad = cfg.clone();
        bad.beta1 = 1.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_json_defaults() {
        let c: OptimizerConfig = serde_json::from_str(r#"{"kind":"soap","lr":0.003}"#).unwrap();
        assert_eq!(c, OptimizerConfig::new(OptimizerKind::Soap, 0.003));
        assert!(serde_json::from_str::<OptimizerConfig>(r#"{"kind":"lion","lr":1}"#).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn live_allocation_matches_table(m in 1usize..12, n in 1usize..12) {
            for kind in OptimizerKind::ALL {
                let mut st = OptimizerState::new(kind, m, n);
                prop_assert_eq!(st.state_elements(), state_memory_elements(kind, m, n));
                prop_assert_eq!(st.eigenbasis_elements(), eigenbasis_memory_elements(kind, m, n));
                let cfg = OptimizerConfig::new(kind, 0.01);
                let mut rng = Rng::new((m * 31 + n) as u64);
                let mut w = rng.normal_matrix(m, n, 1.0);
                for _ in 0..3 {
                    let g = rng.normal_matrix(m, n, 1.0);
                    step(&cfg, &mut st, &mut w, &g).unwrap();
                }
                prop_assert_eq!(st.state_elements(), state_memory_elements(kind, m, n));
            }
        }

        #[test]
        fn preconditioners_stay_psd(seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            for kind in [OptimizerKind::Shampoo, OptimizerKind::Soap] {
                let mut cfg = OptimizerConfig::new(kind, 0.01);
                cfg.precond_update_freq = 2;
                let mut st = OptimizerState::new(kind, 4, 3);
                let mut w = rng.normal_matrix(4, 3, 1.0);
                for _ in 0..5 {
                    let g = rng.normal_matrix(4, 3, 1.0);
                    step(&cfg, &mut st, &mut w, &g).unwrap();
                }
                for b in [Buffer::LeftStat, Buffer::RightStat] {
                    let s = st.buffer(b).unwrap();
                    prop_assert_eq!(s, &s.transpose());
                    for l in sym_eigen(s).unwrap().values {
                        prop_assert!(l >= -1e-10);
                    }
                }
            }
        }

        #[test]
        fn cubic_ns_monotone_toward_one(s in 0.01f64..1.0) {
            let x = Matrix::from_diag(&[s]);
            let y = newton_schulz(&x, 1, CUBIC_NS).unwrap()[(0, 0)];
            prop_assert!(y >= s && y <= 1.0 + 1e-15);
        }
    }
}
