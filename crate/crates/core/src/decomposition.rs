//! Per-module split of the relative activation error into accumulated
//! (`A`), introduced (`B`) and interaction (`C`) terms, plus gain
//! diagnostics.
//!
//! With `Δh = hq − h` at module `ℓ`,
//!
//! ```text
//! a = ½[(fq(hq) − fq(h)) + (f(hq) − f(h))]
//! b = ½[(fq(hq) − f(hq)) + (fq(h) − f(h))]
//! A = ‖a‖²/‖h‖²   B = ‖b‖²/‖h‖²   C = 2⟨a,b⟩/‖h‖²   R = A + B + C
//! ```
//!
//! per token (row). The gain of a module is `G = A_ℓ / R_{ℓ−1}`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{angle_cos_with_norm, dot, norm, spectral_norm, sum_sq, Matrix};
use crate::metrics::MetricReport;
use crate::network::{forward_dual, DualTrace, ModuleKind, NetworkSpec};
use crate::quant::QuantConfig;

/// `(a, b)` for module `ℓ ≥ 1` of a trace.
pub fn ab_split(trace: &DualTrace, l: usize) -> Result<(Matrix, Matrix)> {
    if l == 0 || l > trace.len() {
        return Err(Error::Config(format!("module index {l} outside 1..={}", trace.len())));
    }
    let (fqq, fqh, fhq, fh) = (&trace.hq[l], &trace.fq_of_h[l], &trace.f_of_hq[l], &trace.h[l]);
    fqq.ensure_same_shape(fh, "dual trace")?;
    let a = Matrix::from_fn(fh.rows(), fh.cols(), |r, c| {
        0.5 * ((fqq[(r, c)] - fqh[(r, c)]) + (fhq[(r, c)] - fh[(r, c)]))
    });
    let b = Matrix::from_fn(fh.rows(), fh.cols(), |r, c| {
        0.5 * ((fqq[(r, c)] - fhq[(r, c)]) + (fqh[(r, c)] - fh[(r, c)]))
    });
    Ok((a, b))
}

/// Per-token terms. Tokens whose reference row is zero are flagged in
/// `excluded` and carry zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct AbcTerms {
    pub r: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    /// `‖a + b‖² / ‖h‖²`, computed without the law of cosines.
    pub r_direct: Vec<f64>,
    pub excluded: Vec<bool>,
}

impl AbcTerms {
    pub fn n_excluded(&self) -> usize {
        self.excluded.iter().filter(|&&e| e).count()
    }
}

pub fn abc_terms(a: &Matrix, b: &Matrix, h_ref: &Matrix) -> Result<AbcTerms> {
    a.ensure_same_shape(b, "b term")?;
    a.ensure_same_shape(h_ref, "reference activation")?;
    let n = a.rows();
    let mut t = AbcTerms {
        r: vec![0.0; n],
        a: vec![0.0; n],
        b: vec![0.0; n],
        c: vec![0.0; n],
        r_direct: vec![0.0; n],
        excluded: vec![false; n],
    };
    for i in 0..n {
        let hh = sum_sq(h_ref.row(i));
        if hh == 0.0 {
            t.excluded[i] = true;
            continue;
        }
        let (ar, br) = (a.row(i), b.row(i));
        t.a[i] = sum_sq(ar) / hh;
        t.b[i] = sum_sq(br) / hh;
        t.c[i] = 2.0 * dot(ar, br) / hh;
        t.r[i] = t.a[i] + t.b[i] + t.c[i];
        let s: Vec<f64> = ar.iter().zip(br).map(|(x, y)| x + y).collect();
        t.r_direct[i] = sum_sq(&s) / hh;
    }
    Ok(t)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stat {
    Mean,
    TruncatedMeanTop1pct,
}

impl Stat {
    pub fn label(self) -> &'static str {
        match self {
            Stat::Mean => "mean",
            Stat::TruncatedMeanTop1pct => "trunc",
        }
    }
}

/// Arithmetic mean, or the mean after dropping the `ceil(0.01·n)` largest
/// values (at least one value is always kept).
pub fn summarize(values: &[f64], stat: Stat) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Degenerate("cannot summarize an empty list".into()));
    }
    match stat {
        Stat::Mean => Ok(values.iter().sum::<f64>() / values.len() as f64),
        Stat::TruncatedMeanTop1pct => {
            let n = values.len();
            let drop = ((n as f64 * 0.01).ceil() as usize).min(n - 1);
            let mut v = values.to_vec();
            v.sort_by(f64::total_cmp);
            let kept = &v[..n - drop];
            Ok(kept.iter().sum::<f64>() / kept.len() as f64)
        }
    }
}

fn summarize_defined(values: impl Iterator<Item = Option<f64>>, stat: Stat) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    summarize(&v, stat).ok()
}

/// `G = A_ℓ / R_{ℓ−1}` per token; `None` where `R_{ℓ−1}` is zero or the
/// token is excluded. `records[k]` describes module `k + 1`; module 0 is
/// the input, where `R = 0`.
pub fn gain(records: &[DecompRecord], l: usize) -> Result<Vec<Option<f64>>> {
    if l == 0 {
        return Err(Error::Config("gain is undefined at module 0".into()));
    }
    let cur = records
        .get(l - 1)
        .ok_or_else(|| Error::Config(format!("no record for module {l}")))?;
    if l == 1 {
        return Ok(vec![None; cur.terms.a.len()]);
    }
    let prev = &records[l - 2];
    gain_from(&cur.terms, &prev.terms)
}

fn gain_from(cur: &AbcTerms, prev: &AbcTerms) -> Result<Vec<Option<f64>>> {
    if cur.a.len() != prev.r.len() {
        return Err(Error::Shape("token counts differ between modules".into()));
    }
    Ok((0..cur.a.len())
        .map(|i| {
            let rp = prev.r[i];
            (!cur.excluded[i] && !prev.excluded[i] && rp > 0.0).then(|| cur.a[i] / rp)
        })
        .collect())
}

/// `hq = (W + εW)·hq_prev + εh` per token (row), against `h = W·h_prev`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseModelLinear {
    pub w: Matrix,
    pub eps_w: Matrix,
    pub eps_h: Vec<f64>,
}

impl NoiseModelLinear {
    pub fn new(w: Matrix, eps_w: Matrix, eps_h: Vec<f64>) -> Result<Self> {
        w.ensure_same_shape(&eps_w, "weight noise")?;
        if eps_h.len() != w.rows() {
            return Err(Error::Shape(format!(
                "activation noise has {} entries, layer has {} outputs",
                eps_h.len(),
                w.rows()
            )));
        }
        Ok(Self { w, eps_w, eps_h })
    }

    pub fn f(&self, h: &Matrix) -> Result<Matrix> {
        h.matmul_t(&self.w)
    }

    pub fn fq(&self, h: &Matrix) -> Result<Matrix> {
        let mut y = h.matmul_t(&self.w.add(&self.eps_w)?)?;
        for r in 0..y.rows() {
            for (v, e) in y.row_mut(r).iter_mut().zip(&self.eps_h) {
                *v += e;
            }
        }
        Ok(y)
    }

    /// One-module dual trace for inputs `h_prev` and `hq_prev`.
    pub fn trace(&self, h_prev: &Matrix, hq_prev: &Matrix) -> Result<DualTrace> {
        h_prev.ensure_same_shape(hq_prev, "noisy input")?;
        Ok(DualTrace {
            h: vec![h_prev.clone(), self.f(h_prev)?],
            hq: vec![hq_prev.clone(), self.fq(hq_prev)?],
            fq_of_h: vec![h_prev.clone(), self.fq(h_prev)?],
            f_of_hq: vec![hq_prev.clone(), self.f(hq_prev)?],
            quantized_weights: vec![None, Some(self.w.add(&self.eps_w)?)],
        })
    }
}

/// Spectral ratio `G1`, alignment ratio `G2` and the two cosines.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GainFactors {
    pub g1: f64,
    pub g2: f64,
    pub cos_phi: f64,
    pub cos_psi: f64,
}

/// Spectral norms of `W` and `W + ½εW`, computed once per layer.
#[derive(Clone, Debug)]
struct LayerNorms {
    w: Matrix,
    half: Matrix,
    sigma_w: f64,
    sigma_half: f64,
}

impl LayerNorms {
    fn new(w: &Matrix, eps_w: &Matrix) -> Result<Self> {
        let half = w.zip_map(eps_w, |a, e| a + 0.5 * e)?;
        let sigma_w = spectral_norm(w)?;
        let sigma_half = spectral_norm(&half)?;
        if sigma_w == 0.0 || sigma_half == 0.0 {
            return Err(Error::Undefined("zero weight matrix in gain factorization".into()));
        }
        Ok(Self {
            w: w.clone(),
            half,
            sigma_w,
            sigma_half,
        })
    }

    fn factors(&self, delta_h: &[f64], h_prev: &[f64]) -> Result<GainFactors> {
        let g1 = (self.sigma_half / self.sigma_w).powi(2);
        let cos_phi = angle_cos_with_norm(&self.half, self.sigma_half, delta_h)?;
        let cos_psi = angle_cos_with_norm(&self.w, self.sigma_w, h_prev)?;
        if cos_psi == 0.0 {
            return Err(Error::Undefined("reference input lies in the null space of W".into()));
        }
        Ok(GainFactors {
            g1,
            g2: (cos_phi / cos_psi).powi(2),
            cos_phi,
            cos_psi,
        })
    }
}

/// Closed-form gain factors of a linear layer under the additive-noise
/// model. Exact: `G1·G2 = A_ℓ / R_{ℓ−1}` for that model.
pub fn gain_factorization(layer: &NoiseModelLinear, delta_h: &[f64], h_prev: &[f64]) -> Result<GainFactors> {
    if norm(delta_h) == 0.0 || norm(h_prev) == 0.0 {
        return Err(Error::Undefined("zero input to gain factorization".into()));
    }
    LayerNorms::new(&layer.w, &layer.eps_w)?.factors(delta_h, h_prev)
}

/// Formula-based diagnostics of a quantized linear module, per token.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearDiagnostics {
    pub g1: f64,
    pub g2: Vec<Option<f64>>,
    pub cos_phi: Vec<Option<f64>>,
    pub cos_psi: Vec<Option<f64>>,
    /// `|G − G1·G2|`; zero only under the additive-noise model.
    pub gain_gap: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecompRecord {
    /// 1-based module position.
    pub module_index: usize,
    pub module_kind: &'static str,
    pub quantized: bool,
    pub terms: AbcTerms,
    pub gain: Vec<Option<f64>>,
    pub linear: Option<LinearDiagnostics>,
    /// Row metrics of the reference output of this module.
    pub mmr: Option<f64>,
    pub kurtosis: Option<f64>,
}

/// One `(module, stat)` summary row; `None` marks an undefined value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub module_index: usize,
    pub module_kind: String,
    pub quantized: bool,
    pub stat: String,
    #[serde(rename = "R")]
    pub r: Option<f64>,
    #[serde(rename = "A")]
    pub a: Option<f64>,
    #[serde(rename = "B")]
    pub b: Option<f64>,
    #[serde(rename = "C")]
    pub c: Option<f64>,
    #[serde(rename = "G")]
    pub g: Option<f64>,
    #[serde(rename = "G1")]
    pub g1: Option<f64>,
    #[serde(rename = "G2")]
    pub g2: Option<f64>,
    pub cos_phi: Option<f64>,
    pub cos_psi: Option<f64>,
    pub n_tokens_excluded: usize,
    pub mmr: Option<f64>,
    pub kurtosis: Option<f64>,
    pub gain_gap: Option<f64>,
}

impl DecompRecord {
    fn kept(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(&self.terms.excluded)
            .filter(|(_, &e)| !e)
            .map(|(x, _)| *x)
            .collect()
    }

    pub fn summary(&self, stat: Stat) -> SummaryRow {
        let s = |v: &[f64]| summarize(&self.kept(v), stat).ok();
        let opt = |v: &[Option<f64>]| summarize_defined(v.iter().copied(), stat);
        let lin = self.linear.as_ref();
        SummaryRow {
            module_index: self.module_index,
            module_kind: self.module_kind.to_string(),
            quantized: self.quantized,
            stat: stat.label().to_string(),
            r: s(&self.terms.r),
            a: s(&self.terms.a),
            b: s(&self.terms.b),
            c: s(&self.terms.c),
            g: opt(&self.gain),
            g1: lin.map(|d| d.g1).filter(|v| v.is_finite()),
            g2: lin.and_then(|d| opt(&d.g2)),
            cos_phi: lin.and_then(|d| opt(&d.cos_phi)),
            cos_psi: lin.and_then(|d| opt(&d.cos_psi)),
            n_tokens_excluded: self.terms.n_excluded(),
            mmr: self.mmr,
            kurtosis: self.kurtosis,
            gain_gap: lin.and_then(|d| opt(&d.gain_gap)),
        }
    }

    /// True when no token has a defined gain.
    pub fn degenerate_gain(&self) -> bool {
        self.gain.iter().all(Option::is_none)
    }
}

/// Decomposes every module of `net` on input `x`.
pub fn decompose_network(net: &NetworkSpec, x: &Matrix, cfg: &QuantConfig) -> Result<Vec<DecompRecord>> {
    let trace = forward_dual(net, x, cfg)?;
    decompose_trace(net, &trace)
}

pub fn decompose_trace(net: &NetworkSpec, trace: &DualTrace) -> Result<Vec<DecompRecord>> {
    trace.validate()?;
    if trace.len() != net.len() {
        return Err(Error::Shape("trace length differs from network".into()));
    }
    let mut out: Vec<DecompRecord> = Vec::with_capacity(net.len());
    for l in 1..=net.len() {
        let m = &net.modules[l - 1];
        let (a, b) = ab_split(trace, l)?;
        let terms = abc_terms(&a, &b, &trace.h[l])?;
        let gain = match out.last() {
            Some(prev) => gain_from(&terms, &prev.terms)?,
            None => vec![None; terms.a.len()],
        };
        let linear = match (&m.kind, &trace.quantized_weights[l]) {
            (ModuleKind::Linear(w), Some(qw)) => Some(linear_diagnostics(w, qw, trace, l, &gain)?),
            _ => None,
        };
        let metrics = MetricReport::new(&trace.h[l]);
        out.push(DecompRecord {
            module_index: l,
            module_kind: m.kind.name(),
            quantized: m.quantize,
            terms,
            gain,
            linear,
            mmr: metrics.mmr_mean,
            kurtosis: metrics.kurtosis_mean,
        });
    }
    Ok(out)
}

fn linear_diagnostics(
    w: &Matrix,
    qw: &Matrix,
    trace: &DualTrace,
    l: usize,
    gain: &[Option<f64>],
) -> Result<LinearDiagnostics> {
    let eps = qw.sub(w)?;
    let norms = match LayerNorms::new(w, &eps) {
        Ok(n) => n,
        Err(Error::Undefined(_)) => {
            let n = gain.len();
            return Ok(LinearDiagnostics {
                g1: f64::NAN,
                g2: vec![None; n],
                cos_phi: vec![None; n],
                cos_psi: vec![None; n],
                gain_gap: vec![None; n],
            });
        }
        Err(e) => return Err(e),
    };
    let g1 = (norms.sigma_half / norms.sigma_w).powi(2);
    let h_prev = &trace.h[l - 1];
    let hq_prev = &trace.hq[l - 1];
    let n = h_prev.rows();
    let mut d = LinearDiagnostics {
        g1,
        g2: vec![None; n],
        cos_phi: vec![None; n],
        cos_psi: vec![None; n],
        gain_gap: vec![None; n],
    };
    for i in 0..n {
        let dh: Vec<f64> = hq_prev.row(i).iter().zip(h_prev.row(i)).map(|(q, h)| q - h).collect();
        match norms.factors(&dh, h_prev.row(i)) {
            Ok(f) => {
                d.g2[i] = Some(f.g2);
                d.cos_phi[i] = Some(f.cos_phi);
                d.cos_psi[i] = Some(f.cos_psi);
                d.gain_gap[i] = gain[i].map(|g| (g - f.g1 * f.g2).abs());
            }
            Err(Error::Undefined(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(d)
}

/// Summary rows for every record and each requested statistic.
pub fn summary_rows(records: &[DecompRecord], stats: &[Stat]) -> Vec<SummaryRow> {
    records
        .iter()
        .flat_map(|r| stats.iter().map(move |&s| r.summary(s)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Rng;
    use crate::network::{build_toy_mlp, build_toy_transformer, ModuleSpec};
    use proptest::prelude::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn unperturbed_split_is_zero() {
        let mut rng = Rng::new(1);
        let n = build_toy_mlp(1, 4, 3, &mut rng).unwrap();
        let x = rng.normal_matrix(3, 4, 1.0);
        let t = forward_dual(&n, &x, &QuantConfig::lossless(crate::quant::Scheme::AbsmaxRtn)).unwrap();
        for l in 1..=n.len() {
            let (a, b) = ab_split(&t, l).unwrap();
            assert!(a.data().iter().chain(b.data()).all(|&v| v == 0.0));
        }
        assert!(ab_split(&t, 0).is_err());
    }

    #[test]
    fn unquantized_module_has_zero_b() {
        let mut rng = Rng::new(2);
        let n = build_toy_mlp(1, 4, 3, &mut rng).unwrap();
        let x = rng.normal_matrix(3, 4, 1.0);
        let t = forward_dual(&n, &x, &QuantConfig::absmax(3)).unwrap();
        // module 4 is relu2, its input is perturbed by the quantized linear
        let (a, b) = ab_split(&t, 4).unwrap();
        assert!(b.data().iter().all(|&v| v == 0.0));
        assert_eq!(a, t.hq[4].sub(&t.h[4]).unwrap());
    }

    #[test]
    fn split_matches_direct_formula() {
        let mut rng = Rng::new(3);
        let w = rng.normal_matrix(5, 5, 0.5);
        let n = NetworkSpec::new(vec![ModuleSpec::new(ModuleKind::Linear(w.clone()), true)], 5, 4).unwrap();
        let x = rng.normal_matrix(4, 5, 0.3);
        let cfg = QuantConfig::absmax(4);
        let t = forward_dual(&n, &x, &cfg).unwrap();
        let (a, b) = ab_split(&t, 1).unwrap();
        let q = |m: &Matrix| crate::quant::quantize_rows(m, &cfg).unwrap().values;
        let qw = q(&w);
        let f = |h: &Matrix| h.matmul(&w.transpose()).unwrap();
        let fq = |h: &Matrix| q(h).matmul(&qw.transpose()).unwrap();
        let (h, hq) = (&x, &x);
        for r in 0..4 {
            for c in 0..5 {
                let want_a = 0.5 * ((fq(hq)[(r, c)] - fq(h)[(r, c)]) + (f(hq)[(r, c)] - f(h)[(r, c)]));
                let want_b = 0.5 * ((fq(hq)[(r, c)] - f(hq)[(r, c)]) + (fq(h)[(r, c)] - f(h)[(r, c)]));
                assert_eq!(a[(r, c)], want_a);
                assert_eq!(b[(r, c)], want_b);
                let dh = t.hq[1][(r, c)] - t.h[1][(r, c)];
                assert!((a[(r, c)] + b[(r, c)] - dh).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn abc_examples() {
        let h = Matrix::from_rows(&[[1.0, 2.0], [0.0, 0.0]]).unwrap();
        let z = Matrix::zeros(2, 2);
        let t = abc_terms(&z, &z, &h).unwrap();
        assert_eq!(t.r, vec![0.0, 0.0]);
        assert_eq!(t.excluded, vec![false, true]);

        let a = Matrix::from_rows(&[[0.3, -0.1], [1.0, 1.0]]).unwrap();
        let t = abc_terms(&a, &z, &h).unwrap();
        assert_eq!(t.c[0], 0.0);
        assert_eq!(t.r[0], t.a[0]);
        assert!((t.a[0] - 0.1 / 5.0).abs() < 1e-16);
    }

    #[test]
    fn law_of_cosines_matches_direct_norm() {
        let mut rng = Rng::new(4);
        for _ in 0..20 {
            let a = rng.normal_matrix(6, 9, 1.0);
            let b = rng.normal_matrix(6, 9, 1.0);
            let h = rng.normal_matrix(6, 9, 1.0);
            let t = abc_terms(&a, &b, &h).unwrap();
            for i in 0..6 {
                assert!(rel(t.r[i], t.r_direct[i]) <= 1e-10);
            }
        }
    }

    fn record_with(a: Vec<f64>, r: Vec<f64>) -> DecompRecord {
        let n = a.len();
        DecompRecord {
            module_index: 0,
            module_kind: "relu2",
            quantized: false,
            terms: AbcTerms {
                r: r.clone(),
                a,
                b: vec![0.0; n],
                c: vec![0.0; n],
                r_direct: r,
                excluded: vec![false; n],
            },
            gain: vec![None; n],
            linear: None,
            mmr: None,
            kurtosis: None,
        }
    }

    #[test]
    fn gain_examples() {
        let recs = vec![record_with(vec![0.5, 0.2, 0.0], vec![0.5, 0.2, 0.0]), record_with(vec![0.5, 0.0, 1.0], vec![0.5, 0.0, 1.0])];
        let g = gain(&recs, 2).unwrap();
        assert_eq!(g, vec![Some(1.0), Some(0.0), None]);
        assert!(gain(&recs, 0).is_err());
        assert_eq!(gain(&recs, 1).unwrap(), vec![None; 3]);

        let mut rng = Rng::new(5);
        let a: Vec<f64> = (0..50).map(|_| rng.uniform()).collect();
        let r: Vec<f64> = (0..50).map(|_| rng.uniform() + 0.01).collect();
        let recs = vec![record_with(r.clone(), r.clone()), record_with(a.clone(), a.clone())];
        for (i, g) in gain(&recs, 2).unwrap().into_iter().enumerate() {
            assert!((g.unwrap() * r[i] - a[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn gain_factorization_examples() {
        let w = Matrix::identity(2);
        let layer = NoiseModelLinear::new(w.clone(), Matrix::zeros(2, 2), vec![0.0, 0.0]).unwrap();
        let f = gain_factorization(&layer, &[0.3, 1.0], &[1.0, -2.0]).unwrap();
        assert!((f.g1 - 1.0).abs() < 1e-12);

        let layer = NoiseModelLinear::new(w, Matrix::from_diag(&[1.0, 0.0]), vec![0.0, 0.0]).unwrap();
        let f = gain_factorization(&layer, &[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((f.g1 - 2.25).abs() < 1e-9);
        assert!((f.cos_phi - 1.0).abs() < 1e-9);
        assert!((f.cos_psi - 1.0).abs() < 1e-12);
        assert!((f.g2 - 1.0).abs() < 1e-9);
        // measured A/R_prev on the corresponding trace
        let h_prev = Matrix::from_rows(&[[0.0, 1.0]]).unwrap();
        let hq_prev = Matrix::from_rows(&[[1.0, 1.0]]).unwrap();
        let t = layer.trace(&h_prev, &hq_prev).unwrap();
        let (a, b) = ab_split(&t, 1).unwrap();
        let terms = abc_terms(&a, &b, &t.h[1]).unwrap();
        let r_prev = 1.0; // ‖Δh‖²/‖h_prev‖²
        assert!((terms.a[0] / r_prev - 2.25).abs() < 1e-12);

        assert!(gain_factorization(&layer, &[0.0, 0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn summarize_examples() {
        assert_eq!(summarize(&[4.5], Stat::Mean).unwrap(), 4.5);
        let mut v = vec![1.0; 99];
        v.push(1000.0);
        assert_eq!(summarize(&v, Stat::TruncatedMeanTop1pct).unwrap(), 1.0);
        assert!(summarize(&[], Stat::Mean).is_err());
        assert_eq!(summarize(&[3.0], Stat::TruncatedMeanTop1pct).unwrap(), 3.0);

        let mut rng = Rng::new(8);
        for n in [7usize, 100, 101, 250] {
            let v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let mut s = v.clone();
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let k = (n + 99) / 100;
            let want = s[..n - k].iter().sum::<f64>() / (n - k) as f64;
            assert!((summarize(&v, Stat::TruncatedMeanTop1pct).unwrap() - want).abs() < 1e-14);
        }
    }

    #[test]
    fn lossless_network_is_degenerate() {
        let mut rng = Rng::new(9);
        let n = build_toy_transformer(1, 8, 2, 4, true, &mut rng).unwrap();
        let x = rng.normal_matrix(4, 8, 1.0);
        let recs = decompose_network(&n, &x, &QuantConfig::lossless(crate::quant::Scheme::Quest)).unwrap();
        for r in &recs {
            assert!(r.terms.r.iter().all(|&v| v == 0.0));
            assert!(r.degenerate_gain());
        }
    }

    #[test]
    fn downstream_of_single_quantized_layer() {
        let mut rng = Rng::new(10);
        let mut n = build_toy_mlp(2, 4, 3, &mut rng).unwrap();
        for m in n.modules.iter_mut().skip(3) {
            m.quantize = false;
        }
        let x = rng.normal_matrix(3, 4, 1.0);
        let recs = decompose_network(&n, &x, &QuantConfig::absmax(4)).unwrap();
        for r in &recs[3..] {
            assert!(r.terms.b.iter().chain(&r.terms.c).all(|&v| v == 0.0));
        }
    }

    #[test]
    fn end_to_end_norm_oracle() {
        let mut rng = Rng::new(7);
        let n = build_toy_transformer(4, 8, 2, 6, true, &mut rng).unwrap();
        let x = rng.normal_matrix(6, 8, 1.0);
        let cfg = QuantConfig::quest(4);
        let recs = decompose_network(&n, &x, &cfg).unwrap();
        let h = crate::network::forward_reference(&n, &x).unwrap().pop().unwrap();
        let hq = crate::network::forward_quantized(&n, &x, &cfg).unwrap();
        let last = recs.last().unwrap();
        for i in 0..6 {
            let d: Vec<f64> = hq.row(i).iter().zip(h.row(i)).map(|(a, b)| a - b).collect();
            let want = sum_sq(&d) / sum_sq(h.row(i));
            assert!(rel(last.terms.r[i], want) <= 1e-10, "{} vs {want}", last.terms.r[i]);
        }
    }

    #[test]
    fn summary_rows_and_linearity() {
        let mut rng = Rng::new(11);
        let n = build_toy_transformer(1, 8, 2, 5, false, &mut rng).unwrap();
        let x = rng.normal_matrix(5, 8, 1.0);
        let recs = decompose_network(&n, &x, &QuantConfig::absmax(3)).unwrap();
        let rows = summary_rows(&recs, &[Stat::Mean, Stat::TruncatedMeanTop1pct]);
        assert_eq!(rows.len(), 2 * n.len());
        for row in rows.iter().filter(|r| r.stat == "mean") {
            let (r, a, b, c) = (row.r.unwrap(), row.a.unwrap(), row.b.unwrap(), row.c.unwrap());
            assert!((r - (a + b + c)).abs() <= 1e-10 * r.abs().max(1e-12));
        }
        let lin = rows.iter().find(|r| r.module_kind == "linear").unwrap();
        assert!(lin.g1.is_some() && lin.cos_psi.is_some());
    }

    fn random_noise_layer(rng: &mut Rng, m: usize, k: usize) -> NoiseModelLinear {
        NoiseModelLinear::new(
            rng.normal_matrix(m, k, 1.0),
            rng.normal_matrix(m, k, 0.2),
            rng.normal_vec(m, 0.1),
        )
        .unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn abc_identity_and_signs(seed in 0u64..100_000, bits in prop::sample::select(vec![2u32, 3, 4, 8]), quest: bool) {
            let mut rng = Rng::new(seed);
            let depth = 1 + rng.below(3);
            let n = build_toy_transformer(depth, 8, 2, 4, true, &mut rng).unwrap();
            let x = rng.normal_matrix(4, 8, 1.0);
            let cfg = if quest { QuantConfig::quest(bits) } else { QuantConfig::absmax(bits) };
            let t = forward_dual(&n, &x, &cfg).unwrap();
            let recs = decompose_trace(&n, &t).unwrap();
            for (l, rec) in recs.iter().enumerate() {
                let tm = &rec.terms;
                for i in 0..tm.r.len() {
                    prop_assert!((tm.r_direct[i] - tm.r[i]).abs() <= 1e-10 * tm.r_direct[i].max(1e-12));
                    prop_assert!(tm.a[i] >= 0.0 && tm.b[i] >= 0.0);
                    prop_assert!(tm.c[i].abs() <= 2.0 * (tm.a[i] * tm.b[i]).sqrt() * (1.0 + 1e-12) + 1e-300);
                }
                if !n.modules[l].quantize {
                    prop_assert!(tm.b.iter().chain(&tm.c).all(|&v| v == 0.0));
                }
                // both bracketings of the Shapley average reproduce Δh
                let (a, b) = ab_split(&t, l + 1).unwrap();
                let dh = t.hq[l + 1].sub(&t.h[l + 1]).unwrap();
                let path1 = t.f_of_hq[l + 1].sub(&t.h[l + 1]).unwrap().add(&t.hq[l + 1].sub(&t.f_of_hq[l + 1]).unwrap()).unwrap();
                let path2 = t.fq_of_h[l + 1].sub(&t.h[l + 1]).unwrap().add(&t.hq[l + 1].sub(&t.fq_of_h[l + 1]).unwrap()).unwrap();
                let ab = a.add(&b).unwrap();
                let scale = dh.max_abs().max(t.h[l + 1].max_abs()) + 1e-300;
                for k in 0..dh.len() {
                    prop_assert!((ab.data()[k] - dh.data()[k]).abs() <= 1e-12 * scale);
                    prop_assert!((path1.data()[k] - dh.data()[k]).abs() <= 1e-12 * scale);
                    prop_assert!((path2.data()[k] - dh.data()[k]).abs() <= 1e-12 * scale);
                }
            }
        }

        #[test]
        fn additive_noise_factorization_is_exact(seed in 0u64..100_000) {
            let mut rng = Rng::new(seed);
            let (m, k) = (2 + rng.below(8), 2 + rng.below(8));
            let layer = random_noise_layer(&mut rng, m, k);
            let h_prev = rng.normal_matrix(3, k, 1.0);
            let hq_prev = h_prev.add(&rng.normal_matrix(3, k, 0.1)).unwrap();
            let t = layer.trace(&h_prev, &hq_prev).unwrap();
            let (a, b) = ab_split(&t, 1).unwrap();
            let terms = abc_terms(&a, &b, &t.h[1]).unwrap();
            for i in 0..3 {
                let dh: Vec<f64> = hq_prev.row(i).iter().zip(h_prev.row(i)).map(|(q, h)| q - h).collect();
                let r_prev = sum_sq(&dh) / sum_sq(h_prev.row(i));
                let f = gain_factorization(&layer, &dh, h_prev.row(i)).unwrap();
                prop_assert!(rel(terms.a[i], f.g1 * f.g2 * r_prev) <= 1e-8);
            }
        }
    }
}
