//! Iso-compute scaling law `L = A′/(N·ρ)^α + E` with a parameter-efficiency
//! multiplier `ρ` for 4-bit training (`ρ = 1` in full precision), fitted
//! with a Huber loss on log residuals.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Huber transition on log-loss residuals.
pub const HUBER_DELTA: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Fp,
    W4a4,
}

/// One trained model: embedding-inclusive parameter count, training tokens
/// and final loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingPoint {
    pub optimizer: String,
    pub n_params: u64,
    pub tokens: u64,
    pub loss: f64,
    pub precision: Precision,
}

impl ScalingPoint {
    pub fn validate(&self) -> Result<()> {
        if self.n_params == 0 {
            return Err(Error::Parse(format!("{}: n_params must be at least 1", self.optimizer)));
        }
        if !(self.loss > 0.0 && self.loss.is_finite()) {
            return Err(Error::Parse(format!("{}: loss must be positive, got {}", self.optimizer, self.loss)));
        }
        Ok(())
    }
}

/// Leave-one-out standard deviations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamStd {
    pub a_prime: f64,
    pub alpha: f64,
    pub e_irreducible: f64,
    pub rho_4bit: Option<f64>,
    pub folds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub optimizer: String,
    pub a_prime: f64,
    pub alpha: f64,
    pub e_irreducible: f64,
    /// `None` when no 4-bit point was available.
    pub rho_4bit: Option<f64>,
    pub ci: Option<ParamStd>,
    /// `log L_pred − log L_obs`, in input order.
    pub residuals: Vec<f64>,
    pub objective: f64,
}

impl ScalingFit {
    pub fn rho(&self, precision: Precision) -> f64 {
        match precision {
            Precision::Fp => 1.0,
            Precision::W4a4 => self.rho_4bit.unwrap_or(1.0),
        }
    }
}

/// `A′/(N·ρ)^α + E` with `ρ = 1` for full precision.
pub fn predict(fit: &ScalingFit, n: f64, precision: Precision) -> f64 {
    law(fit.a_prime, fit.alpha, fit.e_irreducible, n * fit.rho(precision))
}

fn law(a: f64, alpha: f64, e: f64, n_eff: f64) -> f64 {
    a * n_eff.powf(-alpha) + e
}

/// `r²/2` for `|r| ≤ δ`, `δ(|r| − δ/2)` beyond.
pub fn huber(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    /// Shared `(A′, α, E)` and `ρ` fitted together on all points.
    #[default]
    Joint,
    /// `(A′, α, E)` on full-precision points, then `ρ` alone on 4-bit points.
    Sequential,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitOptions {
    pub mode: FitMode,
    pub delta: f64,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            mode: FitMode::Joint,
            delta: HUBER_DELTA,
            max_iter: 500,
        }
    }
}

/// Parameters in solver coordinates: `[ln A′, α, E, ρ]`.
type Theta = [f64; 4];

struct Problem<'a> {
    points: &'a [ScalingPoint],
    /// Which of the four coordinates move.
    free: [bool; 4],
    delta: f64,
}

const ALPHA_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1.5;
const RHO_MIN: f64 = 1e-3;

impl Problem<'_> {
    fn residual_jacobian(&self, t: &Theta) -> (Vec<f64>, Vec<[f64; 4]>) {
        let a = t[0].exp();
        let mut r = Vec::with_capacity(self.points.len());
        let mut j = Vec::with_capacity(self.points.len());
        for p in self.points {
            let rho = if p.precision == Precision::W4a4 { t[3] } else { 1.0 };
            let n_eff = p.n_params as f64 * rho;
            let u = a * n_eff.powf(-t[1]);
            let pred = u + t[2];
            r.push(pred.ln() - p.loss.ln());
            let d_rho = if p.precision == Precision::W4a4 {
                -t[1] * u / (rho * pred)
            } else {
                0.0
            };
            j.push([u / pred, -u * n_eff.ln() / pred, 1.0 / pred, d_rho]);
        }
        (r, j)
    }

    fn objective(&self, t: &Theta) -> f64 {
        let (r, _) = self.residual_jacobian(t);
        if r.iter().any(|v| !v.is_finite()) {
            return f64::INFINITY;
        }
        r.iter().map(|&v| huber(v, self.delta)).sum()
    }

    fn project(&self, mut t: Theta) -> Theta {
        t[1] = t[1].max(ALPHA_MIN);
        t[2] = t[2].max(0.0);
        t[3] = t[3].clamp(RHO_MIN, RHO_MAX);
        t
    }

    /// Levenberg–Marquardt on the Huber objective via iteratively
    /// reweighted least squares: residuals beyond `δ` get weight `δ/|r|`.
    fn solve(&self, start: Theta, max_iter: usize) -> (Theta, f64) {
        let idx: Vec<usize> = (0..4).filter(|&k| self.free[k]).collect();
        let k = idx.len();
        let mut t = self.project(start);
        let mut f = self.objective(&t);
        let mut lambda = 1e-3;
        for _ in 0..max_iter {
            let (r, j) = self.residual_jacobian(&t);
            let mut jtj = DMatrix::<f64>::zeros(k, k);
            let mut jtr = DVector::<f64>::zeros(k);
            for (ri, ji) in r.iter().zip(&j) {
                let w = if ri.abs() <= self.delta { 1.0 } else { self.delta / ri.abs() };
                for (a, &ia) in idx.iter().enumerate() {
                    jtr[a] += w * ji[ia] * ri;
                    for (b, &ib) in idx.iter().enumerate() {
                        jtj[(a, b)] += w * ji[ia] * ji[ib];
                    }
                }
            }
            let mut improved = false;
            while lambda < 1e16 {
                let mut m = jtj.clone();
                for a in 0..k {
                    m[(a, a)] += lambda * jtj[(a, a)].max(1e-12);
                }
                let Some(step) = m.lu().solve(&(-&jtr)) else {
                    lambda *= 4.0;
                    continue;
                };
                let mut cand = t;
                for (a, &ia) in idx.iter().enumerate() {
                    cand[ia] += step[a];
                }
                let cand = self.project(cand);
                let fc = self.objective(&cand);
                if fc < f {
                    let done = f - fc <= 1e-15 * f.max(1e-300);
                    t = cand;
                    f = fc;
                    lambda = (lambda / 3.0).max(1e-12);
                    improved = !done;
                    break;
                }
                lambda *= 4.0;
            }
            if !improved {
                break;
            }
        }
        (t, f)
    }
}

fn check_points(points: &[ScalingPoint]) -> Result<()> {
    for p in points {
        p.validate()?;
    }
    if points.len() < 4 {
        return Err(Error::Degenerate(format!("need at least 4 points, got {}", points.len())));
    }
    let n0 = points[0].n_params;
    if points.iter().all(|p| p.n_params == n0) {
        return Err(Error::Degenerate("all points share one model size".into()));
    }
    if !points.iter().any(|p| p.precision == Precision::Fp) {
        return Err(Error::Degenerate("need at least one full-precision point".into()));
    }
    Ok(())
}

/// Deterministic multi-start grid: `α ∈ {0.1, …, 0.5}`,
/// `E ∈ {0.5, 0.8, 1.0}·min L`, `ρ ∈ {0.7, 0.85, 1.0}`, with `A′` solved
/// from the first point.
pub fn start_grid(points: &[ScalingPoint], fit_rho: bool) -> Vec<[f64; 4]> {
    let min_l = points.iter().map(|p| p.loss).fold(f64::INFINITY, f64::min);
    let rhos: &[f64] = if fit_rho { &[0.7, 0.85, 1.0] } else { &[1.0] };
    let p0 = &points[0];
    let mut out = Vec::new();
    for alpha in [0.1, 0.2, 0.3, 0.4, 0.5] {
        for ef in [0.5, 0.8, 1.0] {
            for &rho in rhos {
                let e = ef * min_l;
                let rho0 = if p0.precision == Precision::W4a4 { rho } else { 1.0 };
                let gap = (p0.loss - e).max(1e-6 * p0.loss);
                let a = gap * (p0.n_params as f64 * rho0).powf(alpha);
                out.push([a, alpha, e, rho]);
            }
        }
    }
    out
}

/// Robust fit of one optimizer's points. All points should share one
/// optimizer label; the label of the first is reported.
pub fn fit(points: &[ScalingPoint], opts: &FitOptions) -> Result<ScalingFit> {
    check_points(points)?;
    let has_q = points.iter().any(|p| p.precision == Precision::W4a4);
    let (theta, objective) = match opts.mode {
        FitMode::Joint => multi_start(points, has_q, opts)?,
        FitMode::Sequential => {
            let fp: Vec<ScalingPoint> = points.iter().filter(|p| p.precision == Precision::Fp).cloned().collect();
            if fp.len() < 3 || fp.iter().all(|p| p.n_params == fp[0].n_params) {
                return Err(Error::Degenerate("sequential fit needs 3 full-precision sizes".into()));
            }
            let (mut t, _) = multi_start(&fp, false, opts)?;
            if has_q {
                let prob = Problem {
                    points,
                    free: [false, false, false, true],
                    delta: opts.delta,
                };
                let mut best: Option<(Theta, f64)> = None;
                for rho in [0.7, 0.85, 1.0] {
                    t[3] = rho;
                    let (c, f) = prob.solve(t, opts.max_iter);
                    if best.is_none_or(|(_, bf)| f < bf) {
                        best = Some((c, f));
                    }
                }
                t = best.expect("three starts").0;
            }
            let all = Problem {
                points,
                free: [true; 4],
                delta: opts.delta,
            };
            (t, all.objective(&t))
        }
    };
    let prob = Problem {
        points,
        free: [true; 4],
        delta: opts.delta,
    };
    let (residuals, _) = prob.residual_jacobian(&theta);
    let fit = ScalingFit {
        optimizer: points[0].optimizer.clone(),
        a_prime: theta[0].exp(),
        alpha: theta[1],
        e_irreducible: theta[2],
        rho_4bit: has_q.then_some(theta[3]),
        ci: None,
        residuals,
        objective,
    };
    if !(fit.a_prime.is_finite() && objective.is_finite()) {
        return Err(Error::Numerical(format!("{}: fit did not converge", fit.optimizer)));
    }
    Ok(fit)
}

fn multi_start(points: &[ScalingPoint], fit_rho: bool, opts: &FitOptions) -> Result<(Theta, f64)> {
    let prob = Problem {
        points,
        free: [true, true, true, fit_rho],
        delta: opts.delta,
    };
    let mut best: Option<(Theta, f64)> = None;
    for [a, alpha, e, rho] in start_grid(points, fit_rho) {
        let (t, f) = prob.solve([a.ln(), alpha, e, rho], opts.max_iter);
        if best.is_none_or(|(_, bf)| f < bf) {
            best = Some((t, f));
        }
    }
    best.ok_or_else(|| Error::Numerical("empty start grid".into()))
}

/// Objective of `fit` on `points` (for checking against start values).
pub fn objective_at(points: &[ScalingPoint], a_prime: f64, alpha: f64, e: f64, rho: f64, delta: f64) -> f64 {
    Problem {
        points,
        free: [true; 4],
        delta,
    }
    .objective(&[a_prime.ln(), alpha, e, rho])
}

fn population_std(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt()
}

fn lowest(points: &[ScalingPoint], prec: Precision) -> Option<usize> {
    points
        .iter()
        .enumerate()
        .filter(|(_, p)| p.precision == prec)
        .min_by(|a, b| a.1.loss.total_cmp(&b.1.loss))
        .map(|(i, _)| i)
}

/// Leave-one-out standard deviations. The lowest-loss full-precision and
/// 4-bit points stay in every fold.
pub fn loo_confidence(points: &[ScalingPoint], opts: &FitOptions) -> Result<ParamStd> {
    check_points(points)?;
    let keep = [lowest(points, Precision::Fp), lowest(points, Precision::W4a4)];
    let folds: Vec<usize> = (0..points.len()).filter(|i| !keep.contains(&Some(*i))).collect();
    if folds.is_empty() {
        return Err(Error::Degenerate("no point can be left out".into()));
    }
    let fits: Vec<Result<ScalingFit>> = folds
        .par_iter()
        .map(|&i| {
            let sub: Vec<ScalingPoint> = points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, p)| p.clone())
                .collect();
            fit(&sub, opts)
        })
        .collect();
    let fits: Vec<ScalingFit> = fits.into_iter().collect::<Result<_>>()?;
    let col = |f: &dyn Fn(&ScalingFit) -> f64| population_std(&fits.iter().map(f).collect::<Vec<_>>());
    let rho_4bit = if fits.iter().all(|f| f.rho_4bit.is_some()) {
        Some(col(&|f| f.rho_4bit.unwrap()))
    } else {
        None
    };
    Ok(ParamStd {
        a_prime: col(&|f| f.a_prime),
        alpha: col(&|f| f.alpha),
        e_irreducible: col(&|f| f.e_irreducible),
        rho_4bit,
        folds: fits.len(),
    })
}

/// Fit plus leave-one-out spread; the spread is omitted when too few points
/// remain in some fold.
pub fn fit_with_ci(points: &[ScalingPoint], opts: &FitOptions) -> Result<ScalingFit> {
    let mut f = fit(points, opts)?;
    f.ci = match loo_confidence(points, opts) {
        Ok(ci) => Some(ci),
        Err(Error::Degenerate(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(f)
}

/// Groups points by optimizer label (in order of first appearance) and fits
/// each group with confidence spreads.
pub fn fit_all(points: &[ScalingPoint], opts: &FitOptions) -> Result<Vec<ScalingFit>> {
    if points.is_empty() {
        return Err(Error::Parse("no scaling points".into()));
    }
    let mut labels: Vec<&str> = Vec::new();
    for p in points {
        if !labels.contains(&p.optimizer.as_str()) {
            labels.push(&p.optimizer);
        }
    }
    labels
        .iter()
        .map(|l| {
            let group: Vec<ScalingPoint> = points.iter().filter(|p| p.optimizer == *l).cloned().collect();
            fit_with_ci(&group, opts)
        })
        .collect()
}

/// Reads `optimizer,n_params,tokens,loss,precision` rows.
pub fn parse_points_csv(text: &str) -> Result<Vec<ScalingPoint>> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let want = ["optimizer", "n_params", "tokens", "loss", "precision"];
    let headers = r.headers()?.clone();
    let mut got: Vec<&str> = headers.iter().collect();
    got.sort_unstable();
    let mut sorted = want;
    sorted.sort_unstable();
    if got != sorted {
        return Err(Error::Parse(format!("expected columns {want:?}, got {headers:?}")));
    }
    let points: Vec<ScalingPoint> = r
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Parse(e.to_string()))?;
    if points.is_empty() {
        return Err(Error::Parse("scaling CSV has no rows".into()));
    }
    for p in &points {
        p.validate()?;
    }
    Ok(points)
}

pub fn points_csv(points: &[ScalingPoint]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in points {
        w.serialize(p)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?).map_err(|e| Error::Parse(e.to_string()))
}

/// Exact parameter counts of the six model sizes (embeddings included, as
/// published).
pub const MODEL_SIZES: [u64; 6] = [
    49_748_760,
    121_813_686,
    225_335_892,
    477_024_972,
    729_974_655,
    1_489_423_554,
];

/// Training tokens per model size.
pub const MODEL_TOKENS: [u64; 6] = [
    1_000_000_000,
    2_000_000_000,
    6_000_000_000,
    10_000_000_000,
    14_000_000_000,
    30_000_000_000,
];

/// Final test losses per optimizer and size; `None` where no run exists.
/// Full precision (bfloat16 training).
pub const FP_LOSSES: [(&str, [Option<f64>; 6]); 6] = [
    ("AdamW", [Some(3.695), Some(3.318), Some(2.961), Some(2.834), Some(2.744), Some(2.627)]),
    ("Muon", [Some(3.632), Some(3.263), Some(2.915), Some(2.804), Some(2.719), Some(2.612)]),
    ("PSGD", [Some(3.615), Some(3.283), Some(2.978), Some(2.841), Some(2.799), None]),
    ("Scion", [Some(3.615), Some(3.269), Some(2.932), Some(2.805), Some(2.726), None]),
    ("Shampoo", [Some(3.648), Some(3.311), Some(2.959), Some(2.831), Some(2.741), Some(2.622)]),
    ("SOAP", [Some(3.589), Some(3.241), Some(2.916), Some(2.803), Some(2.754), None]),
];

/// W4A4 quantization-aware training.
pub const W4A4_LOSSES: [(&str, [Option<f64>; 6]); 6] = [
    ("AdamW", [Some(3.757), Some(3.375), Some(3.009), Some(2.905), Some(2.787), Some(2.655)]),
    ("Muon", [Some(3.698), Some(3.340), Some(2.971), Some(2.868), Some(2.765), Some(2.651)]),
    ("PSGD", [Some(3.696), Some(3.339), Some(3.19), Some(2.976), Some(2.844), None]),
    ("Scion", [Some(3.703), Some(3.335), Some(2.980), Some(2.850), Some(2.763), None]),
    ("Shampoo", [Some(3.735), Some(3.341), Some(2.999), Some(2.849), Some(2.782), Some(2.640)]),
    ("SOAP", [Some(3.682), Some(3.302), Some(2.981), Some(2.842), Some(2.797), None]),
];

/// Published coefficients `(A′, α, E, ρ_4bit)` with their leave-one-out
/// spreads `(±A′, ±α, ±E, ±ρ)`.
pub const PUBLISHED_FITS: [(&str, [f64; 4], [f64; 4]); 6] = [
    ("AdamW", [79.0, 0.20, 1.40, 0.863], [7.0, 0.01, 0.05, 0.003]),
    ("Muon", [208.0, 0.27, 1.85, 0.852], [40.0, 0.01, 0.04, 0.010]),
    ("PSGD", [77.0, 0.18, 1.39, 0.739], [6.0, 0.05, 0.44, 0.049]),
    ("Scion", [148.0, 0.25, 1.75, 0.856], [22.0, 0.01, 0.07, 0.010]),
    ("Shampoo", [142.0, 0.24, 1.72, 0.879], [26.0, 0.01, 0.09, 0.018]),
    ("SOAP", [706.0, 0.35, 2.22, 0.822], [132.0, 0.01, 0.03, 0.010]),
];

/// The bundled loss tables as points: per optimizer, full-precision points
/// by size, then 4-bit points by size.
pub fn bundled_paper_data() -> Vec<ScalingPoint> {
    let mut out = Vec::new();
    for ((label, fp), (_, q)) in FP_LOSSES.iter().zip(&W4A4_LOSSES) {
        for (losses, precision) in [(fp, Precision::Fp), (q, Precision::W4a4)] {
            for (i, l) in losses.iter().enumerate() {
                if let Some(loss) = l {
                    out.push(ScalingPoint {
                        optimizer: label.to_string(),
                        n_params: MODEL_SIZES[i],
                        tokens: MODEL_TOKENS[i],
                        loss: *loss,
                        precision,
                    });
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn synth(a: f64, alpha: f64, e: f64, rho: Option<f64>) -> Vec<ScalingPoint> {
        let mut out = Vec::new();
        for &n in &[1e7, 3e7, 1e8, 3e8, 1e9] {
            out.push(ScalingPoint {
                optimizer: "x".into(),
                n_params: n as u64,
                tokens: 20 * n as u64,
                loss: law(a, alpha, e, n),
                precision: Precision::Fp,
            });
            if let Some(r) = rho {
                out.push(ScalingPoint {
                    optimizer: "x".into(),
                    n_params: n as u64,
                    tokens: 20 * n as u64,
                    loss: law(a, alpha, e, n * r),
                    precision: Precision::W4a4,
                });
            }
        }
        out
    }

    fn fit_of(a: f64, alpha: f64, e: f64, rho: Option<f64>) -> ScalingFit {
        ScalingFit {
            optimizer: "x".into(),
            a_prime: a,
            alpha,
            e_irreducible: e,
            rho_4bit: rho,
            ci: None,
            residuals: vec![],
            objective: 0.0,
        }
    }

    #[test]
    fn predict_examples() {
        let f = fit_of(0.0, 0.3, 1.7, Some(0.8));
        for n in [1.0, 1e6, 1e12] {
            assert_eq!(predict(&f, n, Precision::W4a4), 1.7);
        }
        let n = 12345.0;
        assert_eq!(predict(&fit_of(n, 1.0, 0.0, None), n, Precision::Fp), 1.0);
    }

    #[test]
    fn published_adamw_prediction_matches_direct_evaluation() {
        let f = fit_of(79.0, 0.20, 1.40, Some(0.863));
        let n: f64 = 1_489_423_554.0;
        let direct = 79.0 * (-0.20 * n.ln()).exp() + 1.40;
        assert!((predict(&f, n, Precision::Fp) - direct).abs() < 1e-12);
        assert!((predict(&f, n / 0.863, Precision::W4a4) - direct).abs() < 1e-12);
    }

    #[test]
    #[ignore = "the rounded published coefficients give 2.557, 2.7% below the reported 2.627"]
    fn published_adamw_predicts_largest_model() {
        let f = fit_of(79.0, 0.20, 1.40, Some(0.863));
        let l = predict(&f, 1_489_423_554.0, Precision::Fp);
        assert!((l - 2.627).abs() / 2.627 < 0.02, "{l}");
    }

    #[test]
    fn huber_pieces() {
        let d = 1e-3;
        assert_eq!(huber(0.0, d), 0.0);
        assert!((huber(5e-4, d) - 1.25e-7).abs() < 1e-20);
        assert!((huber(-2e-3, d) - 1.5e-6).abs() < 1e-18);
        // continuity and matching slopes at ±δ
        for s in [1.0, -1.0] {
            let at = s * d;
            let eps = 1e-12;
            assert!((huber(at - s * eps, d) - huber(at + s * eps, d)).abs() < 1e-14);
            let left = (huber(at, d) - huber(at - s * 1e-9, d)) / 1e-9;
            let right = (huber(at + s * 1e-9, d) - huber(at, d)) / 1e-9;
            assert!((left - right).abs() < 1e-6, "{left} {right}");
        }
    }

    #[test]
    fn recovers_noiseless_fp_law() {
        let f = fit(&synth(100.0, 0.25, 1.5, None), &FitOptions::default()).unwrap();
        assert!((f.a_prime / 100.0 - 1.0).abs() < 1e-3, "{f:?}");
        assert!((f.alpha / 0.25 - 1.0).abs() < 1e-3);
        assert!((f.e_irreducible / 1.5 - 1.0).abs() < 1e-3);
        assert_eq!(f.rho_4bit, None);
    }

    #[test]
    fn recovers_planted_rho() {
        let f = fit(&synth(100.0, 0.25, 1.5, Some(0.8)), &FitOptions::default()).unwrap();
        assert!((f.rho_4bit.unwrap() - 0.8).abs() < 0.01, "{f:?}");
    }

    #[test]
    fn sequential_mode_recovers_planted_law() {
        let opts = FitOptions {
            mode: FitMode::Sequential,
            ..FitOptions::default()
        };
        let f = fit(&synth(100.0, 0.25, 1.5, Some(0.8)), &opts).unwrap();
        assert!((f.rho_4bit.unwrap() - 0.8).abs() < 0.01, "{f:?}");
        assert!((f.alpha - 0.25).abs() < 1e-3);
    }

    #[test]
    fn degenerate_inputs() {
        let mut pts = synth(100.0, 0.25, 1.5, None);
        for p in &mut pts {
            p.n_params = 1000;
        }
        assert!(matches!(fit(&pts, &FitOptions::default()), Err(Error::Degenerate(_))));
        assert!(fit(&synth(100.0, 0.25, 1.5, None)[..3], &FitOptions::default()).is_err());
    }

    #[test]
    fn bundled_data_shape() {
        let d = bundled_paper_data();
        let get = |o: &str, n: u64, p: Precision| {
            d.iter().find(|x| x.optimizer == o && x.n_params == n && x.precision == p).map(|x| x.loss)
        };
        assert_eq!(get("AdamW", MODEL_SIZES[0], Precision::Fp), Some(3.695));
        assert_eq!(get("Shampoo", MODEL_SIZES[5], Precision::W4a4), Some(2.640));
        let psgd: Vec<_> = d.iter().filter(|x| x.optimizer == "PSGD").collect();
        assert_eq!(psgd.iter().filter(|x| x.precision == Precision::Fp).count(), 5);
        assert_eq!(psgd.iter().filter(|x| x.precision == Precision::W4a4).count(), 5);
        assert!(psgd.iter().all(|x| x.n_params != MODEL_SIZES[5]));
        assert_eq!(d.len(), 2 * (6 * 3 + 5 * 3));
    }

    #[test]
    fn loo_of_duplicated_points_is_zero() {
        let base = synth(100.0, 0.25, 1.5, Some(0.8));
        let mut pts = base.clone();
        pts.extend(base);
        let ci = loo_confidence(&pts, &FitOptions::default()).unwrap();
        assert!(ci.rho_4bit.unwrap() < 1e-6, "{ci:?}");
        assert!(ci.alpha < 1e-6);
    }

    #[test]
    fn loo_spread_shrinks_with_noise() {
        let base = synth(100.0, 0.25, 1.5, Some(0.8));
        let mut spreads = Vec::new();
        for noise in [3e-2, 3e-3, 3e-4] {
            let pts: Vec<ScalingPoint> = base
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    // fixed ±1 pattern scaled by the noise level
                    let s = if (i * 7 + 3) % 5 < 2 { -1.0 } else { 1.0 };
                    ScalingPoint {
                        loss: p.loss * (1.0 + s * noise),
                        ..p.clone()
                    }
                })
                .collect();
            spreads.push(loo_confidence(&pts, &FitOptions::default()).unwrap().rho_4bit.unwrap());
        }
        assert!(spreads[0] > spreads[1] && spreads[1] > spreads[2], "{spreads:?}");
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let d = bundled_paper_data();
        let text = points_csv(&d).unwrap();
        assert!(text.starts_with("optimizer,n_params,tokens,loss,precision\n"));
        assert_eq!(parse_points_csv(&text).unwrap(), d);
        assert!(parse_points_csv("optimizer,n_params,tokens,loss,precision\n").is_err());
        assert!(parse_points_csv("").is_err());
        assert!(parse_points_csv("optimizer,n_params,tokens,loss,precision\na,0,1,2.0,fp\n").is_err());
        assert!(parse_points_csv("optimizer,n_params,tokens,loss,precision\na,10,1,-2.0,fp\n").is_err());
        assert!(parse_points_csv("optimizer,n_params,tokens,loss,precision\na,10,1,2.0,int8\n").is_err());
    }

    #[test]
    fn fit_all_groups_by_label() {
        let mut pts = synth(100.0, 0.25, 1.5, Some(0.8));
        pts.extend(synth(50.0, 0.2, 1.0, Some(0.9)).into_iter().map(|p| ScalingPoint {
            optimizer: "y".into(),
            ..p
        }));
        let fits = fit_all(&pts, &FitOptions::default()).unwrap();
        assert_eq!(fits.len(), 2);
        assert_eq!(fits[1].optimizer, "y");
        assert!(fits[1].ci.is_some());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn predict_decreases_in_n_and_rho(a in 0.1f64..1e3, alpha in 0.01f64..1.0, e in 0.0f64..3.0,
                                          n in 1.0f64..1e9, rho in 0.1f64..1.4) {
            let f = fit_of(a, alpha, e, Some(rho));
            let g = fit_of(a, alpha, e, Some(rho * 1.05));
            prop_assert!(predict(&f, n * 1.5, Precision::W4a4) < predict(&f, n, Precision::W4a4));
            prop_assert!(predict(&g, n, Precision::W4a4) < predict(&f, n, Precision::W4a4));
        }

        #[test]
        fn fit_never_worse_than_starts(seed in 0u64..50) {
            let mut rng = crate::linalg::Rng::new(seed);
            let pts: Vec<ScalingPoint> = synth(80.0, 0.2, 1.4, Some(0.86))
                .into_iter()
                .map(|p| ScalingPoint { loss: p.loss * (1.0 + 0.01 * rng.normal()), ..p })
                .collect();
            let f = fit(&pts, &FitOptions::default()).unwrap();
            for [a, alpha, e, rho] in start_grid(&pts, true) {
                prop_assert!(f.objective <= objective_at(&pts, a, alpha, e, rho, HUBER_DELTA) + 1e-15);
            }
        }

        #[test]
        fn scale_equivariance(k in 0.1f64..10.0) {
            let pts = synth(100.0, 0.25, 1.5, Some(0.8));
            let scaled: Vec<ScalingPoint> = pts.iter().map(|p| ScalingPoint {
                n_params: (p.n_params as f64 * k).round() as u64, ..p.clone()
            }).collect();
            let f = fit(&pts, &FitOptions::default()).unwrap();
            let g = fit(&scaled, &FitOptions::default()).unwrap();
            prop_assert!((g.alpha - f.alpha).abs() < 1e-6);
            prop_assert!((g.e_irreducible - f.e_irreducible).abs() < 1e-6);
            prop_assert!((g.rho_4bit.unwrap() - f.rho_4bit.unwrap()).abs() < 1e-6);
            let want = f.a_prime * k.powf(f.alpha);
            prop_assert!((g.a_prime / want - 1.0).abs() < 1e-5, "{} vs {}", g.a_prime, want);
        }
    }
}
