//! Embedded invariant checks run by `qprobe selftest`.

use qprobe::decomposition::{ab_split, abc_terms, decompose_network, gain_factorization, NoiseModelLinear};
use qprobe::linalg::{sum_sq, Rng};
use qprobe::network::{build_toy_mlp, build_toy_transformer, forward_dual};
use qprobe::optim::{state_memory_elements, step, OptimizerConfig, OptimizerKind, OptimizerState};
use qprobe::quant::{quantize_rows, QuantConfig, Scheme, LOSSLESS_BITS};
use qprobe::scaling::huber;

/// Deliberate corruptions used to prove a check can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Off-by-one in the expected SOAP state size.
    AccountingFormula,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> CheckResult {
    CheckResult { name, passed, detail }
}

fn abc_identity() -> CheckResult {
    let mut worst: f64 = 0.0;
    let mut failed = None;
    for seed in 0..12u64 {
        let mut rng = Rng::new(seed);
        let net = if seed % 2 == 0 {
            build_toy_transformer(2, 8, 2, 6, true, &mut rng)
        } else {
            build_toy_mlp(3, 8, 6, &mut rng)
        };
        let run = || -> qprobe::Result<f64> {
            let net = net?;
            let x = rng.normal_matrix(6, 8, 1.0);
            let cfg = QuantConfig::absmax(2 + (seed % 4) as u32);
            let t = forward_dual(&net, &x, &cfg)?;
            let mut w: f64 = 0.0;
            for l in 1..=net.len() {
                let (a, b) = ab_split(&t, l)?;
                let terms = abc_terms(&a, &b, &t.h[l])?;
                for i in 0..x.rows() {
                    if terms.excluded[i] {
                        continue;
                    }
                    let d: Vec<f64> = t.hq[l].row(i).iter().zip(t.h[l].row(i)).map(|(q, h)| q - h).collect();
                    let r = sum_sq(&d) / sum_sq(t.h[l].row(i));
                    let sum = terms.a[i] + terms.b[i] + terms.c[i];
                    w = w.max((r - sum).abs() / r.max(1e-12));
                }
            }
            Ok(w)
        };
        match run() {
            Ok(w) => worst = worst.max(w),
            Err(e) => failed = Some(e.to_string()),
        }
    }
    match failed {
        Some(e) => check("abc identity", false, e),
        None => check("abc identity", worst <= 1e-10, format!("max rel err {worst:.1e} over 12 nets")),
    }
}

fn lossless_zero() -> CheckResult {
    let mut rng = Rng::new(40);
    let mut max_r: f64 = 0.0;
    for scheme in [Scheme::AbsmaxRtn, Scheme::Quest] {
        let net = build_toy_transformer(1, 8, 2, 4, true, &mut rng).expect("toy net");
        let x = rng.normal_matrix(4, 8, 1.0);
        let recs = decompose_network(&net, &x, &QuantConfig::lossless(scheme)).expect("decomposition");
        for r in &recs {
            max_r = r.terms.r.iter().fold(max_r, |m, v| m.max(v.abs()));
        }
    }
    check("lossless bits give zero error", max_r == 0.0, format!("max R {max_r:.1e} at {LOSSLESS_BITS} bits"))
}

fn quantizer_closure() -> CheckResult {
    let mut rng = Rng::new(41);
    let mut bad = 0usize;
    let mut rows = 0usize;
    for bits in [2u32, 3, 4, 8] {
        let cfg = QuantConfig::absmax(bits);
        let q_max = cfg.q_max();
        let x = rng.normal_matrix(16, 12, 1.0);
        let neg = x.map(|v| -v);
        let q = quantize_rows(&x, &cfg).expect("absmax");
        let qn = quantize_rows(&neg, &cfg).expect("absmax");
        for r in 0..x.rows() {
            rows += 1;
            let s = q.scales[r];
            let ok = x.row(r).iter().zip(q.values.row(r)).zip(qn.values.row(r)).all(|((&v, &y), &yn)| {
                let k = y / s;
                (k - k.round()).abs() < 1e-9 && k.abs() <= q_max + 1e-9 && yn == -y && (v - y).abs() <= s / 2.0 + 1e-12
            });
            bad += usize::from(!ok);
        }
    }
    check("quantizer grid closure and symmetry", bad == 0, format!("{bad} of {rows} rows off grid"))
}

fn quest_symmetry() -> CheckResult {
    let mut rng = Rng::new(42);
    let cfg = QuantConfig::quest(4);
    let x = rng.normal_matrix(24, 10, 1.0);
    let a = quantize_rows(&x, &cfg).expect("quest");
    let b = quantize_rows(&x.map(|v| -v), &cfg).expect("quest");
    let worst = a
        .values
        .data()
        .iter()
        .zip(b.values.data())
        .fold(0.0f64, |m, (p, q)| m.max((p + q).abs()));
    check("quest odd symmetry", worst <= 1e-12, format!("max |q(x) + q(-x)| {worst:.1e}"))
}

/// Optimizer state sizes, written out independently of the library.
fn expected_state(kind: OptimizerKind, m: usize, n: usize, fault: Option<Fault>) -> usize {
    let (mn, m2, n2) = (m * n, m * m, n * n);
    match kind {
        OptimizerKind::Adamw => 3 * mn,
        OptimizerKind::Muon | OptimizerKind::Scion => 2 * mn,
        OptimizerKind::Psgd => mn + m2 + n2,
        OptimizerKind::Shampoo => 3 * mn + m2 + n2,
        OptimizerKind::Soap => {
            3 * mn + 2 * m2 + 2 * n2 + usize::from(fault == Some(Fault::AccountingFormula))
        }
    }
}

fn optimizer_accounting(fault: Option<Fault>) -> CheckResult {
    let mut rng = Rng::new(43);
    let mut mismatches = Vec::new();
    for (m, n) in [(3usize, 5usize), (8, 2), (1, 1), (6, 6)] {
        for kind in OptimizerKind::ALL {
            let mut st = OptimizerState::new(kind, m, n);
            let mut w = rng.normal_matrix(m, n, 1.0);
            let g = rng.normal_matrix(m, n, 1.0);
            if let Err(e) = step(&OptimizerConfig::new(kind, 1e-3), &mut st, &mut w, &g) {
                mismatches.push(format!("{} {m}x{n}: {e}", kind.name()));
                continue;
            }
            let want = expected_state(kind, m, n, fault);
            let live = st.state_elements();
            if live != want || state_memory_elements(kind, m, n) != want {
                mismatches.push(format!("{} {m}x{n}: live {live}, expected {want}", kind.name()));
            }
        }
    }
    let detail = if mismatches.is_empty() {
        "6 kinds x 4 shapes".to_string()
    } else {
        mismatches.join("; ")
    };
    check("optimizer state accounting", mismatches.is_empty(), detail)
}

fn huber_pointwise() -> CheckResult {
    let d = 1e-3;
    let cases = [(0.0, 0.0), (0.5e-3, 1.25e-7), (1e-3, 5e-7), (-1e-3, 5e-7), (3e-3, 2.5e-6), (-0.5, 4.995e-4)];
    let mut value: f64 = 0.0;
    for (r, want) in cases {
        value = value.max((huber(r, d) - want).abs());
    }
    // one-sided slopes either side of each joint
    let h = 1e-7;
    let mut jump: f64 = 0.0;
    for s in [-1.0, 1.0] {
        let j = s * d;
        let left = (huber(j, d) - huber(j - h, d)) / h;
        let right = (huber(j + h, d) - huber(j, d)) / h;
        jump = jump.max((right - left).abs());
    }
    let ok = value <= 1e-15 && jump <= 1e-6;
    check("huber pointwise and C1", ok, format!("value err {value:.1e}, slope jump {jump:.1e}"))
}

fn gain_closed_form() -> CheckResult {
    let mut rng = Rng::new(44);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let (m, n) = (5, 4);
        let layer = NoiseModelLinear::new(
            rng.normal_matrix(m, n, 1.0),
            rng.normal_matrix(m, n, 0.05),
            rng.normal_vec(m, 0.01),
        )
        .expect("layer");
        let h = rng.normal_matrix(3, n, 1.0);
        let hq = h.add(&rng.normal_matrix(3, n, 0.02)).expect("shapes");
        let t = layer.trace(&h, &hq).expect("trace");
        let (a, b) = ab_split(&t, 1).expect("split");
        let terms = abc_terms(&a, &b, &t.h[1]).expect("terms");
        for i in 0..3 {
            let dh: Vec<f64> = hq.row(i).iter().zip(h.row(i)).map(|(q, p)| q - p).collect();
            let r_prev = sum_sq(&dh) / sum_sq(h.row(i));
            let f = gain_factorization(&layer, &dh, h.row(i)).expect("factors");
            worst = worst.max((terms.a[i] - f.g1 * f.g2 * r_prev).abs() / terms.a[i]);
        }
    }
    check("gain factorization closed form", worst <= 1e-8, format!("max rel err {worst:.1e}"))
}

pub fn run(fault: Option<Fault>) -> Vec<CheckResult> {
    vec![
        abc_identity(),
        lossless_zero(),
        quantizer_closure(),
        quest_symmetry(),
        optimizer_accounting(fault),
        gain_closed_form(),
        huber_pointwise(),
    ]
}

pub fn render(results: &[CheckResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
    let mut out = format!("{:<width$}  result  detail\n", "check");
    for r in results {
        let status = if r.passed { "pass" } else { "FAIL" };
        out.push_str(&format!("{:<width$}  {status:<6}  {}\n", r.name, r.detail));
    }
    let passed = results.iter().filter(|r| r.passed).count();
    out.push_str(&format!("{passed}/{} checks passed\n", results.len()));
    out
}
