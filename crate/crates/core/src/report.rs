//! Report emission: decomposition CSV, metrics and fit JSON, and standalone
//! SVG line plots drawn by hand.

use std::fmt::Write as _;

use crate::decomposition::SummaryRow;
use crate::error::{Error, Result};
use crate::metrics::RowMetrics;
use crate::scaling::{predict, Precision, ScalingFit, ScalingPoint};

pub const DECOMPOSITION_COLUMNS: [&str; 17] = [
    "module_index",
    "module_kind",
    "quantized",
    "stat",
    "R",
    "A",
    "B",
    "C",
    "G",
    "G1",
    "G2",
    "cos_phi",
    "cos_psi",
    "n_tokens_excluded",
    "mmr",
    "kurtosis",
    "gain_gap",
];

pub fn decomposition_csv(rows: &[SummaryRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(DECOMPOSITION_COLUMNS)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}

pub fn parse_decomposition_csv(text: &str) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers()?.clone();
    if headers.iter().ne(DECOMPOSITION_COLUMNS) {
        return Err(Error::Parse(format!("unexpected decomposition CSV header {headers:?}")));
    }
    let rows: Vec<SummaryRow> = r.deserialize().collect::<std::result::Result<_, _>>()?;
    for row in &rows {
        let vals = [
            row.r, row.a, row.b, row.c, row.g, row.g1, row.g2, row.cos_phi, row.cos_psi, row.mmr,
            row.kurtosis, row.gain_gap,
        ];
        if vals.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Parse(format!("non-finite value in module {}", row.module_index)));
        }
    }
    Ok(rows)
}

pub fn metrics_json(rows: &[RowMetrics]) -> String {
    serde_json::to_string_pretty(rows).expect("metrics serialize") + "\n"
}

pub fn parse_metrics_json(text: &str) -> Result<Vec<RowMetrics>> {
    Ok(serde_json::from_str(text)?)
}

pub fn fits_json(fits: &[ScalingFit]) -> String {
    serde_json::to_string_pretty(fits).expect("fits serialize") + "\n"
}

pub fn parse_fits_json(text: &str) -> Result<Vec<ScalingFit>> {
    let fits: Vec<ScalingFit> = serde_json::from_str(text)?;
    for f in &fits {
        let core = [f.a_prime, f.alpha, f.e_irreducible, f.objective];
        if core.iter().chain(&f.rho_4bit).chain(&f.residuals).any(|v| !v.is_finite()) {
            return Err(Error::Parse(format!("non-finite coefficient in fit {}", f.optimizer)));
        }
    }
    Ok(fits)
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2",
];

/// One line of a chart; `None` breaks the polyline.
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, Option<f64>)>,
    pub dashed: bool,
    pub markers: bool,
    pub color: usize,
}

pub struct Panel {
    pub title: String,
    pub x_label: String,
    pub log_x: bool,
    pub log_y: bool,
    /// Ticks at whole numbers on a linear x axis.
    pub integer_x: bool,
    pub series: Vec<Series>,
    /// Free text drawn under the title.
    pub notes: Vec<String>,
}

const PW: f64 = 420.0;
const PH: f64 = 260.0;
const ML: f64 = 62.0;
const MR: f64 = 16.0;
const MT: f64 = 34.0;
const MB: f64 = 40.0;

fn tf(v: f64, log: bool) -> Option<f64> {
    if !v.is_finite() {
        return None;
    }
    if log {
        (v > 0.0).then(|| v.log10())
    } else {
        Some(v)
    }
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in vals {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 * hi.abs().max(1.0) {
        let pad = 0.5 * lo.abs().max(1e-3);
        return (lo - pad, hi + pad);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn label(v: f64, log: bool) -> String {
    let x = if log { 10f64.powf(v) } else { v };
    if x == 0.0 {
        "0".into()
    } else if x.abs() >= 1e4 || x.abs() < 1e-2 {
        format!("{x:.1e}")
    } else {
        format!("{x:.3}")
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn draw_panel(out: &mut String, p: &Panel, ox: f64, oy: f64) {
    let pts: Vec<(f64, f64)> = p
        .series
        .iter()
        .flat_map(|s| s.points.iter())
        .filter_map(|&(x, y)| Some((tf(x, p.log_x)?, tf(y?, p.log_y)?)))
        .collect();
    let (x0, x1) = range(pts.iter().map(|q| q.0));
    let (y0, y1) = range(pts.iter().map(|q| q.1));
    let w = PW - ML - MR;
    let h = PH - MT - MB;
    let sx = |x: f64| ox + ML + (x - x0) / (x1 - x0) * w;
    let sy = |y: f64| oy + MT + h - (y - y0) / (y1 - y0) * h;

    let _ = writeln!(
        out,
        r##"<text x="{:.2}" y="{:.2}" font-size="13" text-anchor="middle">{}</text>"##,
        ox + ML + w / 2.0,
        oy + 16.0,
        esc(&p.title)
    );
    for (i, n) in p.notes.iter().enumerate() {
        let _ = writeln!(
            out,
            r##"<text x="{:.2}" y="{:.2}" font-size="10">{}</text>"##,
            ox + ML + 6.0,
            oy + MT + 12.0 + 12.0 * i as f64,
            esc(n)
        );
    }
    let _ = writeln!(
        out,
        r##"<rect x="{:.2}" y="{:.2}" width="{w:.2}" height="{h:.2}" fill="none" stroke="#444"/>"##,
        ox + ML,
        oy + MT
    );
    let x_ticks: Vec<f64> = if p.integer_x && !p.log_x {
        let (a, b) = (x0.ceil() as i64, x1.floor() as i64);
        let stride = ((b - a) / 8).max(1);
        (a..=b).step_by(stride as usize).map(|v| v as f64).collect()
    } else {
        (0..=4).map(|k| x0 + k as f64 / 4.0 * (x1 - x0)).collect()
    };
    for xv in x_ticks {
        let text = if p.integer_x { format!("{xv:.0}") } else { label(xv, p.log_x) };
        let _ = writeln!(
            out,
            r##"<text x="{:.2}" y="{:.2}" font-size="9" text-anchor="middle">{text}</text>"##,
            sx(xv),
            oy + MT + h + 13.0
        );
    }
    for k in 0..=4 {
        let yv = y0 + k as f64 / 4.0 * (y1 - y0);
        let _ = writeln!(
            out,
            r##"<text x="{:.2}" y="{:.2}" font-size="9" text-anchor="end">{}</text>"##,
            ox + ML - 4.0,
            sy(yv) + 3.0,
            label(yv, p.log_y)
        );
    }
    let _ = writeln!(
        out,
        r##"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="middle">{}</text>"##,
        ox + ML + w / 2.0,
        oy + PH - 8.0,
        esc(&p.x_label)
    );

    for s in &p.series {
        let color = PALETTE[s.color % PALETTE.len()];
        let dash = if s.dashed { r#" stroke-dasharray="5,3""# } else { "" };
        let mut run: Vec<(f64, f64)> = Vec::new();
        let flush = |run: &mut Vec<(f64, f64)>, out: &mut String| {
            if run.len() > 1 {
                let coords: Vec<String> = run.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
                let _ = writeln!(
                    out,
                    r##"<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{}"/>"##,
                    coords.join(" ")
                );
            }
            run.clear();
        };
        for &(x, y) in &s.points {
            match (tf(x, p.log_x), y.and_then(|y| tf(y, p.log_y))) {
                (Some(x), Some(y)) => {
                    run.push((sx(x), sy(y)));
                    if s.markers {
                        let _ = writeln!(
                            out,
                            r##"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"##,
                            sx(x),
                            sy(y)
                        );
                    }
                }
                _ => flush(&mut run, out),
            }
        }
        flush(&mut run, out);
    }

    let labelled: Vec<&Series> = p.series.iter().filter(|s| !s.label.is_empty()).collect();
    for (i, s) in labelled.iter().enumerate() {
        let color = PALETTE[s.color % PALETTE.len()];
        let y = oy + MT + 10.0 + 12.0 * (i + p.notes.len()) as f64;
        let x = ox + PW - MR - 92.0;
        let dash = if s.dashed { r#" stroke-dasharray="5,3""# } else { "" };
        let _ = writeln!(
            out,
            r##"<line x1="{x:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{color}" stroke-width="1.5"{dash}/>"##,
            y - 3.0,
            x + 14.0,
            y - 3.0
        );
        let _ = writeln!(
            out,
            r##"<text x="{:.2}" y="{y:.2}" font-size="9">{}</text>"##,
            x + 18.0,
            esc(&s.label)
        );
    }
}

/// Lays panels out in a grid `cols` wide.
pub fn render(panels: &[Panel], cols: usize) -> String {
    let cols = cols.max(1);
    let rows = panels.len().div_ceil(cols).max(1);
    let (w, h) = (PW * cols as f64, PH * rows as f64);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}" font-family="sans-serif">"##
    );
    let _ = writeln!(out, r##"<rect width="100%" height="100%" fill="white"/>"##);
    for (i, p) in panels.iter().enumerate() {
        draw_panel(&mut out, p, PW * (i % cols) as f64, PH * (i / cols) as f64);
    }
    out.push_str("</svg>\n");
    out
}

/// One panel per quantity over module index, for the rows with `stat`.
/// R, A and B use a log axis.
pub fn decomposition_svg(rows: &[SummaryRow], stat: &str) -> String {
    let rows: Vec<&SummaryRow> = rows.iter().filter(|r| r.stat == stat).collect();
    type Get = fn(&SummaryRow) -> Option<f64>;
    let quantities: [(&str, bool, Get); 7] = [
        ("R", true, |r| r.r),
        ("A", true, |r| r.a),
        ("B", true, |r| r.b),
        ("C", false, |r| r.c),
        ("G", false, |r| r.g),
        ("G1", false, |r| r.g1),
        ("G2", false, |r| r.g2),
    ];
    let panels: Vec<Panel> = quantities
        .iter()
        .enumerate()
        .map(|(i, &(name, log_y, get))| Panel {
            title: format!("{name} ({stat})"),
            x_label: "module index".into(),
            log_x: false,
            log_y,
            integer_x: true,
            series: vec![Series {
                label: String::new(),
                points: rows
                    .iter()
                    .filter(|r| get(r).is_some_and(|v| !log_y || v > 0.0))
                    .map(|r| (r.module_index as f64, get(r)))
                    .collect(),
                dashed: false,
                markers: true,
                color: i,
            }],
            notes: Vec::new(),
        })
        .collect();
    render(&panels, 2)
}

/// Loss against parameter count per optimizer: observed points, the fitted
/// full-precision curve (solid) and 4-bit curve (dashed), annotated with ρ.
pub fn scaling_svg(fits: &[ScalingFit], points: &[ScalingPoint]) -> String {
    let panels: Vec<Panel> = fits
        .iter()
        .map(|f| {
            let own: Vec<&ScalingPoint> = points.iter().filter(|p| p.optimizer == f.optimizer).collect();
            let (lo, hi) = own
                .iter()
                .fold((f64::INFINITY, 0.0f64), |(lo, hi), p| (lo.min(p.n_params as f64), hi.max(p.n_params as f64)));
            let (lo, hi) = if lo.is_finite() { (lo / 1.5, hi * 1.5) } else { (1e6, 1e9) };
            let grid: Vec<f64> = (0..=48).map(|k| lo * (hi / lo).powf(k as f64 / 48.0)).collect();
            let mut series = Vec::new();
            for (c, prec, dashed) in [(0, Precision::Fp, false), (1, Precision::W4a4, true)] {
                if prec == Precision::W4a4 && f.rho_4bit.is_none() {
                    continue;
                }
                let name = if prec == Precision::Fp { "fp" } else { "w4a4" };
                series.push(Series {
                    label: format!("{name} fit"),
                    points: grid.iter().map(|&n| (n, Some(predict(f, n, prec)))).collect(),
                    dashed,
                    markers: false,
                    color: c,
                });
                let mut obs: Vec<(f64, Option<f64>)> = Vec::new();
                for p in own.iter().filter(|p| p.precision == prec) {
                    obs.push((p.n_params as f64, Some(p.loss)));
                    obs.push((p.n_params as f64, None));
                }
                series.push(Series {
                    label: String::new(),
                    points: obs,
                    dashed: false,
                    markers: true,
                    color: c,
                });
            }
            let note = match f.rho_4bit {
                Some(r) => format!("rho_4bit = {r:.3}, alpha = {:.3}, E = {:.3}", f.alpha, f.e_irreducible),
                None => format!("alpha = {:.3}, E = {:.3}", f.alpha, f.e_irreducible),
            };
            Panel {
                title: f.optimizer.clone(),
                x_label: "parameters N".into(),
                log_x: true,
                log_y: false,
                integer_x: false,
                series,
                notes: vec![note],
            }
        })
        .collect();
    render(&panels, 3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomposition::{decompose_network, summary_rows, Stat};
    use crate::linalg::Rng;
    use crate::metrics::row_metrics;
    use crate::network::build_toy_mlp;
    use crate::quant::QuantConfig;
    use crate::scaling::{bundled_paper_data, fit_all, FitOptions};

    fn rows() -> Vec<SummaryRow> {
        let mut rng = Rng::new(3);
        let net = build_toy_mlp(2, 8, 6, &mut rng).unwrap();
        let x = rng.normal_matrix(6, 8, 1.0);
        let recs = decompose_network(&net, &x, &QuantConfig::absmax(4)).unwrap();
        summary_rows(&recs, &[Stat::Mean, Stat::TruncatedMeanTop1pct])
    }

    #[test]
    fn decomposition_csv_round_trips() {
        let r = rows();
        let text = decomposition_csv(&r).unwrap();
        assert!(text.starts_with("module_index,module_kind,quantized,stat,R,A,B,C,G,G1,G2,cos_phi,cos_psi,n_tokens_excluded"));
        assert_eq!(parse_decomposition_csv(&text).unwrap(), r);
        assert_eq!(decomposition_csv(&parse_decomposition_csv(&text).unwrap()).unwrap(), text);
    }

    #[test]
    fn empty_decomposition_keeps_header() {
        let text = decomposition_csv(&[]).unwrap();
        assert!(parse_decomposition_csv(&text).unwrap().is_empty());
    }

    #[test]
    fn decomposition_csv_rejects_bad_header_and_nan() {
        assert!(parse_decomposition_csv("a,b\n1,2\n").is_err());
        let text = decomposition_csv(&rows()).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut cells: Vec<String> = lines[1].split(',').map(String::from).collect();
        cells[4] = "NaN".into();
        lines[1] = cells.join(",");
        assert!(parse_decomposition_csv(&lines.join("\n")).is_err());
    }

    #[test]
    fn metrics_json_round_trips() {
        let mut rng = Rng::new(5);
        let m = row_metrics(&rng.normal_matrix(4, 9, 1.0));
        assert_eq!(parse_metrics_json(&metrics_json(&m)).unwrap(), m);
    }

    #[test]
    fn fits_json_round_trips() {
        let fits = fit_all(&bundled_paper_data(), &FitOptions::default()).unwrap();
        let text = fits_json(&fits);
        assert_eq!(parse_fits_json(&text).unwrap(), fits);
        assert!(parse_fits_json("[{}]").is_err());
    }

    #[test]
    fn svgs_are_well_formed() {
        let svg = decomposition_svg(&rows(), "mean");
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches(" (mean)</text>").count(), 7);
        assert!(svg.matches("<polyline").count() >= 4);
        let data = bundled_paper_data();
        let fits = fit_all(&data, &FitOptions::default()).unwrap();
        let s = scaling_svg(&fits, &data);
        assert_eq!(s.matches("rho_4bit = ").count(), 6);
        assert_eq!(s.matches("<circle").count(), data.len());
        assert!(!s.contains("NaN"));
    }

    #[test]
    fn zero_values_break_log_lines() {
        let p = Panel {
            title: "t".into(),
            x_label: "x".into(),
            log_x: false,
            log_y: true,
            integer_x: false,
            series: vec![Series {
                label: "s".into(),
                points: vec![(1.0, Some(1.0)), (2.0, Some(2.0)), (3.0, Some(0.0)), (4.0, Some(1.0)), (5.0, Some(3.0))],
                dashed: false,
                markers: false,
                color: 0,
            }],
            notes: vec![],
        };
        let svg = render(&[p], 1);
        assert_eq!(svg.matches("<polyline").count(), 2);
    }
}
