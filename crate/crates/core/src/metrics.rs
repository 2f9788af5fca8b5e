//! Row-wise outlier metrics and rank correlation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Max-to-median ratio of absolute values per row. A zero median yields
/// `+∞`, which summaries skip.
pub fn mmr_rows(x: &Matrix) -> Vec<f64> {
    x.row_iter().map(mmr).collect()
}

fn mmr(row: &[f64]) -> f64 {
    if row.is_empty() {
        return f64::INFINITY;
    }
    let mut a: Vec<f64> = row.iter().map(|v| v.abs()).collect();
    a.sort_by(f64::total_cmp);
    let n = a.len();
    let median = if n % 2 == 1 {
        a[n / 2]
    } else {
        0.5 * (a[n / 2 - 1] + a[n / 2])
    };
    if median == 0.0 {
        return f64::INFINITY;
    }
    a[n - 1] / median
}

/// Pearson kurtosis `m4 / m2²` with population moments; `None` for rows
/// without variance.
pub fn kurtosis_rows(x: &Matrix) -> Vec<Option<f64>> {
    x.row_iter().map(kurtosis).collect()
}

fn kurtosis(row: &[f64]) -> Option<f64> {
    if row.iter().all(|v| *v == row[0]) {
        return None;
    }
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let (mut m2, mut m4) = (0.0, 0.0);
    for v in row {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m4 += d2 * d2;
    }
    m2 /= n;
    m4 /= n;
    if m2 <= 0.0 {
        return None;
    }
    Some(m4 / (m2 * m2))
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        // positions i..=j share the mean of ranks i+1..=j+1
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Shape(format!("{} vs {} values", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::Degenerate("spearman needs at least two pairs".into()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spearman input".into()));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("spearman input is constant".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Per-row metrics with mean and max over the rows where each is defined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mmr_per_row: Vec<Option<f64>>,
    pub kurtosis_per_row: Vec<Option<f64>>,
    pub mmr_mean: Option<f64>,
    pub mmr_max: Option<f64>,
    pub kurtosis_mean: Option<f64>,
    pub kurtosis_max: Option<f64>,
}

impl MetricReport {
    pub fn new(x: &Matrix) -> Self {
        let mmr_per_row: Vec<Option<f64>> = mmr_rows(x)
            .into_iter()
            .map(|v| v.is_finite().then_some(v))
            .collect();
        let kurtosis_per_row = kurtosis_rows(x);
        let (mmr_mean, mmr_max) = mean_max(&mmr_per_row);
        let (kurtosis_mean, kurtosis_max) = mean_max(&kurtosis_per_row);
        Self {
            mmr_per_row,
            kurtosis_per_row,
            mmr_mean,
            mmr_max,
            kurtosis_mean,
            kurtosis_max,
        }
    }
}

fn mean_max(v: &[Option<f64>]) -> (Option<f64>, Option<f64>) {
    let defined: Vec<f64> = v.iter().flatten().copied().collect();
    if defined.is_empty() {
        return (None, None);
    }
    let mean = defined.iter().sum::<f64>() / defined.len() as f64;
    let max = defined.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (Some(mean), Some(max))
}

/// One line of the standalone metrics output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowMetrics {
    pub row_index: usize,
    pub mmr: Option<f64>,
    pub kurtosis: Option<f64>,
}

pub fn row_metrics(x: &Matrix) -> Vec<RowMetrics> {
    let r = MetricReport::new(x);
    r.mmr_per_row
        .into_iter()
        .zip(r.kurtosis_per_row)
        .enumerate()
        .map(|(row_index, (mmr, kurtosis))| RowMetrics {
            row_index,
            mmr,
            kurtosis,
        })
        .collect()
}
