//! Comparison statistics used by tests, reports, and sweeps.

use std::cmp::Ordering;

/// Index of the largest value; ties go to the lowest index. `None` when empty.
pub fn argmax(values: &[f32]) -> Option<usize> {
    let mut best: Option<(usize, f32)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Fractional ranks (1-based), ties sharing their average rank.
pub fn ranks(values: &[f32]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(Ordering::Equal));
    let mut out = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &idx in &order[start..end] {
            out[idx] = avg;
        }
        start = end;
    }
    out
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    if a.len() < 2 {
        return None;
    }
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

/// Spearman rank correlation; `None` for fewer than two points or a constant
/// side.
pub fn spearman(a: &[f32], b: &[f32]) -> Option<f64> {
    pearson(&ranks(a), &ranks(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ErrorStats {
    pub max_abs: f64,
    pub mean_abs: f64,
}

pub fn error_stats(got: &[f32], want: &[f32]) -> ErrorStats {
    assert_eq!(got.len(), want.len());
    if got.is_empty() {
        return ErrorStats::default();
    }
    let mut max_abs = 0.0f64;
    let mut sum = 0.0f64;
    for (g, w) in got.iter().zip(want) {
        let e = (*g as f64 - *w as f64).abs();
        max_abs = max_abs.max(e);
        sum += e;
    }
    ErrorStats {
        max_abs,
        mean_abs: sum / got.len() as f64,
    }
}
