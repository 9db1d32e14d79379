//! Aggregation, quartile binning and table rendering.

use std::fmt::Write as _;

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn fmt_mean_std(xs: &[f64]) -> String {
    let (m, s) = mean_std(xs);
    format!("{m:.4}±{s:.4}")
}

/// Quartile bin (0..4) of each position in a ranking of `len` items,
/// bin 0 holding the first quarter.
pub fn rank_quartile(rank: usize, len: usize) -> usize {
    if len == 0 {
        return 0;
    }
    (4 * rank / len).min(3)
}

/// Bin of `value` against `sorted` (ascending), using its lowest tied rank.
pub fn value_quartile(value: f64, sorted: &[f64]) -> usize {
    let rank = sorted.partition_point(|v| *v < value);
    rank_quartile(rank, sorted.len())
}

/// Share of each bin in `bins`; all zero when empty.
pub fn shares(bins: &[usize]) -> [f64; 4] {
    let mut out = [0.0; 4];
    if bins.is_empty() {
        return out;
    }
    for &b in bins {
        out[b] += 1.0;
    }
    let n = bins.len() as f64;
    out.iter_mut().for_each(|x| *x /= n);
    out
}

/// Markdown table with a header row.
pub fn markdown(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(out, "|{}|", header.iter().map(|_| "---").collect::<Vec<_>>().join("|"));
    for r in rows {
        let _ = writeln!(out, "| {} |", r.join(" | "));
    }
    out
}

/// Comma-separated table with a header row.
pub fn csv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    out
}
