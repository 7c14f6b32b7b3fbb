//! Small order-statistic helpers shared by the trainer and the reports.

use alloc::vec::Vec;

/// Minimum, median and maximum of a sample; `None` for an empty sample.
///
/// NaNs sort last under `total_cmp`, so they surface as the maximum.
pub fn min_median_max(values: &[f64]) -> Option<(f64, f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some((v[0], median_sorted(&v), v[v.len() - 1]))
}

/// Median of an already sorted, non-empty slice.
pub fn median_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Median of an unsorted sample; `None` when empty.
pub fn median(values: &[f64]) -> Option<f64> {
    min_median_max(values).map(|(_, m, _)| m)
}

/// Nearest-rank quantile (`q` in `[0, 1]`) of an already sorted, non-empty slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = libm::ceil(q * n as f64) as usize;
    sorted[rank.clamp(1, n) - 1]
}
