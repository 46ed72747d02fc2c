//! Summary statistics over nanosecond samples.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: i64,
    pub p50: i64,
    pub p95: i64,
    pub p99: i64,
    pub max: i64,
}

/// Nearest-rank percentile of an ascending slice; `p` in `[0, 100]`.
pub fn percentile_sorted(sorted: &[i64], p: f64) -> Option<i64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = libm::ceil(p / 100.0 * sorted.len() as f64) as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

pub fn median(samples: &[i64]) -> Option<i64> {
    let mut sorted = samples.to_vec();
    sorted.sort_unstable();
    percentile_sorted(&sorted, 50.0)
}

pub fn mean(samples: &[i64]) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    let sum: i128 = samples.iter().map(|&x| i128::from(x)).sum();
    Some(sum as f64 / samples.len() as f64)
}

pub fn summarize(samples: &[i64]) -> Option<Summary> {
    let mean = mean(samples)?;
    let mut sorted: Vec<i64> = samples.to_vec();
    sorted.sort_unstable();
    let var = sorted
        .iter()
        .map(|&x| {
            let d = x as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / sorted.len() as f64;
    let pct = |p| percentile_sorted(&sorted, p).expect("non-empty");
    Some(Summary {
        count: sorted.len(),
        mean,
        std: libm::sqrt(var),
        min: sorted[0],
        p50: pct(50.0),
        p95: pct(95.0),
        p99: pct(99.0),
        max: sorted[sorted.len() - 1],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank() {
        let xs: Vec<i64> = (1..=100).collect();
        assert_eq!(percentile_sorted(&xs, 50.0), Some(50));
        assert_eq!(percentile_sorted(&xs, 95.0), Some(95));
        assert_eq!(percentile_sorted(&xs, 99.0), Some(99));
        assert_eq!(percentile_sorted(&xs, 0.0), Some(1));
        assert_eq!(percentile_sorted(&xs, 100.0), Some(100));
        assert_eq!(percentile_sorted(&[], 50.0), None);
        assert_eq!(median(&[5, 1, 3]), Some(3));
        assert_eq!(median(&[4, 1, 3, 2]), Some(2));
    }

    #[test]
    fn summary_values() {
        let s = summarize(&[2, 4, 4, 4, 5, 5, 7, 9]).unwrap();
        assert_eq!(s.count, 8);
        assert!((s.mean - 5.0).abs() < 1e-12);
        assert!((s.std - 2.0).abs() < 1e-12);
        assert_eq!((s.min, s.max), (2, 9));
        assert!(summarize(&[]).is_none());
    }
}
