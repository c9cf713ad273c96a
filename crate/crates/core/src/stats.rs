//! Aggregation statistics for reports: medians and seeded percentile
//! bootstrap confidence intervals.

use rand::Rng;

use crate::rng::{derive, Stream};

/// Sample median; even-length inputs average the two central order
/// statistics. Returns NaN for an empty slice.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("non-NaN stats input"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Linear-interpolation percentile (same convention as numpy's default).
/// `q` is in [0, 1]. Input need not be sorted.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("non-NaN stats input"));
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        v[lo]
    } else {
        let w = pos - lo as f64;
        v[lo] * (1.0 - w) + v[hi] * w
    }
}

/// 95% percentile-bootstrap CI for the median of `values`.
///
/// Resamples with replacement `resamples` times using a ChaCha stream
/// derived from `seed`, so reports are reproducible.
pub fn bootstrap_ci_median(values: &[f64], resamples: usize, seed: u64) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    if values.len() == 1 {
        return (values[0], values[0]);
    }
    let mut rng = derive(seed, Stream::Bootstrap, values.len() as u64);
    let mut medians = Vec::with_capacity(resamples);
    let mut sample = vec![0.0; values.len()];
    for _ in 0..resamples {
        for s in sample.iter_mut() {
            *s = values[rng.gen_range(0..values.len())];
        }
        medians.push(median(&sample));
    }
    (percentile(&medians, 0.025), percentile(&medians, 0.975))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn percentile_interpolates() {
        let v = [10.0, 20.0, 30.0, 40.0];
        assert_eq!(percentile(&v, 0.0), 10.0);
        assert_eq!(percentile(&v, 1.0), 40.0);
        assert_eq!(percentile(&v, 0.5), 25.0);
    }

    #[test]
    fn bootstrap_is_deterministic_and_brackets_median() {
        let v = [0.8, 0.9, 0.95, 0.85, 0.99];
        let (lo1, hi1) = bootstrap_ci_median(&v, 10_000, 123);
        let (lo2, hi2) = bootstrap_ci_median(&v, 10_000, 123);
        assert_eq!((lo1, hi1), (lo2, hi2));
        let m = median(&v);
        assert!(lo1 <= m && m <= hi1);
        assert!(lo1 >= 0.8 && hi1 <= 0.99);
    }

    #[test]
    fn bootstrap_single_value_degenerates() {
        assert_eq!(bootstrap_ci_median(&[0.5], 100, 1), (0.5, 0.5));
    }
}
