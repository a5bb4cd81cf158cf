//! Seed-sweep aggregation: mean and population standard deviation.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedStats {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl std::fmt::Display for SeedStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

/// Mean and population standard deviation (n in the denominator).
pub fn mean_std(values: &[f64]) -> SeedStats {
    assert!(!values.is_empty(), "aggregate of nothing");
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    SeedStats { mean, std: var.sqrt(), n }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_value_has_zero_std() {
        let s = mean_std(&[0.42]);
        assert_eq!(s.mean, 0.42);
        assert_eq!(s.std, 0.0);
    }

    #[test]
    fn one_two_three() {
        let s = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert!((s.std - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn streaming_two_pass_oracle_agrees() {
        // Oracle: accumulate sum and sum of squares in one pass, then
        // compare against the direct two-pass computation.
        let values: Vec<f64> = (0..100).map(|i| ((i * 37) % 11) as f64 * 0.25 - 1.0).collect();
        let n = values.len() as f64;
        let sum: f64 = values.iter().sum();
        let sumsq: f64 = values.iter().map(|v| v * v).sum();
        let mean = sum / n;
        let var = (sumsq / n - mean * mean).max(0.0);

        let s = mean_std(&values);
        assert!((s.mean - mean).abs() < 1e-12);
        assert!((s.std - var.sqrt()).abs() < 1e-10);
    }
}
