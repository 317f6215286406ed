//! Independent reference implementations used to certify the differentiable
//! code paths: exact optimal transport, finite differences, and plain
//! statistics. Nothing here shares numeric code with `diffcore` or `losses`.

mod assignment;
mod fd;
pub mod gradcheck;
mod w1;

pub use assignment::{exact_w1_assignment, AssignmentProblem, BRUTE_FORCE_MAX_N, MAX_ASSIGNMENT_N};
pub use fd::{finite_diff_grad, relative_error, FD_STEP};
pub use w1::exact_w1_1d;

/// Percentile with linear interpolation between order statistics
/// (rank `p/100 · (n−1)`), computed by a full sort.
pub fn reference_percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (rank - lo as f64)
}

/// Variance without Bessel correction, two-pass.
pub fn population_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_of_linspace() {
        let v: Vec<f64> = (0..=200).map(|i| -1.0 + i as f64 * 0.01).collect();
        assert!((reference_percentile(&v, 95.0) - 0.9).abs() < 1e-12);
        assert!((reference_percentile(&v, 5.0) + 0.9).abs() < 1e-12);
        assert_eq!(reference_percentile(&v, 100.0), v[200]);
    }

    #[test]
    fn variance_by_hand() {
        assert_eq!(population_variance(&[2.0, -2.0]), 4.0);
        assert_eq!(population_variance(&[5.0, 5.0]), 0.0);
    }
}
