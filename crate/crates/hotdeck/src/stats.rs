//! Small statistical utilities shared by the analyses, the simulation
//! harness, and the test suites.

use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Mean of `values` with a cluster-robust sampling variance, clustering on
/// the parallel `clusters` labels (one per value).
///
/// `V = G/(G-1) · Σ_g u_g² / n²` with `u_g = Σ_{i∈g} (x_i − x̄)`.
pub fn cluster_robust_mean(values: &[f64], clusters: &[&str]) -> (f64, f64) {
    assert_eq!(values.len(), clusters.len());
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    // accumulate in first-appearance order so the float sums (and therefore
    // the variance) are bit-reproducible across runs
    let mut index: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
    let mut per_cluster: Vec<f64> = Vec::new();
    for (v, c) in values.iter().zip(clusters) {
        let i = *index.entry(c).or_insert_with(|| {
            per_cluster.push(0.0);
            per_cluster.len() - 1
        });
        per_cluster[i] += v - mean;
    }
    let g = per_cluster.len();
    if g < 2 {
        return (mean, 0.0);
    }
    let ssq: f64 = per_cluster.iter().map(|u| u * u).sum();
    let var = (g as f64 / (g as f64 - 1.0)) * ssq / (n as f64 * n as f64);
    (mean, var)
}

/// Pearson chi-square goodness-of-fit test of observed category counts
/// against expected probabilities. Returns `(statistic, p_value)`.
pub fn chi_square_gof(observed: &[u64], expected_probs: &[f64]) -> (f64, f64) {
    assert_eq!(observed.len(), expected_probs.len());
    let n: u64 = observed.iter().sum();
    let mut stat = 0.0;
    let mut df = 0usize;
    for (&o, &p) in observed.iter().zip(expected_probs) {
        if p <= 0.0 {
            assert_eq!(o, 0, "observations in a zero-probability category");
            continue;
        }
        let e = n as f64 * p;
        stat += (o as f64 - e).powi(2) / e;
        df += 1;
    }
    assert!(
        df >= 2,
        "need at least two categories with positive probability"
    );
    let chi = ChiSquared::new((df - 1) as f64).unwrap();
    (stat, 1.0 - chi.cdf(stat))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cluster_robust_matches_iid_for_singleton_clusters() {
        let values = [1.0, 2.0, 3.0, 4.0];
        let clusters = ["a", "b", "c", "d"];
        let (mean, var) = cluster_robust_mean(&values, &clusters);
        assert!((mean - 2.5).abs() < 1e-12);
        // G/(G-1)·Σ(x−x̄)²/n² = (4/3)·5/16
        assert!((var - (4.0 / 3.0) * 5.0 / 16.0).abs() < 1e-12);
    }

    #[test]
    fn constant_values_have_zero_variance() {
        let (mean, var) = cluster_robust_mean(&[3.0, 3.0, 3.0], &["a", "a", "b"]);
        assert_eq!(mean, 3.0);
        assert_eq!(var, 0.0);
    }

    #[test]
    fn chi_square_accepts_the_true_distribution() {
        // 10,000 draws split exactly per the probabilities: statistic 0, p 1
        let (stat, p) = chi_square_gof(&[5000, 3000, 2000], &[0.5, 0.3, 0.2]);
        assert!(stat < 1e-12);
        assert!(p > 0.999);
    }

    #[test]
    fn chi_square_rejects_a_wrong_distribution() {
        let (_, p) = chi_square_gof(&[9000, 500, 500], &[0.5, 0.3, 0.2]);
        assert!(p < 1e-6);
    }
}
