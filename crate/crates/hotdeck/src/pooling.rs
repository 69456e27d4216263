//! Built-in analyses and combining rules for multiply imputed results.
//!
//! Each completed dataset is analyzed separately; per-replicate estimates
//! are then pooled as `Q̄ = mean(Q_m)`, `W̄ = mean(variances)`,
//! `B = var(Q_m)`, `T = W̄ + (1 + 1/M)·B`, with the classic large-sample
//! degrees of freedom `(M−1)(1 + W̄/((1+1/M)B))²` and a t-interval. When
//! the replicates agree exactly (`B = 0`) the interval is normal.

use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

use crate::panel::{PanelDataset, SportCode};
use crate::stats::cluster_robust_mean;

/// A built-in analysis of one completed dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AnalysisSpec {
    /// Mean weekly activity frequency; variance cluster-robust by subject.
    MeanFrequency,
    /// Proportion of subject-weeks whose activity set includes the code.
    SportProportion(SportCode),
    /// Mean weekly session count of one activity (zero when not played).
    MeanSportCount(SportCode),
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("unknown analysis {0:?}; expected mean_frequency, sport_proportion:<code>, or mean_count:<code>")]
pub struct UnknownAnalysis(pub String);

impl AnalysisSpec {
    /// Parses the configuration-file spelling.
    pub fn parse(name: &str) -> Result<Self, UnknownAnalysis> {
        if name == "mean_frequency" {
            return Ok(AnalysisSpec::MeanFrequency);
        }
        for (prefix, f) in [
            (
                "sport_proportion:",
                AnalysisSpec::SportProportion as fn(u8) -> _,
            ),
            ("mean_count:", AnalysisSpec::MeanSportCount as fn(u8) -> _),
        ] {
            if let Some(rest) = name.strip_prefix(prefix) {
                if let Ok(code) = rest.parse::<u8>() {
                    return Ok(f(code));
                }
            }
        }
        Err(UnknownAnalysis(name.to_string()))
    }

    pub fn name(&self) -> String {
        match self {
            AnalysisSpec::MeanFrequency => "mean_frequency".into(),
            AnalysisSpec::SportProportion(c) => format!("sport_proportion:{c}"),
            AnalysisSpec::MeanSportCount(c) => format!("mean_count:{c}"),
        }
    }
}

/// Computes `(estimate, sampling variance)` over the records where the
/// analysis variable is observed. On a completed dataset that is every
/// record; on incomplete data this is the complete-case estimate.
pub fn analyze(dataset: &PanelDataset, spec: &AnalysisSpec) -> (f64, f64) {
    let mut values = Vec::with_capacity(dataset.len());
    let mut clusters: Vec<&str> = Vec::with_capacity(dataset.len());
    for rec in dataset.records() {
        let value = match spec {
            AnalysisSpec::MeanFrequency => rec.frequency.map(f64::from),
            AnalysisSpec::SportProportion(code) => {
                rec.sports
                    .as_ref()
                    .map(|s| if s.contains(code) { 1.0 } else { 0.0 })
            }
            AnalysisSpec::MeanSportCount(code) => rec
                .counts
                .as_ref()
                .map(|c| c.get(code).copied().unwrap_or(0) as f64),
        };
        if let Some(v) = value {
            values.push(v);
            clusters.push(&rec.subject_id);
        }
    }
    cluster_robust_mean(&values, &clusters)
}

/// Rubin-combined estimate across imputation replicates.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledEstimate {
    pub q_bar: f64,
    pub within: f64,
    pub between: f64,
    pub total: f64,
    /// `None` encodes the infinite-df (normal) case when `between == 0`.
    pub df: Option<f64>,
    pub ci_95: (f64, f64),
    pub m: usize,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("pooling requires at least two replicates, got {0}")]
pub struct InsufficientReplicates(pub usize);

/// Pools per-replicate `(estimate, variance)` pairs.
pub fn pool_estimates(pairs: &[(f64, f64)]) -> Result<PooledEstimate, InsufficientReplicates> {
    let m = pairs.len();
    if m < 2 {
        return Err(InsufficientReplicates(m));
    }
    let mf = m as f64;
    let q_bar = pairs.iter().map(|p| p.0).sum::<f64>() / mf;
    let within = pairs.iter().map(|p| p.1).sum::<f64>() / mf;
    let between = pairs.iter().map(|p| (p.0 - q_bar).powi(2)).sum::<f64>() / (mf - 1.0);
    let total = within + (1.0 + 1.0 / mf) * between;
    let (df, quantile) = if between > 0.0 {
        let df = (mf - 1.0) * (1.0 + within / ((1.0 + 1.0 / mf) * between)).powi(2);
        let t = StudentsT::new(0.0, 1.0, df).expect("df > 0");
        (Some(df), t.inverse_cdf(0.975))
    } else {
        let n = Normal::new(0.0, 1.0).unwrap();
        (None, n.inverse_cdf(0.975))
    };
    let half = quantile * total.sqrt();
    Ok(PooledEstimate {
        q_bar,
        within,
        between,
        total,
        df,
        ci_95: (q_bar - half, q_bar + half),
        m,
    })
}
