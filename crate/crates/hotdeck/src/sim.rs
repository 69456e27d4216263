//! Synthetic panels, amputation, and method evaluation.
//!
//! The generator stands in for the (non-distributable) field data: panels
//! with school classes, gender, a weekly pain process, seasonal activity
//! frequency, and per-subject activity preferences, all with a known
//! analytic mean so bias and interval coverage can be measured. Amputation
//! deletes values from complete data under MCAR or MAR (logistic in the
//! observed pain state and the week), always preserving the skip-pattern
//! coherence of the source questionnaire: no frequency means no activity
//! answer, no activity answer means no counts.
//!
//! Generating model, per subject `i` and week `t`:
//!
//! ```text
//! pain_t   = New w.p. incidence, else Old w.p. persistence when week t−1
//!            had pain, else None
//! latent   = base + amplitude·sin(2πt/52) − effect·1[pain_t ≠ None]
//!            + a_i + ε,  a_i ~ N(0, propensity_sd²), ε ~ N(0, noise_sd²)
//! freq_t   = clamp(round(latent), 0, 8)
//! sports   = min(freq, 1 + Bernoulli(½) + Bernoulli(½)) distinct activities
//!            drawn by per-subject Dirichlet(concentration) preferences
//! counts   = one per activity plus a preference-weighted multinomial over
//!            the remaining freq − |sports| sessions
//! ```

use std::collections::{BTreeMap, BTreeSet};

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, Normal as GaussDist};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::engine::{run_imputations, EngineError, RunConfig, Variable};
use crate::panel::{Gender, PainLevel, PanelDataset, WeekRecord, MAX_FREQUENCY};
use crate::pooling::{analyze, pool_estimates, AnalysisSpec};
use crate::rng::{stream, Stage};
use crate::stats::cluster_robust_mean;

/// All generator constants in one place.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub n_subjects: usize,
    pub n_weeks: u32,
    pub n_classes: usize,
    pub n_sports: u8,
    pub base_frequency: f64,
    pub seasonal_amplitude: f64,
    /// Spread of the per-subject activity propensity.
    pub propensity_sd: f64,
    pub noise_sd: f64,
    pub pain_incidence: f64,
    pub pain_persistence: f64,
    /// Latent-frequency penalty while in pain.
    pub pain_effect: f64,
    /// Dirichlet concentration of per-subject activity preferences.
    pub sport_concentration: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_subjects: 100,
            n_weeks: 40,
            n_classes: 10,
            n_sports: 10,
            base_frequency: 3.5,
            seasonal_amplitude: 0.75,
            propensity_sd: 1.0,
            noise_sd: 1.2,
            pain_incidence: 0.15,
            pain_persistence: 0.5,
            pain_effect: 1.2,
            sport_concentration: 1.0,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.n_subjects < 1 || self.n_weeks < 1 || self.n_classes < 1 || self.n_sports < 1 {
            return Err(SimError::InvalidConfig("sizes must be at least 1".into()));
        }
        for (name, v) in [
            ("pain_incidence", self.pain_incidence),
            ("pain_persistence", self.pain_persistence),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(SimError::InvalidConfig(format!("{name} must be in [0,1]")));
            }
        }
        for (name, v) in [
            ("seasonal_amplitude", self.seasonal_amplitude),
            ("propensity_sd", self.propensity_sd),
            ("noise_sd", self.noise_sd),
            ("pain_effect", self.pain_effect),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(SimError::InvalidConfig(format!("{name} must be ≥ 0")));
            }
        }
        if self.sport_concentration <= 0.0 {
            return Err(SimError::InvalidConfig(
                "sport_concentration must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Everything needed to recompute reported biases from raw estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthRecord {
    pub config: GeneratorConfig,
    pub weekly_mean_frequency: Vec<f64>,
    pub mean_frequency: f64,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid generator or scenario configuration: {0}")]
    InvalidConfig(String),
    #[error("MAR calibration cannot reach a marginal missing rate of {requested}")]
    RateUnachievable { requested: f64 },
    #[error("method {method} does not support estimand {estimand}")]
    UnsupportedMethod { method: String, estimand: String },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

fn pain_marginals(cfg: &GeneratorConfig) -> Vec<f64> {
    // probability of any pain per week: q_t = i + (1−i)·persistence·q_{t−1}
    let mut q = Vec::with_capacity(cfg.n_weeks as usize);
    let mut prev = 0.0;
    for _ in 0..cfg.n_weeks {
        let qt = cfg.pain_incidence + (1.0 - cfg.pain_incidence) * cfg.pain_persistence * prev;
        q.push(qt);
        prev = qt;
    }
    q
}

fn seasonal(cfg: &GeneratorConfig, week: u32) -> f64 {
    cfg.base_frequency
        + cfg.seasonal_amplitude * (2.0 * std::f64::consts::PI * f64::from(week) / 52.0).sin()
}

/// Mean of `clamp(round(X), 0, 8)` for `X ~ N(mu, sd²)`.
fn discretized_mean(mu: f64, sd: f64) -> f64 {
    if sd == 0.0 {
        return (mu.round()).clamp(0.0, f64::from(MAX_FREQUENCY));
    }
    let normal = Normal::new(mu, sd).unwrap();
    let mut e = 0.0;
    for k in 0..=MAX_FREQUENCY {
        let p = match k {
            0 => normal.cdf(0.5),
            k if k == MAX_FREQUENCY => 1.0 - normal.cdf(f64::from(MAX_FREQUENCY) - 0.5),
            k => normal.cdf(f64::from(k) + 0.5) - normal.cdf(f64::from(k) - 0.5),
        };
        e += f64::from(k) * p;
    }
    e
}

/// Exact per-week expected frequency under the generating model.
pub fn analytic_weekly_means(cfg: &GeneratorConfig) -> Vec<f64> {
    let sd = (cfg.propensity_sd.powi(2) + cfg.noise_sd.powi(2)).sqrt();
    pain_marginals(cfg)
        .iter()
        .enumerate()
        .map(|(w, &q)| {
            let mu = seasonal(cfg, w as u32);
            (1.0 - q) * discretized_mean(mu, sd) + q * discretized_mean(mu - cfg.pain_effect, sd)
        })
        .collect()
}

fn sample_pain<R: Rng>(rng: &mut R, cfg: &GeneratorConfig, prev_had_pain: bool) -> PainLevel {
    if rng.gen_bool(cfg.pain_incidence) {
        PainLevel::NewPain
    } else if prev_had_pain && rng.gen_bool(cfg.pain_persistence) {
        PainLevel::OldPain
    } else {
        PainLevel::NoPain
    }
}

/// Generates a complete panel with known truth.
pub fn generate_synthetic(cfg: &GeneratorConfig) -> Result<(PanelDataset, TruthRecord), SimError> {
    cfg.validate()?;
    let sd_noise = cfg.noise_sd;
    let mut records = Vec::with_capacity(cfg.n_subjects * cfg.n_weeks as usize);
    for i in 0..cfg.n_subjects {
        let subject_id = format!("s{i:05}");
        let class_id = format!("c{:03}", i % cfg.n_classes);
        let gender = if i % 2 == 0 {
            Gender::Female
        } else {
            Gender::Male
        };
        let mut rng = stream(cfg.seed, 0, Stage::Sim(1), &subject_id, 0);
        let propensity = if cfg.propensity_sd > 0.0 {
            GaussDist::new(0.0, cfg.propensity_sd)
                .unwrap()
                .sample(&mut rng)
        } else {
            0.0
        };
        let gamma = Gamma::new(cfg.sport_concentration, 1.0).unwrap();
        let mut prefs: Vec<f64> = (0..cfg.n_sports).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = prefs.iter().sum();
        if total <= 0.0 {
            prefs = vec![1.0; cfg.n_sports as usize];
        }
        let mut had_pain = false;
        for w in 0..cfg.n_weeks {
            let pain = sample_pain(&mut rng, cfg, had_pain);
            had_pain = pain != PainLevel::NoPain;
            let penalty = if had_pain { cfg.pain_effect } else { 0.0 };
            let noise = if sd_noise > 0.0 {
                GaussDist::new(0.0, sd_noise).unwrap().sample(&mut rng)
            } else {
                0.0
            };
            let latent = seasonal(cfg, w) - penalty + propensity + noise;
            let freq = latent.round().clamp(0.0, f64::from(MAX_FREQUENCY)) as u8;

            let mut rec = WeekRecord::new(&subject_id, &class_id, gender, w);
            rec.pain = Some(pain);
            rec.frequency = Some(freq);
            if freq == 0 {
                rec.sports = Some(BTreeSet::new());
                rec.counts = Some(BTreeMap::new());
            } else {
                let k_raw = 1 + u32::from(rng.gen_bool(0.5)) + u32::from(rng.gen_bool(0.5));
                let k = k_raw.min(u32::from(freq)).min(u32::from(cfg.n_sports)) as usize;
                let mut weights = prefs.clone();
                let mut chosen: Vec<u8> = Vec::with_capacity(k);
                for _ in 0..k {
                    let dist = WeightedIndex::new(&weights).expect("positive weights remain");
                    let j = dist.sample(&mut rng);
                    chosen.push(j as u8 + 1);
                    weights[j] = 0.0;
                }
                let mut counts: BTreeMap<u8, u32> = chosen.iter().map(|&c| (c, 1)).collect();
                let chosen_weights: Vec<f64> =
                    chosen.iter().map(|&c| prefs[usize::from(c) - 1]).collect();
                let dist = WeightedIndex::new(&chosen_weights).unwrap();
                for _ in 0..(u32::from(freq) - k as u32) {
                    let c = chosen[dist.sample(&mut rng)];
                    *counts.get_mut(&c).unwrap() += 1;
                }
                rec.sports = Some(chosen.into_iter().collect());
                rec.counts = Some(counts);
            }
            records.push(rec);
        }
    }
    let dataset = PanelDataset::new(records, cfg.n_sports)
        .expect("generated records are structurally coherent");
    let weekly = analytic_weekly_means(cfg);
    let mean = weekly.iter().sum::<f64>() / weekly.len() as f64;
    Ok((
        dataset,
        TruthRecord {
            config: cfg.clone(),
            weekly_mean_frequency: weekly,
            mean_frequency: mean,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mechanism {
    Mcar,
    Mar,
}

/// Which cells to delete and how.
#[derive(Debug, Clone, PartialEq)]
pub struct AmputationSpec {
    pub mechanism: Mechanism,
    pub targets: BTreeSet<Variable>,
    pub rate: f64,
    /// MAR logistic tilt for new pain, old pain, and (centered) study week.
    pub mar_new_pain: f64,
    pub mar_old_pain: f64,
    pub mar_week: f64,
}

impl AmputationSpec {
    pub fn new(mechanism: Mechanism, rate: f64) -> Self {
        AmputationSpec {
            mechanism,
            targets: [Variable::Frequency, Variable::Sports, Variable::Counts]
                .into_iter()
                .collect(),
            rate,
            mar_new_pain: 1.5,
            mar_old_pain: 0.75,
            mar_week: 0.5,
        }
    }
}

/// Deleted cells, including structurally cascaded deletions.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MissMask {
    pub cells: Vec<(String, u32, Variable)>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn mar_linear(spec: &AmputationSpec, rec: &WeekRecord, n_weeks: u32) -> f64 {
    let pain_term = match rec.pain {
        Some(PainLevel::NewPain) => spec.mar_new_pain,
        Some(PainLevel::OldPain) => spec.mar_old_pain,
        _ => 0.0,
    };
    let week_term = spec.mar_week * (f64::from(rec.week) / f64::from(n_weeks.max(1)) - 0.5);
    pain_term + week_term
}

/// Calibrates the MAR intercept so the marginal deletion rate matches.
fn calibrate_intercept(
    spec: &AmputationSpec,
    dataset: &PanelDataset,
    n_weeks: u32,
) -> Result<f64, SimError> {
    let linears: Vec<f64> = dataset
        .records()
        .iter()
        .map(|r| mar_linear(spec, r, n_weeks))
        .collect();
    let mean_rate =
        |alpha: f64| linears.iter().map(|l| sigmoid(alpha + l)).sum::<f64>() / linears.len() as f64;
    let (mut lo, mut hi) = (-30.0, 30.0);
    if spec.rate <= mean_rate(lo) || spec.rate >= mean_rate(hi) {
        return Err(SimError::RateUnachievable {
            requested: spec.rate,
        });
    }
    for _ in 0..200 {
        let mid = (lo + hi) / 2.0;
        if mean_rate(mid) < spec.rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((lo + hi) / 2.0)
}

/// Deletes values from a complete dataset. Structural coherence mirrors the
/// questionnaire skip pattern: losing frequency loses sports and counts,
/// losing sports loses counts.
pub fn ampute(
    dataset: &PanelDataset,
    spec: &AmputationSpec,
    seed: u64,
) -> Result<(PanelDataset, MissMask), SimError> {
    if !(0.0..1.0).contains(&spec.rate) {
        return Err(SimError::InvalidConfig(format!(
            "missing rate must be in [0,1), got {}",
            spec.rate
        )));
    }
    let n_weeks = dataset
        .records()
        .iter()
        .map(|r| r.week)
        .max()
        .map_or(1, |w| w + 1);
    let intercept = match spec.mechanism {
        Mechanism::Mcar => 0.0,
        Mechanism::Mar => {
            if spec.rate == 0.0 {
                f64::NEG_INFINITY
            } else {
                calibrate_intercept(spec, dataset, n_weeks)?
            }
        }
    };
    let mut records = dataset.records().to_vec();
    let mut mask = MissMask::default();
    for rec in &mut records {
        let p = match spec.mechanism {
            Mechanism::Mcar => spec.rate,
            Mechanism::Mar => sigmoid(intercept + mar_linear(spec, rec, n_weeks)),
        };
        let mut rng = stream(seed, 0, Stage::Sim(2), &rec.subject_id, rec.week);
        // independent draws per targeted variable, in fixed order
        let delete = |v: Variable, rng: &mut ChaCha8Rng| {
            spec.targets.contains(&v) && p > 0.0 && rng.gen_bool(p)
        };
        let drop_freq = delete(Variable::Frequency, &mut rng);
        let drop_sports = delete(Variable::Sports, &mut rng) || drop_freq;
        let drop_counts = delete(Variable::Counts, &mut rng) || drop_sports;
        if drop_freq {
            rec.frequency = None;
            mask.cells
                .push((rec.subject_id.clone(), rec.week, Variable::Frequency));
        }
        if drop_sports {
            rec.sports = None;
            mask.cells
                .push((rec.subject_id.clone(), rec.week, Variable::Sports));
        }
        if drop_counts {
            rec.counts = None;
            mask.cells
                .push((rec.subject_id.clone(), rec.week, Variable::Counts));
        }
    }
    let amputed = PanelDataset::new(records, dataset.alphabet())
        .expect("amputation preserves structural validity");
    Ok((amputed, mask))
}

/// Imputation / analysis strategies under evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    CompleteCase,
    MeanImputation,
    Locf,
    HotDeckMi,
    HotDeckMiAbb,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::CompleteCase => "complete_case",
            Method::MeanImputation => "mean_imputation",
            Method::Locf => "locf",
            Method::HotDeckMi => "hot_deck_mi",
            Method::HotDeckMiAbb => "hot_deck_mi_abb",
        }
    }

    pub fn parse(s: &str) -> Result<Self, SimError> {
        Ok(match s {
            "complete_case" => Method::CompleteCase,
            "mean_imputation" => Method::MeanImputation,
            "locf" => Method::Locf,
            "hot_deck_mi" => Method::HotDeckMi,
            "hot_deck_mi_abb" => Method::HotDeckMiAbb,
            other => return Err(SimError::InvalidConfig(format!("unknown method {other}"))),
        })
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Aggregate performance of one method over the simulation replicates.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodReport {
    pub method: Method,
    pub bias: f64,
    pub rmse: f64,
    pub coverage: f64,
    pub mean_width: f64,
    pub n_sim: u32,
    /// Mean between-replicate variance (MI methods only).
    pub mean_between: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub truth: f64,
    pub estimand: AnalysisSpec,
    pub rows: Vec<MethodReport>,
}

impl EvaluationReport {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "estimand: {}   truth: {:.6}\n{:<18} {:>9} {:>9} {:>9} {:>9} {:>6}\n",
            self.estimand.name(),
            self.truth,
            "method",
            "bias",
            "rmse",
            "coverage",
            "width",
            "n_sim"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<18} {:>9.4} {:>9.4} {:>9.3} {:>9.4} {:>6}\n",
                r.method.name(),
                r.bias,
                r.rmse,
                r.coverage,
                r.mean_width,
                r.n_sim
            ));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "# hotdeck-evaluation v1\nmethod,bias,rmse,coverage,mean_width,n_sim,mean_between,truth\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.method.name(),
                r.bias,
                r.rmse,
                r.coverage,
                r.mean_width,
                r.n_sim,
                r.mean_between.map_or(String::from("NA"), |b| b.to_string()),
                self.truth
            ));
        }
        out
    }
}

struct MethodOutcome {
    estimate: f64,
    ci: (f64, f64),
    between: Option<f64>,
}

const Z_975: f64 = 1.959963984540054;

fn normal_ci(est: f64, var: f64) -> (f64, f64) {
    let half = Z_975 * var.max(0.0).sqrt();
    (est - half, est + half)
}

fn filled_frequency_estimate(
    dataset: &PanelDataset,
    fill: impl Fn(&PanelDataset, &str) -> Vec<Option<f64>>,
) -> MethodOutcome {
    let mut values = Vec::new();
    let mut clusters: Vec<&str> = Vec::new();
    for subject in dataset.subjects() {
        let filled = fill(dataset, subject);
        for v in filled.into_iter().flatten() {
            values.push(v);
            clusters.push(subject);
        }
    }
    let (est, var) = cluster_robust_mean(&values, &clusters);
    MethodOutcome {
        estimate: est,
        ci: normal_ci(est, var),
        between: None,
    }
}

fn apply_method(
    method: Method,
    amputed: &PanelDataset,
    estimand: &AnalysisSpec,
    mi_m: u32,
    engine_seed: u64,
) -> Result<MethodOutcome, SimError> {
    match method {
        Method::CompleteCase => {
            let (est, var) = analyze(amputed, estimand);
            Ok(MethodOutcome {
                estimate: est,
                ci: normal_ci(est, var),
                between: None,
            })
        }
        Method::MeanImputation | Method::Locf => {
            if *estimand != AnalysisSpec::MeanFrequency {
                return Err(SimError::UnsupportedMethod {
                    method: method.name().into(),
                    estimand: estimand.name(),
                });
            }
            let observed: Vec<f64> = amputed
                .records()
                .iter()
                .filter_map(|r| r.frequency.map(f64::from))
                .collect();
            let grand = observed.iter().sum::<f64>() / observed.len().max(1) as f64;
            Ok(filled_frequency_estimate(amputed, |ds, subject| {
                let freqs: Vec<Option<f64>> = ds
                    .records_of(subject)
                    .iter()
                    .map(|&i| ds.record(i).frequency.map(f64::from))
                    .collect();
                match method {
                    Method::MeanImputation => freqs
                        .into_iter()
                        .map(|f| Some(f.unwrap_or(grand)))
                        .collect(),
                    _ => locf_fill(&freqs),
                }
            }))
        }
        Method::HotDeckMi | Method::HotDeckMiAbb => {
            let config = RunConfig {
                m: mi_m,
                master_seed: engine_seed,
                abb: method == Method::HotDeckMiAbb,
                ..RunConfig::default()
            };
            let results = run_imputations(amputed, &config)?;
            let pairs: Vec<(f64, f64)> = results
                .iter()
                .map(|r| analyze(&r.dataset, estimand))
                .collect();
            let pooled = pool_estimates(&pairs).expect("m >= 2 enforced by config");
            Ok(MethodOutcome {
                estimate: pooled.q_bar,
                ci: pooled.ci_95,
                between: Some(pooled.between),
            })
        }
    }
}

/// Last observation carried forward; leading gaps carried backward. A fully
/// missing series stays missing.
fn locf_fill(values: &[Option<f64>]) -> Vec<Option<f64>> {
    let mut out = values.to_vec();
    let mut last = None;
    for v in out.iter_mut() {
        match *v {
            Some(x) => last = Some(x),
            None => *v = last,
        }
    }
    let mut next = None;
    for v in out.iter_mut().rev() {
        match *v {
            Some(x) => next = Some(x),
            None => *v = next,
        }
    }
    out
}

/// Maximum redraws of a simulation replicate whose amputed panel leaves
/// some target without any admissible donor.
const MAX_REPLICATE_REDRAWS: u32 = 32;

/// One generate → ampute → apply-every-method pass. Amputation at high
/// rates can occasionally strip a subject of every usable donor week (for
/// instance, every active week loses its activity set); such a panel is
/// unimputable by design, so the whole replicate is redrawn with fresh
/// derived seeds — every method always sees the same amputed data.
fn run_sim_replicate(
    gen: &GeneratorConfig,
    amp: &AmputationSpec,
    methods: &[Method],
    estimand: &AnalysisSpec,
    mi_m: u32,
    seed: u64,
    r: u32,
) -> Result<Vec<MethodOutcome>, SimError> {
    let mut last_no_donors = None;
    for attempt in 0..MAX_REPLICATE_REDRAWS {
        let mut gen_r = gen.clone();
        gen_r.seed = stream(seed, r, Stage::Sim(3), "gen", attempt).gen();
        let (full, _) = generate_synthetic(&gen_r)?;
        let amp_seed: u64 = stream(seed, r, Stage::Sim(4), "ampute", attempt).gen();
        let (amputed, _) = ampute(&full, amp, amp_seed)?;
        let mut outcomes = Vec::with_capacity(methods.len());
        let mut redraw = false;
        // common random numbers: every method sees the same engine seed, so
        // method comparisons are not blurred by independent draw noise
        let engine_seed: u64 = stream(seed, r, Stage::Sim(5), "engine", attempt).gen();
        for &method in methods {
            match apply_method(method, &amputed, estimand, mi_m, engine_seed) {
                Ok(outcome) => outcomes.push(outcome),
                Err(e @ SimError::Engine(EngineError::NoDonors(_))) => {
                    last_no_donors = Some(e);
                    redraw = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if !redraw {
            return Ok(outcomes);
        }
    }
    Err(last_no_donors.expect("redraw loop exits early unless NoDonors occurred"))
}

/// Runs the full generate → ampute → impute → analyze loop `n_sim` times
/// and aggregates bias, RMSE, coverage, and interval width per method.
pub fn evaluate(
    gen: &GeneratorConfig,
    amp: &AmputationSpec,
    methods: &[Method],
    n_sim: u32,
    estimand: &AnalysisSpec,
    mi_m: u32,
    seed: u64,
) -> Result<EvaluationReport, SimError> {
    if methods.is_empty() {
        return Err(SimError::InvalidConfig("no methods selected".into()));
    }
    gen.validate()?;
    let truth = match estimand {
        AnalysisSpec::MeanFrequency => {
            let weekly = analytic_weekly_means(gen);
            weekly.iter().sum::<f64>() / weekly.len() as f64
        }
        _ => {
            // no closed form: estimate on a 20× reference panel
            let mut big = gen.clone();
            big.n_subjects = gen.n_subjects * 20;
            big.seed = stream(seed, 0, Stage::Sim(7), "truth", 0).gen();
            let (reference, _) = generate_synthetic(&big)?;
            analyze(&reference, estimand).0
        }
    };

    let per_replicate: Vec<Result<Vec<MethodOutcome>, SimError>> = (0..n_sim)
        .into_par_iter()
        .map(|r| run_sim_replicate(gen, amp, methods, estimand, mi_m, seed, r))
        .collect();

    let mut outcomes: Vec<Vec<MethodOutcome>> = Vec::with_capacity(n_sim as usize);
    for r in per_replicate {
        outcomes.push(r?);
    }

    let rows = methods
        .iter()
        .enumerate()
        .map(|(k, &method)| {
            let of_method: Vec<&MethodOutcome> = outcomes.iter().map(|o| &o[k]).collect();
            let n = of_method.len() as f64;
            let bias = of_method.iter().map(|o| o.estimate - truth).sum::<f64>() / n;
            let rmse = (of_method
                .iter()
                .map(|o| (o.estimate - truth).powi(2))
                .sum::<f64>()
                / n)
                .sqrt();
            let coverage = of_method
                .iter()
                .filter(|o| o.ci.0 <= truth && truth <= o.ci.1)
                .count() as f64
                / n;
            let mean_width = of_method.iter().map(|o| o.ci.1 - o.ci.0).sum::<f64>() / n;
            let betweens: Vec<f64> = of_method.iter().filter_map(|o| o.between).collect();
            let mean_between = (!betweens.is_empty())
                .then(|| betweens.iter().sum::<f64>() / betweens.len() as f64);
            MethodReport {
                method,
                bias,
                rmse,
                coverage,
                mean_width,
                n_sim,
                mean_between,
            }
        })
        .collect();

    Ok(EvaluationReport {
        truth,
        estimand: estimand.clone(),
        rows,
    })
}
