//! Replicate orchestration: frequency → sports → counts, M times.
//!
//! Stages run in dependency order. Frequency and sport donor pools (and the
//! peer medians) read only the originally observed data; the counts stage
//! works on the replicate in progress so that earlier imputed counts chain
//! into later evidence. Every random decision draws from a stream keyed by
//! `(master_seed, replicate, stage, subject, week)`, so a rerun with the
//! same inputs is byte-identical no matter how work is scheduled, and
//! replicates can be imputed in parallel.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use thiserror::Error;

use crate::counts::impute_counts_sequential;
use crate::donor::{default_radii, frequency_ladder, sport_ladder, Radius, SubjectBootstrap};
use crate::frequency::{
    impute_prepared, prepare_frequency, FrequencyMethod, MedianCache, PreparedFrequency,
};
use crate::panel::{validate_completed, PanelDataset, ValidationReport};
use crate::rng::{stream, Stage};
use crate::sport::{impute_sports_prepared, prepare_sports, PreparedSports};

/// Prepared sport targets shared across replicates, keyed by record index
/// and the replicate's imputed frequency; `None` caches a no-donor failure.
type SportsCache = Mutex<HashMap<(usize, u8), Option<Arc<PreparedSports>>>>;

/// Engine configuration for one run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Number of imputation replicates (≥ 2: pooling needs a between-variance).
    pub m: u32,
    pub master_seed: u64,
    /// Window radii shared by every ladder.
    pub radii: Vec<Radius>,
    pub frequency_method: FrequencyMethod,
    /// Approximate Bayesian bootstrap: per replicate, one bootstrap of each
    /// subject's records reweights all of the subject's frequency and
    /// activity-set pools, and count-evidence pools are resampled per
    /// target, so donor-pool uncertainty reaches the between-imputation
    /// variance.
    pub abb: bool,
    /// Let earlier imputed counts feed later count targets.
    pub chaining: bool,
    /// Additionally match on pain in the sport ladder (with unrestricted
    /// rungs kept as fallback).
    pub sport_match_pain: bool,
    /// Read downsampling multiplicities as counts instead of discarding them.
    pub keep_multiplicity: bool,
    /// Leave the index subject out of the peer medians.
    pub exclude_self_in_median: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            m: 20,
            master_seed: 0,
            radii: default_radii(),
            frequency_method: FrequencyMethod::Residual,
            abb: false,
            chaining: true,
            sport_match_pain: false,
            keep_multiplicity: false,
            exclude_self_in_median: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Variable {
    Frequency,
    Sports,
    Counts,
}

impl fmt::Display for Variable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variable::Frequency => "frequency",
            Variable::Sports => "sports",
            Variable::Counts => "counts",
        })
    }
}

/// One imputed cell that could not be imputed.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct TargetRef {
    pub variable: Variable,
    pub subject_id: String,
    pub week: u32,
}

impl fmt::Display for TargetRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} week {}",
            self.variable, self.subject_id, self.week
        )
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("record {subject} week {week} has a missing frequency but an observed activity set")]
    IncoherentInput { subject: String, week: u32 },
    #[error("no donors for {} target(s): {}", .0.len(), format_targets(.0))]
    NoDonors(Vec<TargetRef>),
    #[error("internal error: replicate {replicate} failed completed-dataset validation")]
    Postcondition {
        replicate: u32,
        report: ValidationReport,
    },
}

fn format_targets(targets: &[TargetRef]) -> String {
    let shown: Vec<String> = targets.iter().take(10).map(TargetRef::to_string).collect();
    let mut s = shown.join(", ");
    if targets.len() > 10 {
        s.push_str(", …");
    }
    s
}

/// One row per imputed cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProvenanceRow {
    pub replicate: u32,
    pub variable: Variable,
    pub subject_id: String,
    pub week: u32,
    /// Ladder rung that produced the pool; `None` for constraint-forced cells.
    pub rung: Option<usize>,
    pub donor_weeks: Vec<u32>,
    pub flags: Vec<&'static str>,
}

impl ProvenanceRow {
    /// Stream key material, for auditability.
    pub fn seed_id(&self) -> String {
        format!(
            "m{}/{}/{}/{}",
            self.replicate, self.variable, self.subject_id, self.week
        )
    }
}

/// One completed dataset plus its imputation log.
#[derive(Debug, Clone)]
pub struct ReplicateResult {
    pub replicate: u32,
    pub dataset: PanelDataset,
    pub provenance: Vec<ProvenanceRow>,
}

/// Runs the full staged pipeline for every replicate. Fails loudly with the
/// full target list when any target has no donors.
pub fn run_imputations(
    dataset: &PanelDataset,
    config: &RunConfig,
) -> Result<Vec<ReplicateResult>, EngineError> {
    if config.m < 2 {
        return Err(EngineError::InvalidConfig(format!(
            "m must be at least 2, got {}",
            config.m
        )));
    }
    if config.radii.is_empty() {
        return Err(EngineError::InvalidConfig("empty radius list".into()));
    }
    for rec in dataset.records() {
        if rec.frequency.is_none() && rec.sports.is_some() {
            return Err(EngineError::IncoherentInput {
                subject: rec.subject_id.clone(),
                week: rec.week,
            });
        }
    }
    let plan = build_frequency_plan(dataset, config);
    let sports_cache: SportsCache = Mutex::new(HashMap::new());
    let outcomes: Vec<Result<ReplicateResult, Vec<TargetRef>>> = (1..=config.m)
        .into_par_iter()
        .map(|m| run_replicate(dataset, config, &plan, &sports_cache, m))
        .collect();
    let mut results = Vec::with_capacity(outcomes.len());
    let mut failures: BTreeSet<TargetRef> = BTreeSet::new();
    for outcome in outcomes {
        match outcome {
            Ok(r) => results.push(r),
            Err(targets) => failures.extend(targets),
        }
    }
    if !failures.is_empty() {
        return Err(EngineError::NoDonors(failures.into_iter().collect()));
    }
    for r in &results {
        let report = validate_completed(&r.dataset);
        if !report.is_valid() {
            return Err(EngineError::Postcondition {
                replicate: r.replicate,
                report,
            });
        }
    }
    Ok(results)
}

/// One frequency target with its replicate-invariant state; `None` means the
/// ladder was exhausted and every replicate will report the same failure.
struct PlannedFrequency {
    idx: usize,
    subject: String,
    week: u32,
    prepared: Option<PreparedFrequency>,
}

/// Frequency pools and peer medians depend only on the original data, so
/// they are built once and shared by all replicates.
fn build_frequency_plan(original: &PanelDataset, config: &RunConfig) -> Vec<PlannedFrequency> {
    let mut medians = MedianCache::new();
    let mut plan = Vec::new();
    for subject in original.subjects() {
        for &idx in original.records_of(subject) {
            let rec = original.record(idx);
            if rec.frequency.is_some() {
                continue;
            }
            let ladder = frequency_ladder(&config.radii, rec.pain);
            let prepared = prepare_frequency(
                original,
                subject,
                rec.week,
                &ladder,
                config.frequency_method,
                config.exclude_self_in_median,
                &mut medians,
            )
            .ok();
            plan.push(PlannedFrequency {
                idx,
                subject: subject.clone(),
                week: rec.week,
                prepared,
            });
        }
    }
    plan
}

/// Stream key for the per-subject ABB bootstrap; real week indices never
/// come close to this value.
const ABB_BOOTSTRAP_WEEK: u32 = u32::MAX;

/// Lazily draws the bootstrap shared by every pool of `subject` in the
/// given stage of replicate `m`. The caller's `cache` holds the current
/// subject's bootstrap; stages visit subjects in order, so one slot is
/// enough.
fn subject_bootstrap<'a>(
    cache: &'a mut Option<(String, SubjectBootstrap)>,
    original: &PanelDataset,
    config: &RunConfig,
    m: u32,
    stage: Stage,
    subject: &str,
) -> &'a SubjectBootstrap {
    let stale = cache.as_ref().is_none_or(|(s, _)| s != subject);
    if stale {
        let mut rng = stream(config.master_seed, m, stage, subject, ABB_BOOTSTRAP_WEEK);
        let boot = SubjectBootstrap::draw(original.records_of(subject), &mut rng);
        *cache = Some((subject.to_string(), boot));
    }
    &cache.as_ref().expect("bootstrap just inserted").1
}

fn run_replicate(
    original: &PanelDataset,
    config: &RunConfig,
    plan: &[PlannedFrequency],
    sports_cache: &SportsCache,
    m: u32,
) -> Result<ReplicateResult, Vec<TargetRef>> {
    let mut working = original.clone();
    let mut provenance = Vec::new();
    let mut failures = Vec::new();

    // stage 1: frequency, pools and medians prepared from the original
    // data; under ABB one bootstrap of the subject's records reweights all
    // of the subject's pools in this replicate (see [`SubjectBootstrap`])
    let mut boot: Option<(String, SubjectBootstrap)> = None;
    for t in plan {
        match &t.prepared {
            Some(prep) => {
                let mut rng = stream(config.master_seed, m, Stage::Frequency, &t.subject, t.week);
                let draw = if config.abb {
                    let boot = subject_bootstrap(
                        &mut boot,
                        original,
                        config,
                        m,
                        Stage::Frequency,
                        &t.subject,
                    );
                    let resampled = PreparedFrequency {
                        pool: boot.resample(&prep.pool),
                        target_median: prep.target_median,
                        donor_medians: prep.donor_medians.clone(),
                    };
                    impute_prepared(
                        original,
                        &resampled,
                        &mut rng,
                        config.frequency_method,
                        false,
                    )
                } else {
                    impute_prepared(original, prep, &mut rng, config.frequency_method, false)
                };
                working.set_frequency(t.idx, draw.imputed);
                let mut flags = Vec::new();
                if draw.fell_back_to_direct {
                    flags.push("direct-fallback");
                }
                provenance.push(ProvenanceRow {
                    replicate: m,
                    variable: Variable::Frequency,
                    subject_id: t.subject.clone(),
                    week: t.week,
                    rung: Some(draw.rung_used),
                    donor_weeks: vec![draw.donor_week],
                    flags,
                });
            }
            None => failures.push(TargetRef {
                variable: Variable::Frequency,
                subject_id: t.subject.clone(),
                week: t.week,
            }),
        }
    }

    // stage 2: activity sets, evidence from the original data, target
    // frequencies from the working copy
    let mut boot: Option<(String, SubjectBootstrap)> = None;
    for subject in original.subjects().to_vec() {
        for &idx in original.records_of(&subject) {
            if working.record(idx).sports.is_some() {
                continue;
            }
            let week = working.record(idx).week;
            let Some(freq) = working.record(idx).frequency else {
                continue; // frequency imputation already failed here
            };
            if freq == 0 {
                working.set_sports(idx, BTreeSet::new());
                working.set_counts(idx, BTreeMap::new());
                provenance.push(ProvenanceRow {
                    replicate: m,
                    variable: Variable::Sports,
                    subject_id: subject.clone(),
                    week,
                    rung: None,
                    donor_weeks: Vec::new(),
                    flags: vec!["forced-empty"],
                });
                continue;
            }
            let prepared = {
                let mut cache = sports_cache.lock().expect("sports cache poisoned");
                match cache.get(&(idx, freq)) {
                    Some(entry) => entry.clone(),
                    None => {
                        let pain = config
                            .sport_match_pain
                            .then(|| original.record(idx).pain)
                            .flatten();
                        let ladder = sport_ladder(&config.radii, freq, pain);
                        let entry = prepare_sports(original, &subject, week, freq, &ladder)
                            .ok()
                            .map(Arc::new);
                        cache.insert((idx, freq), entry.clone());
                        entry
                    }
                }
            };
            let mut rng = stream(config.master_seed, m, Stage::Sports, &subject, week);
            match prepared {
                Some(prep) => {
                    let draw = if config.abb {
                        let boot = subject_bootstrap(
                            &mut boot,
                            original,
                            config,
                            m,
                            Stage::Sports,
                            &subject,
                        );
                        let resampled = prep.with_pool(boot.resample(&prep.pool));
                        impute_sports_prepared(
                            original,
                            &resampled,
                            freq,
                            &mut rng,
                            false,
                            config.keep_multiplicity,
                        )
                    } else {
                        impute_sports_prepared(
                            original,
                            &prep,
                            freq,
                            &mut rng,
                            false,
                            config.keep_multiplicity,
                        )
                    };
                    working.set_sports(idx, draw.sports.clone());
                    let mut flags = Vec::new();
                    if draw.widened_window {
                        flags.push("widened-window");
                    }
                    if draw.uniform_fallback {
                        flags.push("uniform-fallback");
                    }
                    if let Some(counts) = draw.forced_counts {
                        working.set_counts(idx, counts);
                        flags.push("forced-counts");
                    }
                    provenance.push(ProvenanceRow {
                        replicate: m,
                        variable: Variable::Sports,
                        subject_id: subject.clone(),
                        week,
                        rung: Some(draw.rung_used),
                        donor_weeks: vec![draw.donor_week],
                        flags,
                    });
                }
                None => failures.push(TargetRef {
                    variable: Variable::Sports,
                    subject_id: subject.clone(),
                    week,
                }),
            }
        }
    }

    // stage 3: counts, chronological per subject, chained within the replicate
    for subject in original.subjects().to_vec() {
        let mut target_weeks = Vec::new();
        for &idx in original.records_of(&subject) {
            let rec = working.record(idx);
            if rec.counts.is_some() {
                continue;
            }
            let Some(sports) = &rec.sports else {
                continue; // upstream failure already recorded
            };
            if sports.is_empty() {
                let week = rec.week;
                working.set_counts(idx, BTreeMap::new());
                provenance.push(ProvenanceRow {
                    replicate: m,
                    variable: Variable::Counts,
                    subject_id: subject.clone(),
                    week,
                    rung: None,
                    donor_weeks: Vec::new(),
                    flags: vec!["forced-empty"],
                });
            } else {
                target_weeks.push(rec.week);
            }
        }
        if target_weeks.is_empty() {
            continue;
        }
        let master = config.master_seed;
        let draws = impute_counts_sequential(
            &mut working,
            &subject,
            &target_weeks,
            &config.radii,
            |week| stream(master, m, Stage::Counts, &subject, week),
            config.abb,
            config.chaining,
            false,
        );
        for (week, draw) in target_weeks.into_iter().zip(draws) {
            let mut flags = Vec::new();
            if draw.uniform_fallback {
                flags.push("uniform-fallback");
            }
            if draw.rung_used.is_none() && !draw.uniform_fallback {
                flags.push("forced-counts");
            }
            provenance.push(ProvenanceRow {
                replicate: m,
                variable: Variable::Counts,
                subject_id: subject.clone(),
                week,
                rung: draw.rung_used,
                donor_weeks: draw.donor_weeks,
                flags,
            });
        }
    }

    if failures.is_empty() {
        Ok(ReplicateResult {
            replicate: m,
            dataset: working,
            provenance,
        })
    } else {
        Err(failures)
    }
}
