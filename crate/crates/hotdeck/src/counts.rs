//! Distributing a known frequency over a known activity set.
//!
//! Every listed activity was performed at least once, so each starts from a
//! base count of one and only `frequency − |activities|` remaining sessions
//! are sampled. Sampling probabilities come from nearby weeks sharing at
//! least one of the target's activities: observed counts where present,
//! average-count temporaries (frequency divided equally over the week's
//! activities) where counts are missing. Temporaries only ever feed the
//! probability table; they are never written back. Missing weeks are
//! processed in chronological order, and counts imputed for an earlier week
//! become evidence for later ones within the same replicate.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use crate::donor::{abb_resample, build_pool, count_ladder, Radius, Rung};
use crate::frequency::Rational;
use crate::panel::{PanelDataset, SportCode};
use crate::sport::SportProbabilityTable;

/// Where one evidence week's contribution came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvidenceSource {
    Observed,
    AverageTemporary,
}

/// One donor week's contribution to the probability table, restricted to
/// the target's activities.
#[derive(Debug, Clone, PartialEq)]
pub struct CountEvidenceWeek {
    pub week: u32,
    pub source: EvidenceSource,
    pub contributions: BTreeMap<SportCode, Rational>,
}

/// Target of one count imputation; fields are read from the working record.
#[derive(Debug, Clone)]
pub struct CountTarget<'a> {
    pub subject: &'a str,
    pub week: u32,
    pub frequency: u8,
    pub sports: &'a BTreeSet<SportCode>,
}

/// Outcome of one count imputation, with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct CountDraw {
    pub counts: BTreeMap<SportCode, u32>,
    /// `None` when no sampling was needed (`frequency == |activities|`).
    pub rung_used: Option<usize>,
    pub table: Option<SportProbabilityTable>,
    /// Weeks of the evidence pool (with multiplicity after ABB).
    pub donor_weeks: Vec<u32>,
    /// Per-week contribution detail; filled only on request.
    pub evidence: Vec<CountEvidenceWeek>,
    /// Ladder exhausted or evidence summed to zero: uniform probabilities.
    pub uniform_fallback: bool,
}

/// Imputes the per-activity counts for one target. Never fails: an empty
/// ladder result degrades to uniform probabilities over the target's
/// activities. The `r = 0` path consumes no randomness. With
/// `collect_evidence` the draw carries the full per-week contribution table
/// (for audit and tests); the imputed counts are identical either way.
pub fn impute_counts<R: Rng>(
    evidence: &PanelDataset,
    target: &CountTarget<'_>,
    radii: &[Radius],
    rng: &mut R,
    abb: bool,
    collect_evidence: bool,
) -> CountDraw {
    assert!(!target.sports.is_empty());
    assert!(u32::from(target.frequency) >= target.sports.len() as u32);
    let mut counts: BTreeMap<SportCode, u32> = target.sports.iter().map(|&c| (c, 1)).collect();
    let remaining = u32::from(target.frequency) - target.sports.len() as u32;
    if remaining == 0 {
        return CountDraw {
            counts,
            rung_used: None,
            table: None,
            donor_weeks: Vec::new(),
            evidence: Vec::new(),
            uniform_fallback: false,
        };
    }

    let ladder: Vec<Rung> = count_ladder(radii, target.sports);
    let mut rung_used = None;
    let mut donor_weeks = Vec::new();
    let mut evidence_weeks = Vec::new();
    let mut uniform_fallback = false;
    let table = match build_pool(evidence, target.subject, target.week, &ladder) {
        Err(_) => {
            uniform_fallback = true;
            SportProbabilityTable::uniform(target.sports)
        }
        Ok(mut pool) => {
            if abb {
                pool = abb_resample(&pool, rng);
            }
            rung_used = Some(pool.rung_used);
            let mut totals: BTreeMap<SportCode, Rational> = BTreeMap::new();
            for &i in &pool.donors {
                let rec = evidence.record(i);
                let sports = rec.sports.as_ref().expect("pool donors have activity sets");
                donor_weeks.push(rec.week);
                let source = match &rec.counts {
                    Some(c) => {
                        for (code, &n) in c {
                            if target.sports.contains(code) {
                                *totals.entry(*code).or_insert_with(|| Rational::new(0, 1)) +=
                                    Rational::from_integer(i64::from(n));
                            }
                        }
                        EvidenceSource::Observed
                    }
                    None => {
                        // frequency divided equally over the week's activities
                        if let (Some(f), false) = (rec.frequency, sports.is_empty()) {
                            let share = Rational::new(i64::from(f), sports.len() as i64);
                            for code in sports {
                                if target.sports.contains(code) {
                                    *totals.entry(*code).or_insert_with(|| Rational::new(0, 1)) +=
                                        share;
                                }
                            }
                        }
                        EvidenceSource::AverageTemporary
                    }
                };
                if collect_evidence {
                    let contributions: BTreeMap<SportCode, Rational> = match &rec.counts {
                        Some(c) => c
                            .iter()
                            .filter(|(code, _)| target.sports.contains(code))
                            .map(|(&code, &n)| (code, Rational::from_integer(i64::from(n))))
                            .collect(),
                        None => rec
                            .frequency
                            .filter(|_| !sports.is_empty())
                            .map(|f| {
                                let share = Rational::new(i64::from(f), sports.len() as i64);
                                sports
                                    .iter()
                                    .filter(|c| target.sports.contains(c))
                                    .map(|&c| (c, share))
                                    .collect()
                            })
                            .unwrap_or_default(),
                    };
                    evidence_weeks.push(CountEvidenceWeek {
                        week: rec.week,
                        source,
                        contributions,
                    });
                }
            }
            let grand: Rational = totals.values().copied().sum();
            if grand <= Rational::new(0, 1) {
                uniform_fallback = true;
                SportProbabilityTable::uniform(target.sports)
            } else {
                let (support, probs) = totals.into_iter().map(|(c, t)| (c, t / grand)).unzip();
                SportProbabilityTable { support, probs }
            }
        }
    };

    for code in table.draw_with_replacement(remaining, rng) {
        *counts
            .get_mut(&code)
            .expect("table support ⊆ target activities") += 1;
    }
    CountDraw {
        counts,
        rung_used,
        table: Some(table),
        donor_weeks,
        evidence: evidence_weeks,
        uniform_fallback,
    }
}

/// Processes a subject's missing-count weeks in chronological order,
/// writing each result into `working`. With `chaining`, counts imputed for
/// an earlier week are evidence for later ones; without it, every target
/// sees only the counts present when the stage started.
#[allow(clippy::too_many_arguments)]
pub fn impute_counts_sequential<R, F>(
    working: &mut PanelDataset,
    subject: &str,
    target_weeks: &[u32],
    radii: &[Radius],
    mut rng_for: F,
    abb: bool,
    chaining: bool,
    collect_evidence: bool,
) -> Vec<CountDraw>
where
    R: Rng,
    F: FnMut(u32) -> R,
{
    debug_assert!(target_weeks.windows(2).all(|w| w[0] < w[1]));
    let snapshot = (!chaining).then(|| working.clone());
    let mut draws = Vec::with_capacity(target_weeks.len());
    for &week in target_weeks {
        let idx = working
            .record_at(subject, week)
            .expect("target week exists");
        let rec = working.record(idx);
        let sports = rec.sports.clone().expect("counts stage runs after sports");
        let frequency = rec.frequency.expect("counts stage runs after frequency");
        let target = CountTarget {
            subject,
            week,
            frequency,
            sports: &sports,
        };
        let mut rng = rng_for(week);
        let draw = match &snapshot {
            Some(snap) => impute_counts(snap, &target, radii, &mut rng, abb, collect_evidence),
            None => impute_counts(working, &target, radii, &mut rng, abb, collect_evidence),
        };
        working.set_counts(idx, draw.counts.clone());
        draws.push(draw);
    }
    draws
}
