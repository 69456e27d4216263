//! Donor-pool construction through an ordered fallback ladder.
//!
//! Matching is always within the individual. Each ladder rung pairs a match
//! predicate with a time-window radius; rungs are tried in order and the
//! first non-empty one supplies the pool. Donors get uniform selection
//! weights; [`abb_resample`] optionally resamples the pool with replacement
//! (approximate Bayesian bootstrap) before a donor is drawn, so the pool
//! itself varies between imputation replicates.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use thiserror::Error;

use crate::panel::{PainLevel, PanelDataset, SportCode, WeekRecord};

/// Time-window radius in weeks around the target, or the whole study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Radius {
    Weeks(u32),
    Unbounded,
}

impl Radius {
    fn admits(self, target_week: u32, week: u32) -> bool {
        match self {
            Radius::Unbounded => true,
            Radius::Weeks(r) => target_week.abs_diff(week) <= r,
        }
    }
}

impl std::fmt::Display for Radius {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Radius::Weeks(w) => write!(f, "{w}"),
            Radius::Unbounded => write!(f, "inf"),
        }
    }
}

/// Predicate a donor week must satisfy, materialized for one target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MatchPredicate {
    /// Same pain level as the target; donor frequency observed.
    ExactPain(PainLevel),
    /// Donor had pain (new or old); donor frequency observed.
    AnyPain,
    /// Any week with an observed frequency.
    AllEntries,
    /// Donor weeks with observed non-zero frequency and an observed activity
    /// set, closest in frequency to the target, optionally also restricted
    /// to the target's pain level.
    ClosestFrequency { target: u8, pain: Option<PainLevel> },
    /// Donor's observed activity set intersects the given non-empty subset.
    ContainsAnySport(BTreeSet<SportCode>),
}

impl MatchPredicate {
    /// Per-record filter; the pool-level minimization for `ClosestFrequency`
    /// happens in [`build_pool`].
    fn admits(&self, rec: &WeekRecord) -> bool {
        match self {
            MatchPredicate::ExactPain(p) => rec.pain == Some(*p) && rec.frequency.is_some(),
            MatchPredicate::AnyPain => {
                matches!(
                    rec.pain,
                    Some(PainLevel::NewPain) | Some(PainLevel::OldPain)
                ) && rec.frequency.is_some()
            }
            MatchPredicate::AllEntries => rec.frequency.is_some(),
            MatchPredicate::ClosestFrequency { pain, .. } => {
                matches!(rec.frequency, Some(f) if f > 0)
                    && rec.sports.is_some()
                    && pain.is_none_or(|p| rec.pain == Some(p))
            }
            MatchPredicate::ContainsAnySport(subset) => rec
                .sports
                .as_ref()
                .is_some_and(|s| s.intersection(subset).next().is_some()),
        }
    }
}

/// One fallback rung: predicate plus window radius.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rung {
    pub predicate: MatchPredicate,
    pub radius: Radius,
}

/// Candidate donors for one target. `donors` are record indices into the
/// dataset the pool was built from; after ABB resampling they may repeat.
#[derive(Debug, Clone, PartialEq)]
pub struct DonorPool {
    pub donors: Vec<usize>,
    pub rung_used: usize,
    pub weights: Vec<f64>,
}

impl DonorPool {
    fn uniform(donors: Vec<usize>, rung_used: usize) -> Self {
        let w = 1.0 / donors.len() as f64;
        let weights = vec![w; donors.len()];
        DonorPool {
            donors,
            rung_used,
            weights,
        }
    }

    /// Draws one donor record index.
    pub fn draw<R: Rng>(&self, rng: &mut R) -> usize {
        self.donors[rng.gen_range(0..self.donors.len())]
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("no donors for subject {subject} week {week}: every ladder rung empty")]
pub struct NoDonors {
    pub subject: String,
    pub week: u32,
}

/// All of the subject's records within the radius of `week`, excluding the
/// target week itself. Returns record indices; may be empty.
pub fn window(dataset: &PanelDataset, subject: &str, week: u32, radius: Radius) -> Vec<usize> {
    dataset
        .records_of(subject)
        .iter()
        .copied()
        .filter(|&i| {
            let w = dataset.record(i).week;
            w != week && radius.admits(week, w)
        })
        .collect()
}

/// Builds the donor pool for a target from the first non-empty ladder rung.
pub fn build_pool(
    dataset: &PanelDataset,
    subject: &str,
    week: u32,
    ladder: &[Rung],
) -> Result<DonorPool, NoDonors> {
    assert!(!ladder.is_empty(), "ladder must have at least one rung");
    let indices = dataset.records_of(subject);
    for (k, rung) in ladder.iter().enumerate() {
        let mut matched: Vec<usize> = Vec::new();
        for &i in indices {
            let rec = dataset.record(i);
            if rec.week != week && rung.radius.admits(week, rec.week) && rung.predicate.admits(rec)
            {
                matched.push(i);
            }
        }
        if let MatchPredicate::ClosestFrequency { target, .. } = &rung.predicate {
            let best = matched
                .iter()
                .map(|&i| dataset.record(i).frequency.unwrap().abs_diff(*target))
                .min();
            if let Some(best) = best {
                matched.retain(|&i| dataset.record(i).frequency.unwrap().abs_diff(*target) == best);
            }
        }
        if !matched.is_empty() {
            return Ok(DonorPool::uniform(matched, k));
        }
    }
    Err(NoDonors {
        subject: subject.to_string(),
        week,
    })
}

/// One bootstrap of a subject's records, shared by all of that subject's
/// donor pools within a single imputation replicate.
///
/// Resampling each pool independently right before a *single* donor draw is
/// marginally identical to drawing uniformly from the original pool, so it
/// cannot move the between-imputation variance. Sharing one bootstrap across
/// a subject's targets makes their draws within a replicate positively
/// correlated, which is what propagates donor-pool uncertainty into the
/// pooled variance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubjectBootstrap {
    multiplicity: HashMap<usize, u32>,
}

impl SubjectBootstrap {
    /// Draws `records.len()` candidates with replacement and tallies the
    /// multiplicity of each record index.
    pub fn draw<R: Rng>(records: &[usize], rng: &mut R) -> Self {
        let n = records.len();
        let mut multiplicity = HashMap::with_capacity(n);
        for _ in 0..n {
            *multiplicity
                .entry(records[rng.gen_range(0..n)])
                .or_insert(0) += 1;
        }
        SubjectBootstrap { multiplicity }
    }

    /// Restricts the bootstrap to one pool: every donor repeats according
    /// to its multiplicity. When all of a pool's donors drew multiplicity
    /// zero the original pool is kept — a pool must stay non-empty.
    pub fn resample(&self, pool: &DonorPool) -> DonorPool {
        let mut donors = Vec::with_capacity(pool.donors.len());
        for &d in &pool.donors {
            let m = self.multiplicity.get(&d).copied().unwrap_or(0);
            donors.extend(std::iter::repeat_n(d, m as usize));
        }
        if donors.is_empty() {
            return pool.clone();
        }
        DonorPool::uniform(donors, pool.rung_used)
    }
}

/// Approximate-Bayesian-bootstrap resample: draws `n = |pool|` donors with
/// replacement and uniform probability. Duplicates stay as repeated entries.
pub fn abb_resample<R: Rng>(pool: &DonorPool, rng: &mut R) -> DonorPool {
    let n = pool.donors.len();
    let donors: Vec<usize> = (0..n).map(|_| pool.donors[rng.gen_range(0..n)]).collect();
    DonorPool::uniform(donors, pool.rung_used)
}

/// Standard radii for every default ladder: ±7 (3-month period), ±12
/// (6-month), ±25 (1-year), then the entire study.
pub fn default_radii() -> Vec<Radius> {
    vec![
        Radius::Weeks(7),
        Radius::Weeks(12),
        Radius::Weeks(25),
        Radius::Unbounded,
    ]
}

/// Frequency ladder: same pain over all radii, then any pain, then all
/// entries. A target with unobserved pain starts directly at all-entries.
pub fn frequency_ladder(radii: &[Radius], target_pain: Option<PainLevel>) -> Vec<Rung> {
    let mut rungs = Vec::new();
    if let Some(p) = target_pain {
        for &r in radii {
            rungs.push(Rung {
                predicate: MatchPredicate::ExactPain(p),
                radius: r,
            });
        }
        for &r in radii {
            rungs.push(Rung {
                predicate: MatchPredicate::AnyPain,
                radius: r,
            });
        }
    }
    for &r in radii {
        rungs.push(Rung {
            predicate: MatchPredicate::AllEntries,
            radius: r,
        });
    }
    rungs
}

/// Activity-set ladder: closest frequency over all radii. With
/// `match_pain`, pain-restricted rungs come first and the unrestricted ones
/// remain as fallback.
pub fn sport_ladder(
    radii: &[Radius],
    target_frequency: u8,
    match_pain: Option<PainLevel>,
) -> Vec<Rung> {
    let mut rungs = Vec::new();
    if let Some(p) = match_pain {
        for &r in radii {
            rungs.push(Rung {
                predicate: MatchPredicate::ClosestFrequency {
                    target: target_frequency,
                    pain: Some(p),
                },
                radius: r,
            });
        }
    }
    for &r in radii {
        rungs.push(Rung {
            predicate: MatchPredicate::ClosestFrequency {
                target: target_frequency,
                pain: None,
            },
            radius: r,
        });
    }
    rungs
}

/// Count-evidence ladder: weeks sharing at least one of the target's
/// activities, over all radii.
pub fn count_ladder(radii: &[Radius], target_sports: &BTreeSet<SportCode>) -> Vec<Rung> {
    radii
        .iter()
        .map(|&r| Rung {
            predicate: MatchPredicate::ContainsAnySport(target_sports.clone()),
            radius: r,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{Gender, WeekRecord};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn week(subject: &str, w: u32, pain: Option<PainLevel>, freq: Option<u8>) -> WeekRecord {
        let mut r = WeekRecord::new(subject, "c1", Gender::Female, w);
        r.pain = pain;
        r.frequency = freq;
        r
    }

    fn ds(records: Vec<WeekRecord>) -> PanelDataset {
        PanelDataset::new(records, 10).unwrap()
    }

    #[test]
    fn window_counts_both_sides() {
        let records = (1..=15)
            .map(|w| week("s1", w, Some(PainLevel::NoPain), Some(1)))
            .collect();
        let d = ds(records);
        assert_eq!(window(&d, "s1", 8, Radius::Weeks(7)).len(), 14);
    }

    #[test]
    fn window_excludes_lone_target() {
        let d = ds(vec![week("s1", 8, None, None)]);
        assert!(window(&d, "s1", 8, Radius::Weeks(7)).is_empty());
    }

    #[test]
    fn window_hand_enumeration() {
        let d = ds(vec![
            week("s1", 1, None, Some(1)),
            week("s1", 2, None, Some(1)),
            week("s1", 3, None, None),
            week("s1", 20, None, Some(1)),
        ]);
        let got: Vec<u32> = window(&d, "s1", 3, Radius::Weeks(7))
            .into_iter()
            .map(|i| d.record(i).week)
            .collect();
        assert_eq!(got, vec![1, 2]);
    }

    #[test]
    fn exact_pain_pool_of_eight_uniform() {
        // eight no-pain weeks in ±7 of the target
        let mut records = vec![week("s1", 8, Some(PainLevel::NoPain), None)];
        for w in [1, 2, 3, 4, 5, 9, 10, 11] {
            records.push(week("s1", w, Some(PainLevel::NoPain), Some(2)));
        }
        records.push(week("s1", 12, Some(PainLevel::NewPain), Some(2)));
        records.sort_by_key(|r| r.week);
        let d = ds(records);
        let ladder = frequency_ladder(&default_radii(), Some(PainLevel::NoPain));
        let pool = build_pool(&d, "s1", 8, &ladder).unwrap();
        assert_eq!(pool.donors.len(), 8);
        assert_eq!(pool.rung_used, 0);
        assert!(pool.weights.iter().all(|&w| (w - 0.125).abs() < 1e-12));
        let sum: f64 = pool.weights.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn closest_frequency_takes_the_nearest() {
        // target frequency 2, nearby frequencies all 3+: pool = frequency-3 weeks
        let mut records = Vec::new();
        for (w, f) in [(1, 3), (2, 4), (3, 3), (5, 5)] {
            let mut r = week("s1", w, Some(PainLevel::NoPain), Some(f));
            r.sports = Some([1].into_iter().collect());
            records.push(r);
        }
        let d = ds(records);
        let ladder = sport_ladder(&default_radii(), 2, None);
        let pool = build_pool(&d, "s1", 4, &ladder).unwrap();
        let freqs: Vec<u8> = pool
            .donors
            .iter()
            .map(|&i| d.record(i).frequency.unwrap())
            .collect();
        assert_eq!(freqs, vec![3, 3]);
    }

    #[test]
    fn closest_frequency_ties_keep_both_directions() {
        let mut a = week("s1", 1, None, Some(1));
        a.sports = Some([1].into_iter().collect());
        let mut b = week("s1", 2, None, Some(3));
        b.sports = Some([2].into_iter().collect());
        let d = ds(vec![a, b]);
        let ladder = sport_ladder(&default_radii(), 2, None);
        let pool = build_pool(&d, "s1", 3, &ladder).unwrap();
        assert_eq!(pool.donors.len(), 2);
    }

    #[test]
    fn closest_frequency_skips_zero_and_missing() {
        // a rung with only zero-frequency or frequency-missing candidates is empty
        let mut zero = week("s1", 1, None, Some(0));
        zero.sports = Some(BTreeSet::new());
        let mut far = week("s1", 30, None, Some(4));
        far.sports = Some([1].into_iter().collect());
        let d = ds(vec![zero, week("s1", 2, None, None), far]);
        let ladder = sport_ladder(&default_radii(), 2, None);
        let pool = build_pool(&d, "s1", 3, &ladder).unwrap();
        assert_eq!(pool.donors.len(), 1);
        assert_eq!(d.record(pool.donors[0]).week, 30);
        assert_eq!(pool.rung_used, 3); // only the unbounded rung reaches week 30
    }

    #[test]
    fn single_record_subject_has_no_donors() {
        let d = ds(vec![week("s1", 8, Some(PainLevel::NoPain), None)]);
        let ladder = frequency_ladder(&default_radii(), Some(PainLevel::NoPain));
        let err = build_pool(&d, "s1", 8, &ladder).unwrap_err();
        assert_eq!(err.week, 8);
    }

    #[test]
    fn any_pain_fallback_engages() {
        let d = ds(vec![
            week("s1", 7, Some(PainLevel::OldPain), Some(2)),
            week("s1", 8, Some(PainLevel::NewPain), None),
        ]);
        let ladder = frequency_ladder(&default_radii(), Some(PainLevel::NewPain));
        let pool = build_pool(&d, "s1", 8, &ladder).unwrap();
        // rungs 0-3 are exact-pain, rung 4 is any-pain ±7
        assert_eq!(pool.rung_used, 4);
        assert_eq!(pool.donors.len(), 1);
    }

    #[test]
    fn contains_any_sport_requires_intersection() {
        let mut a = week("s1", 1, None, Some(2));
        a.sports = Some([3, 4].into_iter().collect());
        let mut b = week("s1", 2, None, Some(2));
        b.sports = Some([1, 5].into_iter().collect());
        let d = ds(vec![a, b]);
        let subset: BTreeSet<u8> = [1, 2].into_iter().collect();
        let pool = build_pool(&d, "s1", 3, &count_ladder(&default_radii(), &subset)).unwrap();
        assert_eq!(pool.donors.len(), 1);
        assert_eq!(d.record(pool.donors[0]).week, 2);
    }

    #[test]
    fn subject_bootstrap_shares_one_resample_across_pools() {
        let records: Vec<usize> = (0..6).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let boot = SubjectBootstrap::draw(&records, &mut rng);
        // total multiplicity equals the number of records drawn
        let a = boot.resample(&DonorPool::uniform(records.clone(), 0));
        assert_eq!(a.donors.len(), 6);
        // a sub-pool sees the same multiplicities, restricted
        let b = boot.resample(&DonorPool::uniform(vec![0, 1, 2], 1));
        for &d in &b.donors {
            assert!(d < 3);
            let in_full = a.donors.iter().filter(|&&x| x == d).count();
            let in_sub = b.donors.iter().filter(|&&x| x == d).count();
            assert_eq!(in_full, in_sub);
        }
        assert_eq!(b.rung_used, 1);
    }

    #[test]
    fn subject_bootstrap_keeps_pool_nonempty() {
        // force a bootstrap that misses the pool entirely: single record
        // pools always survive, and a disjoint pool falls back unchanged
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let boot = SubjectBootstrap::draw(&[0], &mut rng);
        let pool = DonorPool::uniform(vec![7, 8], 2);
        assert_eq!(boot.resample(&pool), pool);
    }

    #[test]
    fn abb_singleton_is_identity() {
        let pool = DonorPool::uniform(vec![7], 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(abb_resample(&pool, &mut rng), pool);
    }

    #[test]
    fn abb_is_deterministic_under_fixed_seed() {
        let pool = DonorPool::uniform(vec![1, 2, 3, 4, 5], 2);
        let a = abb_resample(&pool, &mut ChaCha8Rng::seed_from_u64(9));
        let b = abb_resample(&pool, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert_eq!(a.rung_used, 2);
        assert_eq!(a.donors.len(), 5);
    }

    #[test]
    fn abb_mean_multiplicity_is_one() {
        // binomial(n, 1/n) mean: each donor expects multiplicity 1.0
        let pool = DonorPool::uniform(vec![0, 1, 2, 3], 0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tally = [0u64; 4];
        let reps = 10_000;
        for _ in 0..reps {
            for d in abb_resample(&pool, &mut rng).donors {
                tally[d] += 1;
            }
        }
        for t in tally {
            let mean = t as f64 / reps as f64;
            assert!((mean - 1.0).abs() < 0.05, "mean multiplicity {mean}");
        }
    }

    // Property tests: every donor satisfies the rung predicate, earlier
    // rungs were empty, the target is never its own donor, and ABB keeps
    // size and membership.
    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_record(w: u32) -> impl Strategy<Value = WeekRecord> {
            (
                proptest::option::of(prop_oneof![
                    Just(PainLevel::NoPain),
                    Just(PainLevel::NewPain),
                    Just(PainLevel::OldPain)
                ]),
                proptest::option::of(0u8..=8),
                proptest::option::of(proptest::collection::btree_set(1u8..=5, 0..4)),
            )
                .prop_map(move |(pain, freq, sports)| {
                    let mut r = week("s1", w, pain, freq);
                    r.sports = sports;
                    r
                })
        }

        fn arb_panel() -> impl Strategy<Value = PanelDataset> {
            proptest::collection::vec(proptest::bool::ANY, 2..20).prop_flat_map(|mask| {
                let weeks: Vec<u32> = mask
                    .iter()
                    .enumerate()
                    .filter(|(_, &m)| m)
                    .map(|(i, _)| i as u32)
                    .collect();
                let weeks = if weeks.is_empty() { vec![0] } else { weeks };
                weeks
                    .into_iter()
                    .map(arb_record)
                    .collect::<Vec<_>>()
                    .prop_map(|records| PanelDataset::new(records, 10).unwrap())
            })
        }

        fn arb_ladder() -> impl Strategy<Value = Vec<Rung>> {
            prop_oneof![
                Just(frequency_ladder(&default_radii(), Some(PainLevel::NoPain))),
                Just(frequency_ladder(&default_radii(), None)),
                (1u8..=8).prop_map(|f| sport_ladder(&default_radii(), f, None)),
                proptest::collection::btree_set(1u8..=5, 1..3)
                    .prop_map(|s| count_ladder(&default_radii(), &s)),
            ]
        }

        proptest! {
            #[test]
            fn pool_respects_predicate_and_rung_order(d in arb_panel(), ladder in arb_ladder(), wk in 0u32..20) {
                if let Ok(pool) = build_pool(&d, "s1", wk, &ladder) {
                    let rung = &ladder[pool.rung_used];
                    for &i in &pool.donors {
                        let rec = d.record(i);
                        prop_assert_ne!(rec.week, wk);
                        prop_assert!(rung.radius.admits(wk, rec.week));
                        prop_assert!(rung.predicate.admits(rec));
                    }
                    // earlier rungs must have been empty
                    for earlier in &ladder[..pool.rung_used] {
                        let any = window(&d, "s1", wk, earlier.radius)
                            .into_iter()
                            .any(|i| earlier.predicate.admits(d.record(i)));
                        prop_assert!(!any);
                    }
                    let sum: f64 = pool.weights.iter().sum();
                    prop_assert!((sum - 1.0).abs() < 1e-12);
                }
            }

            #[test]
            fn abb_preserves_size_and_membership(seed in 0u64..1000, n in 1usize..12) {
                let pool = DonorPool::uniform((0..n).collect(), 1);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let resampled = abb_resample(&pool, &mut rng);
                prop_assert_eq!(resampled.donors.len(), n);
                prop_assert!(resampled.donors.iter().all(|d| pool.donors.contains(d)));
            }
        }
    }
}
