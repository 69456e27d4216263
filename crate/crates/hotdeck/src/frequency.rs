//! Activity-frequency imputation.
//!
//! The residual method treats the gender-specific median frequency of the
//! subject's school class as a week-level fixed effect: a donor week is
//! sampled from the ladder pool, the donor's residual (donor frequency minus
//! the class median in the donor week) is carried over, and the imputed
//! value is the class median in the missing week plus that residual. Medians
//! can be half-integers, so the sum is rounded half away from zero and
//! clamped to the valid range. The direct method simply copies the donor's
//! frequency, and is also the per-target fallback whenever one of the two
//! medians is undefined.

use std::collections::HashMap;

use num_rational::Rational64;
use rand::Rng;

use crate::donor::{abb_resample, build_pool, DonorPool, NoDonors, Rung};
use crate::panel::{Gender, PanelDataset, MAX_FREQUENCY};

pub type Rational = Rational64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrequencyMethod {
    /// Peer-median residual transfer.
    Residual,
    /// Copy the donor's frequency.
    Direct,
}

/// Full provenance of one imputed frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyDraw {
    pub donor_week: u32,
    pub donor_frequency: u8,
    pub donor_median: Option<Rational>,
    pub target_median: Option<Rational>,
    pub residual: Option<Rational>,
    pub imputed: u8,
    pub rung_used: usize,
    /// Residual method fell back to direct sampling because a median was
    /// undefined.
    pub fell_back_to_direct: bool,
}

/// Median of observed frequencies among subjects of the given class and
/// gender in that week; `None` when no observed value exists. Even-sized
/// sets take the midpoint of the two central values.
pub fn median_class_frequency(
    dataset: &PanelDataset,
    class_id: &str,
    gender: Gender,
    week: u32,
) -> Option<Rational> {
    median_class_frequency_excluding(dataset, class_id, gender, week, None)
}

/// As [`median_class_frequency`], optionally leaving one subject out.
pub fn median_class_frequency_excluding(
    dataset: &PanelDataset,
    class_id: &str,
    gender: Gender,
    week: u32,
    exclude_subject: Option<&str>,
) -> Option<Rational> {
    let mut values: Vec<u8> = dataset
        .peers(class_id, gender)
        .iter()
        .filter(|s| exclude_subject != Some(s.as_str()))
        .filter_map(|s| dataset.record_at(s, week))
        .filter_map(|i| dataset.record(i).frequency)
        .collect();
    if values.is_empty() {
        return None;
    }
    values.sort_unstable();
    let n = values.len();
    let mid = n / 2;
    Some(if n % 2 == 1 {
        Rational::from_integer(i64::from(values[mid]))
    } else {
        Rational::new(i64::from(values[mid - 1]) + i64::from(values[mid]), 2)
    })
}

/// Rounds half away from zero.
pub fn round_half_away(r: Rational) -> i64 {
    let n = r.numer().abs();
    let d = *r.denom();
    let rounded = (2 * n + d) / (2 * d);
    if *r.numer() < 0 {
        -rounded
    } else {
        rounded
    }
}

fn clamp_frequency(raw: i64) -> u8 {
    raw.clamp(0, i64::from(MAX_FREQUENCY)) as u8
}

/// Memoizes peer medians by `(class, gender, week)`. Only the no-exclusion
/// medians are cached; leave-one-out queries depend on the subject and are
/// computed directly.
#[derive(Debug, Default)]
pub struct MedianCache {
    by_class: HashMap<String, HashMap<(Gender, u32), Option<Rational>>>,
}

impl MedianCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn median(
        &mut self,
        dataset: &PanelDataset,
        class_id: &str,
        gender: Gender,
        week: u32,
        exclude_subject: Option<&str>,
    ) -> Option<Rational> {
        if exclude_subject.is_some() {
            return median_class_frequency_excluding(
                dataset,
                class_id,
                gender,
                week,
                exclude_subject,
            );
        }
        if let Some(per_class) = self.by_class.get(class_id) {
            if let Some(&m) = per_class.get(&(gender, week)) {
                return m;
            }
        }
        let m = median_class_frequency(dataset, class_id, gender, week);
        self.by_class
            .entry(class_id.to_owned())
            .or_default()
            .insert((gender, week), m);
        m
    }
}

/// The replicate-invariant part of one frequency imputation: the donor pool
/// and every median the draw could need. Building this once and drawing from
/// it M times gives the same results as M calls to [`impute_frequency`].
#[derive(Debug, Clone)]
pub struct PreparedFrequency {
    pub pool: DonorPool,
    pub target_median: Option<Rational>,
    /// Peer median at each distinct donor week in the pool.
    pub donor_medians: HashMap<u32, Option<Rational>>,
}

/// Builds the pool and looks up the medians for one target.
pub fn prepare_frequency(
    dataset: &PanelDataset,
    subject: &str,
    week: u32,
    ladder: &[Rung],
    method: FrequencyMethod,
    exclude_self_in_median: bool,
    medians: &mut MedianCache,
) -> Result<PreparedFrequency, NoDonors> {
    let pool = build_pool(dataset, subject, week, ladder)?;
    let mut prepared = PreparedFrequency {
        pool,
        target_median: None,
        donor_medians: HashMap::new(),
    };
    if method == FrequencyMethod::Direct {
        return Ok(prepared);
    }
    let info = dataset
        .subject_info(subject)
        .expect("target subject is on the roster");
    let exclude = exclude_self_in_median.then_some(subject);
    prepared.target_median = medians.median(dataset, &info.class_id, info.gender, week, exclude);
    for &i in &prepared.pool.donors {
        let donor_week = dataset.record(i).week;
        prepared.donor_medians.entry(donor_week).or_insert_with(|| {
            medians.median(dataset, &info.class_id, info.gender, donor_week, exclude)
        });
    }
    Ok(prepared)
}

/// Draws a donor from a prepared target and applies the method.
pub fn impute_prepared<R: Rng>(
    dataset: &PanelDataset,
    prepared: &PreparedFrequency,
    rng: &mut R,
    method: FrequencyMethod,
    abb: bool,
) -> FrequencyDraw {
    let donor_idx = if abb {
        abb_resample(&prepared.pool, rng).draw(rng)
    } else {
        prepared.pool.draw(rng)
    };
    let donor = dataset.record(donor_idx);
    let donor_frequency = donor
        .frequency
        .expect("ladder predicates require an observed donor frequency");
    let mut draw = FrequencyDraw {
        donor_week: donor.week,
        donor_frequency,
        donor_median: None,
        target_median: None,
        residual: None,
        imputed: donor_frequency,
        rung_used: prepared.pool.rung_used,
        fell_back_to_direct: false,
    };
    if method == FrequencyMethod::Direct {
        return draw;
    }
    draw.target_median = prepared.target_median;
    draw.donor_median = prepared.donor_medians[&donor.week];
    match (draw.target_median, draw.donor_median) {
        (Some(tm), Some(dm)) => {
            let residual = Rational::from_integer(i64::from(donor_frequency)) - dm;
            draw.residual = Some(residual);
            draw.imputed = clamp_frequency(round_half_away(tm + residual));
        }
        _ => {
            // median unavailable: direct sampling for this target
            draw.fell_back_to_direct = true;
        }
    }
    draw
}

/// Imputes one missing frequency. The ladder must already be materialized
/// for this target (see [`crate::donor::frequency_ladder`]).
#[allow(clippy::too_many_arguments)]
pub fn impute_frequency<R: Rng>(
    dataset: &PanelDataset,
    subject: &str,
    week: u32,
    ladder: &[Rung],
    rng: &mut R,
    method: FrequencyMethod,
    abb: bool,
    exclude_self_in_median: bool,
) -> Result<FrequencyDraw, NoDonors> {
    let mut medians = MedianCache::new();
    let prepared = prepare_frequency(
        dataset,
        subject,
        week,
        ladder,
        method,
        exclude_self_in_median,
        &mut medians,
    )?;
    Ok(impute_prepared(dataset, &prepared, rng, method, abb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::donor::{default_radii, frequency_ladder};
    use crate::panel::{PainLevel, WeekRecord};
    use crate::stats::chi_square_gof;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn observed(subject: &str, week: u32, freq: u8) -> WeekRecord {
        let mut r = WeekRecord::new(subject, "c1", Gender::Female, week);
        r.pain = Some(PainLevel::NoPain);
        r.frequency = Some(freq);
        r
    }

    fn missing(subject: &str, week: u32) -> WeekRecord {
        let mut r = WeekRecord::new(subject, "c1", Gender::Female, week);
        r.pain = Some(PainLevel::NoPain);
        r
    }

    fn panel(mut records: Vec<WeekRecord>) -> PanelDataset {
        records.sort_by_key(|r| (r.subject_id.clone(), r.week));
        PanelDataset::new(records, 10).unwrap()
    }

    /// Independent sort-and-midpoint oracle.
    fn median_oracle(mut values: Vec<u8>) -> Option<f64> {
        if values.is_empty() {
            return None;
        }
        values.sort_unstable();
        let n = values.len();
        Some(if n % 2 == 1 {
            f64::from(values[n / 2])
        } else {
            (f64::from(values[n / 2 - 1]) + f64::from(values[n / 2])) / 2.0
        })
    }

    #[test]
    fn median_singleton() {
        let d = panel(vec![observed("p1", 3, 2)]);
        assert_eq!(
            median_class_frequency(&d, "c1", Gender::Female, 3),
            Some(Rational::from_integer(2))
        );
    }

    #[test]
    fn median_even_set_takes_midpoint() {
        let d = panel(vec![
            observed("p1", 3, 1),
            observed("p2", 3, 2),
            observed("p3", 3, 4),
            observed("p4", 3, 6),
        ]);
        let got = median_class_frequency(&d, "c1", Gender::Female, 3).unwrap();
        let expect = median_oracle(vec![1, 2, 4, 6]).unwrap();
        assert_eq!(got, Rational::new(3, 1));
        assert!((*got.numer() as f64 / *got.denom() as f64 - expect).abs() < 1e-12);
    }

    #[test]
    fn median_none_without_observed_peers() {
        let d = panel(vec![missing("p1", 3)]);
        assert_eq!(median_class_frequency(&d, "c1", Gender::Female, 3), None);
    }

    #[test]
    fn median_respects_gender_and_exclusion() {
        let mut male = observed("m1", 3, 8);
        male.gender = Gender::Male;
        let d = panel(vec![observed("p1", 3, 2), observed("p2", 3, 4), male]);
        assert_eq!(
            median_class_frequency(&d, "c1", Gender::Female, 3),
            Some(Rational::from_integer(3))
        );
        assert_eq!(
            median_class_frequency_excluding(&d, "c1", Gender::Female, 3, Some("p1")),
            Some(Rational::from_integer(4))
        );
    }

    #[test]
    fn round_half_away_from_zero() {
        assert_eq!(round_half_away(Rational::new(5, 2)), 3);
        assert_eq!(round_half_away(Rational::new(-5, 2)), -3);
        assert_eq!(round_half_away(Rational::new(7, 3)), 2);
        assert_eq!(round_half_away(Rational::from_integer(4)), 4);
    }

    /// Residual transfer: donor residual +1 added to a missing-week median
    /// of 2 imputes 3.
    #[test]
    fn residual_method_reproduces_the_worked_example() {
        let d = panel(vec![
            observed("s1", 7, 3),
            missing("s1", 8),
            observed("p1", 7, 2),
            observed("p2", 7, 2),
            observed("p1", 8, 2),
            observed("p2", 8, 2),
        ]);
        let ladder = frequency_ladder(&default_radii(), Some(PainLevel::NoPain));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let draw = impute_frequency(
            &d,
            "s1",
            8,
            &ladder,
            &mut rng,
            FrequencyMethod::Residual,
            false,
            false,
        )
        .unwrap();
        // single donor: week 7, frequency 3, donor median {2,2,3} = 2
        assert_eq!(draw.donor_week, 7);
        assert_eq!(draw.residual, Some(Rational::from_integer(1)));
        assert_eq!(draw.target_median, Some(Rational::from_integer(2)));
        assert_eq!(draw.imputed, 3);
        assert!(!draw.fell_back_to_direct);
    }

    #[test]
    fn zero_residual_imputes_rounded_target_median() {
        let d = panel(vec![
            observed("s1", 7, 2),
            missing("s1", 8),
            observed("p1", 7, 2),
            observed("p1", 8, 5),
        ]);
        let ladder = frequency_ladder(&default_radii(), Some(PainLevel::NoPain));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let draw = impute_frequency(
            &d,
            "s1",
            8,
            &ladder,
            &mut rng,
            FrequencyMethod::Residual,
            false,
            false,
        )
        .unwrap();
        assert_eq!(draw.residual, Some(Rational::from_integer(0)));
        assert_eq!(draw.imputed, 5);
    }

    #[test]
    fn out_of_range_sum_clamps_to_top_code() {
        // target median 7.5, residual +1.5: raw 9 rounds then clamps to 8
        let d = panel(vec![
            observed("s1", 7, 8),
            missing("s1", 8),
            observed("p1", 7, 7),
            observed("p2", 7, 6),
            observed("p3", 7, 5),
            observed("p1", 8, 7),
            observed("p2", 8, 8),
        ]);
        let ladder = frequency_ladder(&default_radii(), Some(PainLevel::NoPain));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let draw = impute_frequency(
            &d,
            "s1",
            8,
            &ladder,
            &mut rng,
            FrequencyMethod::Residual,
            false,
            false,
        )
        .unwrap();
        assert_eq!(draw.target_median, Some(Rational::new(15, 2)));
        assert_eq!(draw.residual, Some(Rational::new(3, 2)));
        assert_eq!(draw.imputed, 8);
    }

    #[test]
    fn negative_sum_clamps_to_zero() {
        let d = panel(vec![
            observed("s1", 7, 0),
            missing("s1", 8),
            observed("p1", 7, 6),
            observed("p1", 8, 1),
        ]);
        let ladder = frequency_ladder(&default_radii(), Some(PainLevel::NoPain));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let draw = impute_frequency(
            &d,
            "s1",
            8,
            &ladder,
            &mut rng,
            FrequencyMethod::Residual,
            false,
            false,
        )
        .unwrap();
        // donor median {0, 6} = 3, residual −3, target median 1, raw −2
        assert_eq!(draw.imputed, 0);
    }

    #[test]
    fn undefined_median_falls_back_to_direct() {
        // subject alone in the class-gender stratum: target median undefined
        let d = panel(vec![observed("s1", 7, 4), missing("s1", 8)]);
        let ladder = frequency_ladder(&default_radii(), Some(PainLevel::NoPain));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let draw = impute_frequency(
            &d,
            "s1",
            8,
            &ladder,
            &mut rng,
            FrequencyMethod::Residual,
            false,
            true, // excluding self leaves no peer values anywhere
        )
        .unwrap();
        assert!(draw.fell_back_to_direct);
        assert_eq!(draw.imputed, 4);
    }

    #[test]
    fn direct_method_only_returns_recorded_values() {
        let mut records = vec![missing("s1", 10)];
        for (w, f) in [(5, 1), (6, 4), (7, 4), (12, 7)] {
            records.push(observed("s1", w, f));
        }
        let d = panel(records);
        let ladder = frequency_ladder(&default_radii(), Some(PainLevel::NoPain));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let draw = impute_frequency(
                &d,
                "s1",
                10,
                &ladder,
                &mut rng,
                FrequencyMethod::Direct,
                false,
                false,
            )
            .unwrap();
            assert!([1u8, 4, 7].contains(&draw.imputed));
        }
    }

    #[test]
    fn donor_selection_is_uniform_over_the_pool() {
        let mut records = vec![missing("s1", 10)];
        for (w, f) in [(6, 1), (7, 2), (8, 3), (9, 4)] {
            records.push(observed("s1", w, f));
        }
        let d = panel(records);
        let ladder = frequency_ladder(&default_radii(), Some(PainLevel::NoPain));
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut tally = [0u64; 4];
        for _ in 0..10_000 {
            let draw = impute_frequency(
                &d,
                "s1",
                10,
                &ladder,
                &mut rng,
                FrequencyMethod::Direct,
                false,
                false,
            )
            .unwrap();
            tally[usize::from(draw.imputed) - 1] += 1;
        }
        let (_, p) = chi_square_gof(&tally, &[0.25; 4]);
        assert!(p > 0.01, "p = {p}");
    }

    #[test]
    fn imputed_is_a_deterministic_function_of_the_donor() {
        let d = panel(vec![
            observed("s1", 7, 3),
            missing("s1", 8),
            observed("p1", 7, 2),
            observed("p1", 8, 2),
        ]);
        let ladder = frequency_ladder(&default_radii(), Some(PainLevel::NoPain));
        for seed in 0..8 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let draw = impute_frequency(
                &d,
                "s1",
                8,
                &ladder,
                &mut rng,
                FrequencyMethod::Residual,
                false,
                false,
            )
            .unwrap();
            // singleton pool: every seed must force the same outcome
            assert_eq!(draw.imputed, 3);
        }
    }
}
