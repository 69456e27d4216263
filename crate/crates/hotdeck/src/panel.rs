//! Longitudinal panel data model and constraint validation.
//!
//! A [`PanelDataset`] holds one [`WeekRecord`] per subject-week. Pain,
//! frequency, the activity set, and per-activity counts may each be missing.
//! The hard constraints between them (activity count ≤ frequency, counts ≥ 1
//! per played activity, counts summing to the frequency) are checked by
//! [`validate_record`]; [`validate_completed`] additionally requires that no
//! field is missing and is the postcondition gate for every imputation
//! replicate.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

/// Composite weekly pain level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PainLevel {
    /// No pain in any body location.
    NoPain,
    /// New pain in at least one body location.
    NewPain,
    /// Old pain in at least one location and no new pain.
    OldPain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Gender {
    Female,
    Male,
}

/// Weekly activity frequency is top-coded: 8 means "8 or more".
pub const MAX_FREQUENCY: u8 = 8;

/// Activity code (1-based, within the dataset's declared alphabet).
pub type SportCode = u8;

/// One subject-week. `None` encodes a missing response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeekRecord {
    pub subject_id: String,
    pub class_id: String,
    pub gender: Gender,
    pub week: u32,
    pub pain: Option<PainLevel>,
    pub frequency: Option<u8>,
    pub sports: Option<BTreeSet<SportCode>>,
    pub counts: Option<BTreeMap<SportCode, u32>>,
}

impl WeekRecord {
    pub fn new(subject_id: &str, class_id: &str, gender: Gender, week: u32) -> Self {
        WeekRecord {
            subject_id: subject_id.to_string(),
            class_id: class_id.to_string(),
            gender,
            week,
            pain: None,
            frequency: None,
            sports: None,
            counts: None,
        }
    }
}

/// Violated-constraint codes. Violations are data, not failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConstraintCode {
    /// Frequency outside [0, 8] or an activity code outside the alphabet.
    Range,
    /// |sports| > frequency.
    SetSizeVsFrequency,
    /// Counts do not sum to the frequency.
    CountSum,
    /// A count below 1 for a played activity.
    CountPositivity,
    /// Frequency 0 with a non-empty activity set.
    ZeroFrequencyEmptySet,
    /// Count keys differ from the activity set.
    CountKeys,
    /// A missing field (reported by completed-dataset validation only).
    MissingField,
}

impl fmt::Display for ConstraintCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ConstraintCode::Range => "range",
            ConstraintCode::SetSizeVsFrequency => "set-size-vs-frequency",
            ConstraintCode::CountSum => "count-sum",
            ConstraintCode::CountPositivity => "count-positivity",
            ConstraintCode::ZeroFrequencyEmptySet => "zero-frequency-empty-set",
            ConstraintCode::CountKeys => "count-keys",
            ConstraintCode::MissingField => "missing-field",
        };
        f.write_str(s)
    }
}

/// One violation located in a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub subject_id: String,
    pub week: u32,
    pub code: ConstraintCode,
}

/// Aggregated validation outcome; empty means valid.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks one record against the constraint set. Missing fields skip only
/// the constraints that reference them.
pub fn validate_record(record: &WeekRecord, alphabet: u8) -> Vec<ConstraintCode> {
    let mut out = Vec::new();
    if let Some(f) = record.frequency {
        if f > MAX_FREQUENCY {
            out.push(ConstraintCode::Range);
        }
    }
    if let Some(sports) = &record.sports {
        if sports.iter().any(|&s| s < 1 || s > alphabet) {
            out.push(ConstraintCode::Range);
        }
        if let Some(f) = record.frequency {
            if sports.len() as u32 > u32::from(f) {
                out.push(ConstraintCode::SetSizeVsFrequency);
            }
            if f == 0 && !sports.is_empty() {
                out.push(ConstraintCode::ZeroFrequencyEmptySet);
            }
        }
    }
    if let Some(counts) = &record.counts {
        if let Some(sports) = &record.sports {
            let keys: BTreeSet<SportCode> = counts.keys().copied().collect();
            if keys != *sports {
                out.push(ConstraintCode::CountKeys);
            }
        }
        if counts.values().any(|&c| c < 1) {
            out.push(ConstraintCode::CountPositivity);
        }
        if let Some(f) = record.frequency {
            let sum: u32 = counts.values().sum();
            if sum != u32::from(f) {
                out.push(ConstraintCode::CountSum);
            }
        }
    }
    out
}

/// Roster entry for one subject.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubjectInfo {
    pub class_id: String,
    pub gender: Gender,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("duplicate record for subject {subject} week {week}")]
    DuplicateWeek { subject: String, week: u32 },
    #[error("records for subject {subject} are not in increasing week order")]
    WeekOrder { subject: String },
    #[error("subject {subject} appears with inconsistent class or gender")]
    RosterMismatch { subject: String },
    #[error("record for subject {subject} week {week} has counts but no activity set")]
    CountsWithoutSports { subject: String, week: u32 },
}

/// Lookup structures over the records. Keys (subject, week) never change
/// after construction, so the engine's per-replicate working copies share
/// one index and only clone the records.
#[derive(Debug)]
struct DatasetIndex {
    roster: HashMap<String, SubjectInfo>,
    /// Subject ids in first-appearance order; fixes iteration order.
    subject_order: Vec<String>,
    by_subject: HashMap<String, Vec<usize>>,
    /// Per class: subjects by gender (`[Female, Male]`).
    by_class_gender: HashMap<String, [Vec<String>; 2]>,
}

fn gender_slot(gender: Gender) -> usize {
    match gender {
        Gender::Female => 0,
        Gender::Male => 1,
    }
}

/// Immutable-after-load collection of weekly records plus a subject roster.
///
/// Records are grouped per subject in increasing week order. The activity
/// alphabet (codes `1..=alphabet`) is declared at construction; the engine is
/// otherwise agnostic to what the codes mean.
#[derive(Debug, Clone)]
pub struct PanelDataset {
    records: Vec<WeekRecord>,
    alphabet: u8,
    index: Arc<DatasetIndex>,
}

impl PanelDataset {
    pub fn new(records: Vec<WeekRecord>, alphabet: u8) -> Result<Self, DatasetError> {
        let mut roster: HashMap<String, SubjectInfo> = HashMap::new();
        let mut subject_order = Vec::new();
        let mut by_subject: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, rec) in records.iter().enumerate() {
            if rec.counts.is_some() && rec.sports.is_none() {
                return Err(DatasetError::CountsWithoutSports {
                    subject: rec.subject_id.clone(),
                    week: rec.week,
                });
            }
            match roster.get(&rec.subject_id) {
                None => {
                    roster.insert(
                        rec.subject_id.clone(),
                        SubjectInfo {
                            class_id: rec.class_id.clone(),
                            gender: rec.gender,
                        },
                    );
                    subject_order.push(rec.subject_id.clone());
                }
                Some(info) => {
                    if info.class_id != rec.class_id || info.gender != rec.gender {
                        return Err(DatasetError::RosterMismatch {
                            subject: rec.subject_id.clone(),
                        });
                    }
                }
            }
            let idxs = by_subject.entry(rec.subject_id.clone()).or_default();
            if let Some(&last) = idxs.last() {
                if records[last].week >= rec.week {
                    if records[last].week == rec.week {
                        return Err(DatasetError::DuplicateWeek {
                            subject: rec.subject_id.clone(),
                            week: rec.week,
                        });
                    }
                    return Err(DatasetError::WeekOrder {
                        subject: rec.subject_id.clone(),
                    });
                }
            }
            idxs.push(i);
        }
        let mut by_class_gender: HashMap<String, [Vec<String>; 2]> = HashMap::new();
        for subject in &subject_order {
            let info = &roster[subject];
            by_class_gender.entry(info.class_id.clone()).or_default()[gender_slot(info.gender)]
                .push(subject.clone());
        }
        Ok(PanelDataset {
            records,
            alphabet,
            index: Arc::new(DatasetIndex {
                roster,
                subject_order,
                by_subject,
                by_class_gender,
            }),
        })
    }

    pub fn alphabet(&self) -> u8 {
        self.alphabet
    }

    pub fn records(&self) -> &[WeekRecord] {
        &self.records
    }

    pub fn record(&self, idx: usize) -> &WeekRecord {
        &self.records[idx]
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Subject ids in first-appearance order.
    pub fn subjects(&self) -> &[String] {
        &self.index.subject_order
    }

    pub fn subject_info(&self, subject: &str) -> Option<&SubjectInfo> {
        self.index.roster.get(subject)
    }

    /// Record indices for one subject, in increasing week order.
    pub fn records_of(&self, subject: &str) -> &[usize] {
        self.index
            .by_subject
            .get(subject)
            .map_or(&[], Vec::as_slice)
    }

    pub fn record_at(&self, subject: &str, week: u32) -> Option<usize> {
        let idxs = self.records_of(subject);
        idxs.binary_search_by_key(&week, |&i| self.records[i].week)
            .ok()
            .map(|p| idxs[p])
    }

    /// Subjects of one class-and-gender stratum.
    pub fn peers(&self, class_id: &str, gender: Gender) -> &[String] {
        self.index
            .by_class_gender
            .get(class_id)
            .map_or(&[], |g| g[gender_slot(gender)].as_slice())
    }

    // Mutators used by the engine on its per-replicate working copy. Keys
    // (subject, week) never change, so the indexes stay valid.

    pub fn set_frequency(&mut self, idx: usize, value: u8) {
        assert!(value <= MAX_FREQUENCY);
        self.records[idx].frequency = Some(value);
    }

    pub fn set_sports(&mut self, idx: usize, sports: BTreeSet<SportCode>) {
        self.records[idx].sports = Some(sports);
    }

    pub fn set_counts(&mut self, idx: usize, counts: BTreeMap<SportCode, u32>) {
        self.records[idx].counts = Some(counts);
    }
}

/// Validates a completed dataset: every record passes [`validate_record`]
/// and no field is missing anywhere.
pub fn validate_completed(dataset: &PanelDataset) -> ValidationReport {
    let mut violations = Vec::new();
    for rec in dataset.records() {
        for code in validate_record(rec, dataset.alphabet()) {
            violations.push(Violation {
                subject_id: rec.subject_id.clone(),
                week: rec.week,
                code,
            });
        }
        if rec.pain.is_none()
            || rec.frequency.is_none()
            || rec.sports.is_none()
            || rec.counts.is_none()
        {
            violations.push(Violation {
                subject_id: rec.subject_id.clone(),
                week: rec.week,
                code: ConstraintCode::MissingField,
            });
        }
    }
    ValidationReport { violations }
}

/// Per-variable missingness counts and rates.
#[derive(Debug, Clone, PartialEq)]
pub struct MissingnessProfile {
    pub n_records: usize,
    pub missing_pain: usize,
    pub missing_frequency: usize,
    pub missing_sports: usize,
    pub missing_counts: usize,
    /// (missing cells among the four variables) / (4 · n_records)
    pub overall_rate: f64,
    pub per_subject: BTreeMap<String, usize>,
}

impl MissingnessProfile {
    pub fn rate_frequency(&self) -> f64 {
        self.missing_frequency as f64 / self.n_records.max(1) as f64
    }
    pub fn rate_sports(&self) -> f64 {
        self.missing_sports as f64 / self.n_records.max(1) as f64
    }
    pub fn rate_counts(&self) -> f64 {
        self.missing_counts as f64 / self.n_records.max(1) as f64
    }
    pub fn rate_pain(&self) -> f64 {
        self.missing_pain as f64 / self.n_records.max(1) as f64
    }
}

pub fn missingness_profile(dataset: &PanelDataset) -> MissingnessProfile {
    let mut p = MissingnessProfile {
        n_records: dataset.len(),
        missing_pain: 0,
        missing_frequency: 0,
        missing_sports: 0,
        missing_counts: 0,
        overall_rate: 0.0,
        per_subject: BTreeMap::new(),
    };
    for rec in dataset.records() {
        let mut m = 0;
        if rec.pain.is_none() {
            p.missing_pain += 1;
            m += 1;
        }
        if rec.frequency.is_none() {
            p.missing_frequency += 1;
            m += 1;
        }
        if rec.sports.is_none() {
            p.missing_sports += 1;
            m += 1;
        }
        if rec.counts.is_none() {
            p.missing_counts += 1;
            m += 1;
        }
        if m > 0 {
            *p.per_subject.entry(rec.subject_id.clone()).or_insert(0) += m;
        }
    }
    let total = p.missing_pain + p.missing_frequency + p.missing_sports + p.missing_counts;
    p.overall_rate = total as f64 / (4 * p.n_records.max(1)) as f64;
    p
}
