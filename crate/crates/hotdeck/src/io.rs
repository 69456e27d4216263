//! File formats, run configuration, and serialization.
//!
//! Panels travel as UTF-8 comma-delimited text with a version comment line,
//! then a header row. `NA` is the only missing token; an activity-free week
//! spells its empty set and empty counts as `-`, so a blank field is always
//! a parse error rather than silent missingness. Activity sets are
//! semicolon-joined codes and counts are semicolon-joined integers aligned
//! with the set, e.g. `s1,c1,F,8,none,3,1;2,2;1`.
//!
//! Run configurations and simulation scenarios are flat `key = value` text;
//! list values are comma-joined (ladder radii as `7,12,25,inf`).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::donor::Radius;
use crate::engine::{ReplicateResult, RunConfig, Variable};
use crate::frequency::FrequencyMethod;
use crate::panel::{validate_record, DatasetError, Gender, PainLevel, PanelDataset, WeekRecord};
use crate::pooling::AnalysisSpec;
use crate::sim::{AmputationSpec, GeneratorConfig, Mechanism, Method};

const PANEL_MAGIC: &str = "# hotdeck-panel v1";
const IMPUTED_MAGIC: &str = "# hotdeck-imputed v1";
const PROVENANCE_MAGIC: &str = "# hotdeck-provenance v1";
const PANEL_HEADER: &str = "subject_id,class_id,gender,week,pain,frequency,sports,counts";

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("unsupported or missing file header: {0:?}")]
    Header(String),
    #[error("row {row}, column {column}: {reason}")]
    Parse {
        row: usize,
        column: &'static str,
        reason: String,
    },
    #[error("row {row}: constraint violation: {constraint}")]
    Validation { row: usize, constraint: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("configuration line {line}: {message}")]
    Config { line: usize, message: String },
}

fn parse_err(row: usize, column: &'static str, reason: impl Into<String>) -> IoError {
    IoError::Parse {
        row,
        column,
        reason: reason.into(),
    }
}

/// Parses a panel from text. `row` in errors is the physical line number.
pub fn read_panel_str(text: &str) -> Result<PanelDataset, IoError> {
    let mut lines = text.lines();
    let magic = lines.next().unwrap_or_default();
    let alphabet = parse_panel_magic(magic)?;
    let header = lines.next().unwrap_or_default();
    if header != PANEL_HEADER {
        return Err(IoError::Header(header.to_string()));
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = i + 3; // after magic and header
        if line.is_empty() {
            continue;
        }
        records.push(parse_row(line, row, alphabet)?);
    }
    Ok(PanelDataset::new(records, alphabet)?)
}

pub fn load_panel(path: &Path) -> Result<PanelDataset, IoError> {
    read_panel_str(&fs::read_to_string(path)?)
}

fn parse_panel_magic(line: &str) -> Result<u8, IoError> {
    let rest = line
        .strip_prefix(PANEL_MAGIC)
        .ok_or_else(|| IoError::Header(line.to_string()))?;
    let rest = rest.trim();
    let alphabet = rest
        .strip_prefix("alphabet=")
        .and_then(|v| v.parse::<u8>().ok())
        .filter(|&a| a >= 1)
        .ok_or_else(|| IoError::Header(line.to_string()))?;
    Ok(alphabet)
}

fn parse_row(line: &str, row: usize, alphabet: u8) -> Result<WeekRecord, IoError> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 8 {
        return Err(parse_err(
            row,
            "record",
            format!("expected 8 fields, found {}", fields.len()),
        ));
    }
    for (f, name) in fields.iter().zip([
        "subject_id",
        "class_id",
        "gender",
        "week",
        "pain",
        "frequency",
        "sports",
        "counts",
    ]) {
        if f.is_empty() {
            return Err(parse_err(row, "record", format!("empty {name} field")));
        }
    }
    let gender = match fields[2] {
        "F" => Gender::Female,
        "M" => Gender::Male,
        other => {
            return Err(parse_err(
                row,
                "gender",
                format!("expected F or M, got {other:?}"),
            ))
        }
    };
    let week: u32 = fields[3]
        .parse()
        .map_err(|_| parse_err(row, "week", format!("not a week number: {:?}", fields[3])))?;
    let mut rec = WeekRecord::new(fields[0], fields[1], gender, week);
    rec.pain = match fields[4] {
        "NA" => None,
        "none" => Some(PainLevel::NoPain),
        "new" => Some(PainLevel::NewPain),
        "old" => Some(PainLevel::OldPain),
        other => {
            return Err(parse_err(
                row,
                "pain",
                format!("expected none, new, old, or NA, got {other:?}"),
            ))
        }
    };
    rec.frequency = match fields[5] {
        "NA" => None,
        s => Some(
            s.parse::<u8>()
                .map_err(|_| parse_err(row, "frequency", format!("not a frequency: {s:?}")))?,
        ),
    };
    // sports keep their listed order here so counts can align positionally
    let sports_list: Option<Vec<u8>> = match fields[6] {
        "NA" => None,
        "-" => Some(Vec::new()),
        s => Some(
            s.split(';')
                .map(|c| {
                    c.parse::<u8>()
                        .map_err(|_| parse_err(row, "sports", format!("bad activity code {c:?}")))
                })
                .collect::<Result<_, _>>()?,
        ),
    };
    if let Some(list) = &sports_list {
        let distinct: BTreeSet<u8> = list.iter().copied().collect();
        if distinct.len() != list.len() {
            return Err(parse_err(row, "sports", "duplicate activity code"));
        }
    }
    let counts_list: Option<Vec<u32>> = match fields[7] {
        "NA" => None,
        "-" => Some(Vec::new()),
        s => Some(
            s.split(';')
                .map(|c| {
                    c.parse::<u32>()
                        .map_err(|_| parse_err(row, "counts", format!("bad count {c:?}")))
                })
                .collect::<Result<_, _>>()?,
        ),
    };
    match (&sports_list, &counts_list) {
        (None, Some(_)) => {
            return Err(IoError::Validation {
                row,
                constraint: "counts present without an activity set".into(),
            })
        }
        (Some(s), Some(c)) if s.len() != c.len() => {
            return Err(IoError::Validation {
                row,
                constraint: format!(
                    "counts length {} does not match activity set size {}",
                    c.len(),
                    s.len()
                ),
            })
        }
        _ => {}
    }
    if rec.frequency.is_none() && sports_list.is_some() {
        return Err(IoError::Validation {
            row,
            constraint: "activity set present without a frequency".into(),
        });
    }
    if let Some(list) = &sports_list {
        if let Some(counts) = &counts_list {
            rec.counts = Some(list.iter().copied().zip(counts.iter().copied()).collect());
        }
        rec.sports = Some(list.iter().copied().collect());
    }
    let codes = validate_record(&rec, alphabet);
    if let Some(code) = codes.first() {
        return Err(IoError::Validation {
            row,
            constraint: code.to_string(),
        });
    }
    Ok(rec)
}

fn format_sports(sports: &BTreeSet<u8>) -> String {
    if sports.is_empty() {
        "-".into()
    } else {
        sports
            .iter()
            .map(u8::to_string)
            .collect::<Vec<_>>()
            .join(";")
    }
}

fn format_counts(sports: &BTreeSet<u8>, counts: &BTreeMap<u8, u32>) -> String {
    if sports.is_empty() {
        "-".into()
    } else {
        sports
            .iter()
            .map(|c| counts.get(c).copied().unwrap_or(0).to_string())
            .collect::<Vec<_>>()
            .join(";")
    }
}

fn format_record(rec: &WeekRecord) -> String {
    let pain = match rec.pain {
        None => "NA",
        Some(PainLevel::NoPain) => "none",
        Some(PainLevel::NewPain) => "new",
        Some(PainLevel::OldPain) => "old",
    };
    let frequency = rec.frequency.map_or("NA".into(), |f| f.to_string());
    let sports = rec.sports.as_ref().map_or("NA".into(), format_sports);
    let counts = match (&rec.sports, &rec.counts) {
        (Some(s), Some(c)) => format_counts(s, c),
        _ => "NA".into(),
    };
    format!(
        "{},{},{},{},{},{},{},{}",
        rec.subject_id,
        rec.class_id,
        match rec.gender {
            Gender::Female => "F",
            Gender::Male => "M",
        },
        rec.week,
        pain,
        frequency,
        sports,
        counts
    )
}

pub fn panel_to_string(dataset: &PanelDataset) -> String {
    let mut out = format!(
        "{PANEL_MAGIC} alphabet={}\n{PANEL_HEADER}\n",
        dataset.alphabet()
    );
    for rec in dataset.records() {
        out.push_str(&format_record(rec));
        out.push('\n');
    }
    out
}

pub fn write_panel(dataset: &PanelDataset, path: &Path) -> Result<(), IoError> {
    fs::write(path, panel_to_string(dataset))?;
    Ok(())
}

fn join_or_dash<T: ToString>(items: &[T]) -> String {
    if items.is_empty() {
        "-".into()
    } else {
        items.iter().map(T::to_string).collect::<Vec<_>>().join(";")
    }
}

/// Serializes all replicates into one long file (with an `imp` column) plus
/// the imputation log.
pub fn completed_to_strings(results: &[ReplicateResult]) -> (String, String) {
    let alphabet = results.first().map_or(0, |r| r.dataset.alphabet());
    let mut data = format!("{IMPUTED_MAGIC} alphabet={alphabet}\nimp,{PANEL_HEADER}\n");
    let mut log = format!(
        "{PROVENANCE_MAGIC}\nimp,variable,subject_id,week,rung,donor_weeks,flags,seed_id\n"
    );
    for r in results {
        for rec in r.dataset.records() {
            let _ = writeln!(data, "{},{}", r.replicate, format_record(rec));
        }
        for p in &r.provenance {
            let _ = writeln!(
                log,
                "{},{},{},{},{},{},{},{}",
                p.replicate,
                p.variable,
                p.subject_id,
                p.week,
                p.rung.map_or("NA".into(), |k| k.to_string()),
                join_or_dash(&p.donor_weeks),
                join_or_dash(&p.flags),
                p.seed_id()
            );
        }
    }
    (data, log)
}

/// Parses an `imputed.csv` produced by [`save_completed`] back into one
/// panel per replicate, in replicate order.
pub fn read_completed_str(text: &str) -> Result<Vec<(u32, PanelDataset)>, IoError> {
    let mut lines = text.lines();
    let magic = lines.next().unwrap_or_default();
    let rest = magic
        .strip_prefix(IMPUTED_MAGIC)
        .ok_or_else(|| IoError::Header(magic.to_string()))?;
    let alphabet = rest
        .trim()
        .strip_prefix("alphabet=")
        .and_then(|v| v.parse::<u8>().ok())
        .filter(|&a| a >= 1)
        .ok_or_else(|| IoError::Header(magic.to_string()))?;
    let header = lines.next().unwrap_or_default();
    if header != format!("imp,{PANEL_HEADER}") {
        return Err(IoError::Header(header.to_string()));
    }
    let mut groups: Vec<(u32, Vec<WeekRecord>)> = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = i + 3;
        if line.is_empty() {
            continue;
        }
        let (imp, record_part) = line
            .split_once(',')
            .ok_or_else(|| parse_err(row, "imp", "missing replicate column"))?;
        let imp: u32 = imp
            .parse()
            .map_err(|_| parse_err(row, "imp", format!("bad replicate index {imp:?}")))?;
        let rec = parse_row(record_part, row, alphabet)?;
        match groups.last_mut() {
            Some((current, records)) if *current == imp => records.push(rec),
            _ => groups.push((imp, vec![rec])),
        }
    }
    groups
        .into_iter()
        .map(|(imp, records)| Ok((imp, PanelDataset::new(records, alphabet)?)))
        .collect()
}

pub fn load_completed(path: &Path) -> Result<Vec<(u32, PanelDataset)>, IoError> {
    read_completed_str(&fs::read_to_string(path)?)
}

/// Writes `imputed.csv` and `provenance.csv` under `dir`.
pub fn save_completed(results: &[ReplicateResult], dir: &Path) -> Result<(), IoError> {
    fs::create_dir_all(dir)?;
    let (data, log) = completed_to_strings(results);
    fs::write(dir.join("imputed.csv"), data)?;
    fs::write(dir.join("provenance.csv"), log)?;
    Ok(())
}

/// Parses a radius list such as `7,12,25,inf`.
pub fn parse_radii(s: &str) -> Result<Vec<Radius>, String> {
    let mut out = Vec::new();
    for item in s.split(',') {
        let item = item.trim();
        if item == "inf" {
            out.push(Radius::Unbounded);
        } else {
            let w: u32 = item
                .parse()
                .map_err(|_| format!("bad radius {item:?}; expected weeks or inf"))?;
            out.push(Radius::Weeks(w));
        }
    }
    if out.is_empty() {
        return Err("empty radius list".into());
    }
    Ok(out)
}

fn format_radii(radii: &[Radius]) -> String {
    radii
        .iter()
        .map(Radius::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

/// Iterates `key = value` lines, skipping blanks and `#` comments.
fn config_entries(text: &str) -> impl Iterator<Item = Result<(usize, &str, &str), IoError>> {
    text.lines().enumerate().filter_map(|(i, raw)| {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            return None;
        }
        Some(match trimmed.split_once('=') {
            Some((k, v)) => Ok((line, k.trim(), v.trim())),
            None => Err(IoError::Config {
                line,
                message: format!("expected key = value, got {trimmed:?}"),
            }),
        })
    })
}

fn config_err(line: usize, message: impl Into<String>) -> IoError {
    IoError::Config {
        line,
        message: message.into(),
    }
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool, IoError> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(config_err(
            line,
            format!("{key} expects true or false, got {v:?}"),
        )),
    }
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T, IoError> {
    v.parse()
        .map_err(|_| config_err(line, format!("bad value for {key}: {v:?}")))
}

/// Parses an engine run configuration; unspecified keys keep their defaults.
pub fn parse_run_config(text: &str) -> Result<RunConfig, IoError> {
    let mut config = RunConfig::default();
    for entry in config_entries(text) {
        let (line, key, value) = entry?;
        match key {
            "m" => config.m = parse_num(line, key, value)?,
            "seed" => config.master_seed = parse_num(line, key, value)?,
            "radii" => config.radii = parse_radii(value).map_err(|e| config_err(line, e))?,
            "frequency_method" => {
                config.frequency_method = match value {
                    "residual" => FrequencyMethod::Residual,
                    "direct" => FrequencyMethod::Direct,
                    _ => {
                        return Err(config_err(
                            line,
                            format!("frequency_method expects residual or direct, got {value:?}"),
                        ))
                    }
                }
            }
            "abb" => config.abb = parse_bool(line, key, value)?,
            "chaining" => config.chaining = parse_bool(line, key, value)?,
            "sport_match_pain" => config.sport_match_pain = parse_bool(line, key, value)?,
            "keep_multiplicity" => config.keep_multiplicity = parse_bool(line, key, value)?,
            "exclude_self_in_median" => {
                config.exclude_self_in_median = parse_bool(line, key, value)?
            }
            _ => return Err(config_err(line, format!("unknown key {key:?}"))),
        }
    }
    Ok(config)
}

pub fn load_run_config(path: &Path) -> Result<RunConfig, IoError> {
    parse_run_config(&fs::read_to_string(path)?)
}

pub fn run_config_to_string(config: &RunConfig) -> String {
    format!(
        "m = {}\nseed = {}\nradii = {}\nfrequency_method = {}\nabb = {}\nchaining = {}\n\
         sport_match_pain = {}\nkeep_multiplicity = {}\nexclude_self_in_median = {}\n",
        config.m,
        config.master_seed,
        format_radii(&config.radii),
        match config.frequency_method {
            FrequencyMethod::Residual => "residual",
            FrequencyMethod::Direct => "direct",
        },
        config.abb,
        config.chaining,
        config.sport_match_pain,
        config.keep_multiplicity,
        config.exclude_self_in_median
    )
}

/// A full simulation scenario: generator, amputation, and evaluation knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub generator: GeneratorConfig,
    pub amputation: AmputationSpec,
    pub methods: Vec<Method>,
    pub n_sim: u32,
    pub estimand: AnalysisSpec,
    pub mi_m: u32,
    pub seed: u64,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            generator: GeneratorConfig::default(),
            amputation: AmputationSpec::new(Mechanism::Mar, 0.2),
            methods: vec![
                Method::CompleteCase,
                Method::MeanImputation,
                Method::Locf,
                Method::HotDeckMi,
            ],
            n_sim: 200,
            estimand: AnalysisSpec::MeanFrequency,
            mi_m: 20,
            seed: 0,
        }
    }
}

/// Parses a scenario file; unspecified keys keep their defaults.
pub fn parse_scenario(text: &str) -> Result<Scenario, IoError> {
    let mut s = Scenario::default();
    for entry in config_entries(text) {
        let (line, key, value) = entry?;
        match key {
            "subjects" => s.generator.n_subjects = parse_num(line, key, value)?,
            "weeks" => s.generator.n_weeks = parse_num(line, key, value)?,
            "classes" => s.generator.n_classes = parse_num(line, key, value)?,
            "alphabet" => s.generator.n_sports = parse_num(line, key, value)?,
            "base_frequency" => s.generator.base_frequency = parse_num(line, key, value)?,
            "seasonal_amplitude" => s.generator.seasonal_amplitude = parse_num(line, key, value)?,
            "propensity_sd" => s.generator.propensity_sd = parse_num(line, key, value)?,
            "noise_sd" => s.generator.noise_sd = parse_num(line, key, value)?,
            "pain_incidence" => s.generator.pain_incidence = parse_num(line, key, value)?,
            "pain_persistence" => s.generator.pain_persistence = parse_num(line, key, value)?,
            "pain_effect" => s.generator.pain_effect = parse_num(line, key, value)?,
            "sport_concentration" => s.generator.sport_concentration = parse_num(line, key, value)?,
            "mechanism" => {
                s.amputation.mechanism = match value {
                    "mcar" => Mechanism::Mcar,
                    "mar" => Mechanism::Mar,
                    _ => {
                        return Err(config_err(
                            line,
                            format!("mechanism expects mcar or mar, got {value:?}"),
                        ))
                    }
                }
            }
            "rate" => s.amputation.rate = parse_num(line, key, value)?,
            "targets" => {
                s.amputation.targets = value
                    .split(',')
                    .map(|t| match t.trim() {
                        "frequency" => Ok(Variable::Frequency),
                        "sports" => Ok(Variable::Sports),
                        "counts" => Ok(Variable::Counts),
                        other => Err(config_err(line, format!("unknown target {other:?}"))),
                    })
                    .collect::<Result<_, _>>()?
            }
            "methods" => {
                s.methods = value
                    .split(',')
                    .map(|m| Method::parse(m.trim()).map_err(|e| config_err(line, e.to_string())))
                    .collect::<Result<_, _>>()?
            }
            "n_sim" => s.n_sim = parse_num(line, key, value)?,
            "estimand" => {
                s.estimand =
                    AnalysisSpec::parse(value).map_err(|e| config_err(line, e.to_string()))?
            }
            "mi_m" => s.mi_m = parse_num(line, key, value)?,
            "seed" => s.seed = parse_num(line, key, value)?,
            _ => return Err(config_err(line, format!("unknown key {key:?}"))),
        }
    }
    Ok(s)
}

pub fn load_scenario(path: &Path) -> Result<Scenario, IoError> {
    parse_scenario(&fs::read_to_string(path)?)
}
