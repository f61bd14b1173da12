//! Longitudinal cohort tables and the seven-way image stratification.
//!
//! Each imaging visit is labelled from the diagnosis at that visit together
//! with the subject's past and future diagnoses:
//!
//! | at visit | history / future              | stratum |
//! |----------|-------------------------------|---------|
//! | NC       | never MCI or DAT              | sNC     |
//! | NC       | later MCI, never DAT          | uNC     |
//! | NC       | later DAT                     | pNC     |
//! | MCI      | never DAT                     | sMCI    |
//! | MCI      | later DAT                     | pMCI    |
//! | DAT      | some earlier NC or MCI visit  | eDAT    |
//! | DAT      | DAT at every visit            | sDAT    |
//!
//! Records whose diagnosis ever improves (e.g. DAT followed by MCI) are
//! rejected with [`CohortError::NonMonotone`].

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error("line {line}: unknown diagnosis {token:?}")]
    UnknownDiagnosis { line: u64, token: String },
    #[error("line {line}: duplicate visit for subject {subject} at {months} months")]
    DuplicateVisit {
        line: u64,
        subject: String,
        months: f64,
    },
    #[error("subject {subject}: non-monotone trajectory ({from} at {from_months} months followed by {to} at {to_months} months)")]
    NonMonotone {
        subject: String,
        from: Diagnosis,
        from_months: f64,
        to: Diagnosis,
        to_months: f64,
    },
    #[error("subject {subject}: visit index {index} out of range ({len} visits)")]
    VisitIndex {
        subject: String,
        index: usize,
        len: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Diagnosis {
    NC,
    MCI,
    DAT,
}

impl FromStr for Diagnosis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "NC" => Ok(Diagnosis::NC),
            "MCI" => Ok(Diagnosis::MCI),
            "DAT" => Ok(Diagnosis::DAT),
            other => Err(other.to_string()),
        }
    }
}

impl fmt::Display for Diagnosis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Diagnosis::NC => "NC",
            Diagnosis::MCI => "MCI",
            Diagnosis::DAT => "DAT",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Visit {
    /// Months since the subject's first visit.
    pub visit_months: f64,
    pub diagnosis: Diagnosis,
    pub has_image: bool,
    pub age_years: Option<f64>,
    pub mmse: Option<f64>,
    pub csf_ttau_abeta: Option<f64>,
    /// Image location, already resolved against the cohort table's directory.
    pub image_path: Option<PathBuf>,
}

impl Visit {
    pub fn new(visit_months: f64, diagnosis: Diagnosis) -> Self {
        Visit {
            visit_months,
            diagnosis,
            has_image: false,
            age_years: None,
            mmse: None,
            csf_ttau_abeta: None,
            image_path: None,
        }
    }

    /// Identifier of the image taken at this visit: the file stem of its path.
    pub fn image_id(&self) -> Option<String> {
        self.image_path
            .as_ref()
            .and_then(|p| p.file_stem())
            .map(|s| s.to_string_lossy().into_owned())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalRecord {
    pub subject_id: String,
    /// Strictly ascending by `visit_months`.
    pub visits: Vec<Visit>,
}

impl LongitudinalRecord {
    /// Builds a record, sorting visits by time. Returns `None` for an empty
    /// visit list or duplicated visit times.
    pub fn new(subject_id: impl Into<String>, mut visits: Vec<Visit>) -> Option<Self> {
        if visits.is_empty() {
            return None;
        }
        visits.sort_by(|a, b| a.visit_months.total_cmp(&b.visit_months));
        if visits
            .windows(2)
            .any(|w| w[0].visit_months == w[1].visit_months)
        {
            return None;
        }
        Some(LongitudinalRecord {
            subject_id: subject_id.into(),
            visits,
        })
    }

    /// Convenience constructor from diagnoses at 12-month spacing, every visit imaged.
    pub fn from_diagnoses(subject_id: impl Into<String>, diagnoses: &[Diagnosis]) -> Option<Self> {
        let visits = diagnoses
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let mut v = Visit::new(12.0 * i as f64, d);
                v.has_image = true;
                v
            })
            .collect();
        Self::new(subject_id, visits)
    }

    pub fn diagnoses(&self) -> impl Iterator<Item = Diagnosis> + '_ {
        self.visits.iter().map(|v| v.diagnosis)
    }

    pub fn image_visit_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.visits
            .iter()
            .enumerate()
            .filter(|(_, v)| v.has_image)
            .map(|(i, _)| i)
    }

    /// Fails on the first visit whose diagnosis is less severe than its predecessor.
    pub fn check_monotone(&self) -> Result<(), CohortError> {
        for w in self.visits.windows(2) {
            if w[1].diagnosis < w[0].diagnosis {
                return Err(CohortError::NonMonotone {
                    subject: self.subject_id.clone(),
                    from: w[0].diagnosis,
                    from_months: w[0].visit_months,
                    to: w[1].diagnosis,
                    to_months: w[1].visit_months,
                });
            }
        }
        Ok(())
    }

    fn check_index(&self, index: usize) -> Result<&Visit, CohortError> {
        self.visits.get(index).ok_or_else(|| CohortError::VisitIndex {
            subject: self.subject_id.clone(),
            index,
            len: self.visits.len(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StratumLabel {
    #[serde(rename = "sNC")]
    SNc,
    #[serde(rename = "uNC")]
    UNc,
    #[serde(rename = "sMCI")]
    SMci,
    #[serde(rename = "pNC")]
    PNc,
    #[serde(rename = "pMCI")]
    PMci,
    #[serde(rename = "eDAT")]
    EDat,
    #[serde(rename = "sDAT")]
    SDat,
}

impl StratumLabel {
    pub const ALL: [StratumLabel; 7] = [
        StratumLabel::SNc,
        StratumLabel::UNc,
        StratumLabel::SMci,
        StratumLabel::PNc,
        StratumLabel::PMci,
        StratumLabel::EDat,
        StratumLabel::SDat,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StratumLabel::SNc => "sNC",
            StratumLabel::UNc => "uNC",
            StratumLabel::SMci => "sMCI",
            StratumLabel::PNc => "pNC",
            StratumLabel::PMci => "pMCI",
            StratumLabel::EDat => "eDAT",
            StratumLabel::SDat => "sDAT",
        }
    }

    pub fn trajectory(self) -> Trajectory {
        trajectory_of(self)
    }
}

impl fmt::Display for StratumLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StratumLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StratumLabel::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| format!("unknown stratum {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Trajectory {
    #[serde(rename = "DAT-")]
    DatMinus,
    #[serde(rename = "DAT+")]
    DatPlus,
}

impl Trajectory {
    pub fn is_positive(self) -> bool {
        self == Trajectory::DatPlus
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Trajectory::DatMinus => "DAT-",
            Trajectory::DatPlus => "DAT+",
        }
    }
}

impl fmt::Display for Trajectory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Trajectory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "DAT-" => Ok(Trajectory::DatMinus),
            "DAT+" => Ok(Trajectory::DatPlus),
            _ => Err(format!("unknown trajectory {s:?}")),
        }
    }
}

pub fn trajectory_of(stratum: StratumLabel) -> Trajectory {
    match stratum {
        StratumLabel::SNc | StratumLabel::UNc | StratumLabel::SMci => Trajectory::DatMinus,
        StratumLabel::PNc | StratumLabel::PMci | StratumLabel::EDat | StratumLabel::SDat => {
            Trajectory::DatPlus
        }
    }
}

pub fn assign_stratum(
    record: &LongitudinalRecord,
    image_visit_index: usize,
) -> Result<StratumLabel, CohortError> {
    let at = record.check_index(image_visit_index)?.diagnosis;
    record.check_monotone()?;
    let (before, after) = record.visits.split_at(image_visit_index);
    let later = |d: Diagnosis| after[1..].iter().any(|v| v.diagnosis == d);
    let label = match at {
        Diagnosis::NC if later(Diagnosis::DAT) => StratumLabel::PNc,
        Diagnosis::NC if later(Diagnosis::MCI) => StratumLabel::UNc,
        Diagnosis::NC => StratumLabel::SNc,
        Diagnosis::MCI if later(Diagnosis::DAT) => StratumLabel::PMci,
        Diagnosis::MCI => StratumLabel::SMci,
        Diagnosis::DAT if before.iter().any(|v| v.diagnosis != Diagnosis::DAT) => {
            StratumLabel::EDat
        }
        Diagnosis::DAT => StratumLabel::SDat,
    };
    Ok(label)
}

/// Years from the image visit to the subject's first DAT diagnosis.
///
/// `None` when the subject never reaches DAT. Images acquired after the
/// first DAT diagnosis have already converted and report 0.
pub fn time_to_conversion(
    record: &LongitudinalRecord,
    image_visit_index: usize,
) -> Result<Option<f64>, CohortError> {
    let image = record.check_index(image_visit_index)?;
    Ok(record
        .visits
        .iter()
        .find(|v| v.diagnosis == Diagnosis::DAT)
        .map(|first| ((first.visit_months - image.visit_months) / 12.0).max(0.0)))
}

/// Column order of the cohort table.
pub const COHORT_HEADER: [&str; 8] = [
    "subject_id",
    "visit_months",
    "diagnosis",
    "has_image",
    "age_years",
    "mmse",
    "csf_ttau_abeta",
    "image_path",
];

#[derive(Debug, Deserialize)]
struct CohortRow {
    subject_id: String,
    visit_months: String,
    diagnosis: String,
    has_image: String,
    age_years: String,
    mmse: String,
    csf_ttau_abeta: String,
    image_path: String,
}

fn parse_opt(field: &str, name: &str, line: u64) -> Result<Option<f64>, CohortError> {
    let field = field.trim();
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .map(Some)
        .ok_or_else(|| CohortError::Malformed {
            line,
            message: format!("{name}: not a finite number: {field:?}"),
        })
}

fn parse_bool(field: &str, line: u64) -> Result<bool, CohortError> {
    match field.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "y" => Ok(true),
        "0" | "false" | "no" | "n" | "" => Ok(false),
        other => Err(CohortError::Malformed {
            line,
            message: format!("has_image: not a boolean: {other:?}"),
        }),
    }
}

/// Reads a cohort table. Records come out in order of each subject's first
/// appearance; image paths are resolved against the table's directory.
pub fn load_cohort(path: impl AsRef<Path>) -> Result<Vec<LongitudinalRecord>, CohortError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| CohortError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    read_cohort(file, &base)
}

pub fn read_cohort(
    reader: impl std::io::Read,
    base_dir: &Path,
) -> Result<Vec<LongitudinalRecord>, CohortError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| CohortError::Malformed {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    if headers.iter().collect::<Vec<_>>() != COHORT_HEADER {
        return Err(CohortError::Malformed {
            line: 1,
            message: format!("expected header {}", COHORT_HEADER.join(",")),
        });
    }

    let mut order: Vec<String> = Vec::new();
    let mut visits: HashMap<String, Vec<Visit>> = HashMap::new();

    for result in rdr.records() {
        let raw = result.map_err(|e| CohortError::Malformed {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = raw.position().map(|p| p.line()).unwrap_or(0);
        let row: CohortRow = raw
            .deserialize(Some(&headers))
            .map_err(|e| CohortError::Malformed {
                line,
                message: e.to_string(),
            })?;
        let visit = parse_visit(&row, line, base_dir)?;

        if row.subject_id.is_empty() {
            return Err(CohortError::Malformed {
                line,
                message: "empty subject_id".into(),
            });
        }
        let entry = visits.entry(row.subject_id.clone()).or_insert_with(|| {
            order.push(row.subject_id.clone());
            Vec::new()
        });
        if entry.iter().any(|v| v.visit_months == visit.visit_months) {
            return Err(CohortError::DuplicateVisit {
                line,
                subject: row.subject_id,
                months: visit.visit_months,
            });
        }
        entry.push(visit);
    }

    Ok(order
        .into_iter()
        .map(|s| {
            let v = visits.remove(&s).unwrap_or_default();
            LongitudinalRecord::new(s, v).expect("non-empty, duplicate-free visit list")
        })
        .collect())
}

fn parse_visit(row: &CohortRow, line: u64, base_dir: &Path) -> Result<Visit, CohortError> {
    let visit_months = parse_opt(&row.visit_months, "visit_months", line)?
        .filter(|m| *m >= 0.0)
        .ok_or_else(|| CohortError::Malformed {
            line,
            message: format!("visit_months must be a non-negative number, got {:?}", row.visit_months),
        })?;
    let diagnosis = row
        .diagnosis
        .parse::<Diagnosis>()
        .map_err(|token| CohortError::UnknownDiagnosis { line, token })?;
    let has_image = parse_bool(&row.has_image, line)?;
    let age_years = parse_opt(&row.age_years, "age_years", line)?;
    let mmse = parse_opt(&row.mmse, "mmse", line)?;
    if let Some(m) = mmse {
        if !(0.0..=30.0).contains(&m) {
            return Err(CohortError::Malformed {
                line,
                message: format!("mmse {m} outside [0, 30]"),
            });
        }
    }
    let csf_ttau_abeta = parse_opt(&row.csf_ttau_abeta, "csf_ttau_abeta", line)?;
    if let Some(c) = csf_ttau_abeta {
        if c <= 0.0 {
            return Err(CohortError::Malformed {
                line,
                message: format!("csf_ttau_abeta {c} must be positive"),
            });
        }
    }
    let image_path = match row.image_path.as_str() {
        "" => None,
        p => Some(base_dir.join(p)),
    };
    if has_image && image_path.is_none() {
        return Err(CohortError::Malformed {
            line,
            message: "has_image is set but image_path is blank".into(),
        });
    }
    Ok(Visit {
        visit_months,
        diagnosis,
        has_image,
        age_years,
        mmse,
        csf_ttau_abeta,
        image_path,
    })
}

/// Writes a cohort table. `base_dir` is stripped from image paths so the
/// file stays relocatable.
pub fn write_cohort(
    writer: impl std::io::Write,
    records: &[LongitudinalRecord],
    base_dir: &Path,
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(COHORT_HEADER)?;
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for r in records {
        for v in &r.visits {
            let path = v
                .image_path
                .as_ref()
                .map(|p| {
                    p.strip_prefix(base_dir)
                        .unwrap_or(p)
                        .to_string_lossy()
                        .replace('\\', "/")
                })
                .unwrap_or_default();
            w.write_record([
                r.subject_id.clone(),
                v.visit_months.to_string(),
                v.diagnosis.to_string(),
                if v.has_image { "1" } else { "0" }.to_string(),
                opt(v.age_years),
                opt(v.mmse),
                opt(v.csf_ttau_abeta),
                path,
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
