//! Right-censored observations with a cured fraction.
//!
//! A subject is either an observed event, a right-censored follow-up, or a
//! cured subject whose follow-up time is infinite. Raw files usually carry
//! finite times only; [`Dataset::apply_cure_threshold`] reclassifies long
//! survivors as cured.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset is empty")]
    Empty,
    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error("line {line}: cured subject must have time `inf`, found {time}")]
    CuredWithFiniteTime { line: u64, time: f64 },
    #[error("line {line}: only cured subjects (status 2) may have time `inf`")]
    InfiniteTimeNotCured { line: u64 },
    #[error("subject {index}: {message}")]
    InvalidSubject { index: usize, message: String },
    #[error("cure threshold must be positive, got {0}")]
    NonPositiveThreshold(f64),
    #[error("subject {index} is an event at time {time} beyond the cure threshold {zeta}")]
    EventBeyondThreshold { index: usize, time: f64, zeta: f64 },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Status {
    Event,
    Censored,
    Cured,
}

impl Status {
    /// CSV code: 0 censored, 1 event, 2 cured.
    pub fn code(self) -> u8 {
        match self {
            Status::Censored => 0,
            Status::Event => 1,
            Status::Cured => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Status::Censored),
            1 => Some(Status::Event),
            2 => Some(Status::Cured),
            _ => None,
        }
    }

    /// Event indicator as used by the likelihoods.
    pub fn delta(self) -> f64 {
        if self == Status::Event {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub time: f64,
    pub status: Status,
    pub covariate: f64,
}

impl Subject {
    pub fn event(time: f64, covariate: f64) -> Self {
        Self { time, status: Status::Event, covariate }
    }

    pub fn censored(time: f64, covariate: f64) -> Self {
        Self { time, status: Status::Censored, covariate }
    }

    pub fn cured(covariate: f64) -> Self {
        Self { time: f64::INFINITY, status: Status::Cured, covariate }
    }

    pub fn is_cured(&self) -> bool {
        self.status == Status::Cured
    }

    fn validate(&self) -> Result<(), String> {
        if !self.covariate.is_finite() {
            return Err(format!("covariate must be finite, got {}", self.covariate));
        }
        match self.status {
            Status::Cured if self.time != f64::INFINITY => {
                Err(format!("cured subject must have infinite time, got {}", self.time))
            }
            Status::Event | Status::Censored if !(self.time.is_finite() && self.time >= 0.0) => {
                Err(format!("time must be finite and nonnegative, got {}", self.time))
            }
            _ => Ok(()),
        }
    }
}

/// An immutable, validated collection of subjects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    subjects: Vec<Subject>,
    cure_threshold: Option<f64>,
    covariate_range: (f64, f64),
}

impl Dataset {
    pub fn new(subjects: Vec<Subject>) -> Result<Self, DataError> {
        if subjects.is_empty() {
            return Err(DataError::Empty);
        }
        for (index, s) in subjects.iter().enumerate() {
            s.validate().map_err(|message| DataError::InvalidSubject { index, message })?;
        }
        let covariate_range = subjects.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
            (lo.min(s.covariate), hi.max(s.covariate))
        });
        Ok(Self { subjects, cure_threshold: None, covariate_range })
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn cure_threshold(&self) -> Option<f64> {
        self.cure_threshold
    }

    pub fn covariate_range(&self) -> (f64, f64) {
        self.covariate_range
    }

    pub fn covariates(&self) -> impl Iterator<Item = f64> + '_ {
        self.subjects.iter().map(|s| s.covariate)
    }

    pub fn count(&self, status: Status) -> usize {
        self.subjects.iter().filter(|s| s.status == status).count()
    }

    pub fn n_events(&self) -> usize {
        self.count(Status::Event)
    }

    /// Keeps only the subjects for which `keep(index, subject)` holds.
    pub fn filter<F>(&self, mut keep: F) -> Result<Self, DataError>
    where
        F: FnMut(usize, &Subject) -> bool,
    {
        let subjects = self
            .subjects
            .iter()
            .enumerate()
            .filter(|(i, s)| keep(*i, s))
            .map(|(_, s)| *s)
            .collect();
        let mut out = Self::new(subjects)?;
        out.cure_threshold = self.cure_threshold;
        Ok(out)
    }

    /// Reclassifies every subject followed beyond `zeta` (strictly) as cured.
    ///
    /// An event observed after `zeta` is rejected rather than silently turned
    /// into a cure.
    pub fn apply_cure_threshold(&self, zeta: f64) -> Result<Self, DataError> {
        if !(zeta > 0.0) {
            return Err(DataError::NonPositiveThreshold(zeta));
        }
        let mut subjects = self.subjects.clone();
        for (index, s) in subjects.iter_mut().enumerate() {
            if s.is_cured() || s.time <= zeta {
                continue;
            }
            if s.status == Status::Event {
                return Err(DataError::EventBeyondThreshold { index, time: s.time, zeta });
            }
            *s = Subject::cured(s.covariate);
        }
        Ok(Self {
            subjects,
            cure_threshold: Some(zeta),
            covariate_range: self.covariate_range,
        })
    }

    /// Fraction of subjects currently marked cured.
    pub fn observed_cure_fraction(&self) -> f64 {
        self.count(Status::Cured) as f64 / self.len() as f64
    }

    /// Parses the `time,status,x` schema.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self, DataError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers()?.clone();
        let expected = ["time", "status", "x"];
        if header.len() != 3 || header.iter().zip(expected).any(|(a, b)| a != b) {
            return Err(DataError::Malformed {
                line: 1,
                message: format!("expected header `time,status,x`, found `{}`", header.iter().collect::<Vec<_>>().join(",")),
            });
        }

        let mut subjects = Vec::new();
        for record in rdr.records() {
            let record = record?;
            let line = record.position().map_or(0, |p| p.line());
            subjects.push(parse_row(&record, line)?);
        }
        Self::new(subjects)
    }

    pub fn from_csv_str(text: &str) -> Result<Self, DataError> {
        Self::from_csv_reader(text.as_bytes())
    }

    /// Writes the `time,status,x` schema; times use shortest round-trip
    /// formatting and cured subjects are written as `inf`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "time,status,x")?;
        for s in &self.subjects {
            if s.is_cured() {
                writeln!(out, "inf,{},{}", s.status.code(), s.covariate)?;
            } else {
                writeln!(out, "{},{},{}", s.time, s.status.code(), s.covariate)?;
            }
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("csv output is ASCII")
    }
}

fn parse_row(record: &csv::StringRecord, line: u64) -> Result<Subject, DataError> {
    let malformed = |message: String| DataError::Malformed { line, message };
    if record.len() != 3 {
        return Err(malformed(format!("expected 3 fields, found {}", record.len())));
    }
    let time_field = &record[0];
    let status = record[1]
        .parse::<u8>()
        .ok()
        .and_then(Status::from_code)
        .ok_or_else(|| malformed(format!("status must be 0, 1 or 2, found `{}`", &record[1])))?;
    let covariate: f64 = record[2]
        .parse()
        .ok()
        .filter(|x: &f64| x.is_finite())
        .ok_or_else(|| malformed(format!("invalid covariate `{}`", &record[2])))?;

    let time = if time_field.eq_ignore_ascii_case("inf") {
        f64::INFINITY
    } else {
        let t: f64 = time_field
            .parse()
            .ok()
            .filter(|t: &f64| t.is_finite())
            .ok_or_else(|| malformed(format!("invalid time `{time_field}`")))?;
        if t < 0.0 {
            return Err(malformed(format!("time must be nonnegative, found {t}")));
        }
        t
    };

    match (status, time.is_infinite()) {
        (Status::Cured, false) => Err(DataError::CuredWithFiniteTime { line, time }),
        (Status::Event | Status::Censored, true) => Err(DataError::InfiniteTimeNotCured { line }),
        _ => Ok(Subject { time, status, covariate }),
    }
}
