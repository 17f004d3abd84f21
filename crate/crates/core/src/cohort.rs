//! Visit records and the cohort CSV schema.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const COLUMNS: [&str; 12] = [
    "subject_id",
    "visit_id",
    "age",
    "gender",
    "apoe4",
    "cdr",
    "mmse",
    "npiq",
    "abeta42",
    "amyloid_status",
    "label",
    "volume_ref",
];

/// Optional trailing column: `;`-separated `years:diagnosis` entries, e.g. `0:CN;1.5:MCI;3:AD`.
pub const DIAGNOSIS_HISTORY: &str = "diagnosis_history";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Gender {
    M,
    F,
}

impl Gender {
    /// Design-matrix coding: M = 1, F = 0.
    pub fn code(self) -> f64 {
        match self {
            Gender::M => 1.0,
            Gender::F => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Converter,
    NonConverter,
}

impl Label {
    pub fn is_converter(self) -> bool {
        self == Label::Converter
    }

    pub fn outcome(self) -> f64 {
        if self.is_converter() {
            1.0
        } else {
            0.0
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Converter => "converter",
            Label::NonConverter => "non_converter",
        })
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "converter" => Ok(Label::Converter),
            "non_converter" => Ok(Label::NonConverter),
            other => Err(format!("label must be converter or non_converter, got `{other}`")),
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Gender::M => "M",
            Gender::F => "F",
        })
    }
}

impl FromStr for Gender {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "M" => Ok(Gender::M),
            "F" => Ok(Gender::F),
            other => Err(format!("gender must be M or F, got `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitRecord {
    pub subject_id: String,
    pub visit_id: String,
    pub age: f64,
    pub gender: Gender,
    pub apoe4: Option<u8>,
    pub cdr: f64,
    pub mmse: u8,
    pub npiq: f64,
    pub abeta42: Option<f64>,
    pub amyloid_status: Option<u8>,
    pub label: Label,
    pub volume_ref: String,
}

impl VisitRecord {
    /// Join key `subject_id/visit_id`.
    pub fn key(&self) -> String {
        visit_key(&self.subject_id, &self.visit_id)
    }

    fn fields(&self) -> [String; 12] {
        fn opt<T: ToString>(v: &Option<T>) -> String {
            v.as_ref().map(|x| x.to_string()).unwrap_or_default()
        }
        [
            self.subject_id.clone(),
            self.visit_id.clone(),
            self.age.to_string(),
            self.gender.to_string(),
            opt(&self.apoe4),
            self.cdr.to_string(),
            self.mmse.to_string(),
            self.npiq.to_string(),
            opt(&self.abeta42),
            opt(&self.amyloid_status),
            self.label.to_string(),
            self.volume_ref.clone(),
        ]
    }
}

pub fn visit_key(subject_id: &str, visit_id: &str) -> String {
    format!("{subject_id}/{visit_id}")
}

pub fn write_csv<W: Write>(records: &[VisitRecord], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(COLUMNS)?;
    for r in records {
        wr.write_record(r.fields())?;
    }
    wr.flush()?;
    Ok(())
}

/// A parsed CSV row before range validation.
#[derive(Debug, Clone)]
pub struct RawRow {
    pub line: u64,
    pub record: std::result::Result<VisitRecord, String>,
    pub diagnosis_history: Option<String>,
}

fn parse_fields(f: &csv::StringRecord) -> std::result::Result<VisitRecord, String> {
    let get = |i: usize| f.get(i).unwrap_or("").trim();
    let required = |i: usize| {
        let v = get(i);
        if v.is_empty() {
            Err(format!("missing required field `{}`", COLUMNS[i]))
        } else {
            Ok(v)
        }
    };
    fn num<T: FromStr>(v: &str, name: &str) -> std::result::Result<T, String> {
        v.parse().map_err(|_| format!("`{name}` is not a valid number: `{v}`"))
    }
    let optional = |i: usize| -> Option<&str> {
        let v = get(i);
        (!v.is_empty()).then_some(v)
    };
    let mmse_raw: i64 = num(required(6)?, "mmse")?;
    Ok(VisitRecord {
        subject_id: required(0)?.to_string(),
        visit_id: required(1)?.to_string(),
        age: num(required(2)?, "age")?,
        gender: required(3)?.parse()?,
        apoe4: optional(4).map(|v| num(v, "apoe4")).transpose()?,
        cdr: num(required(5)?, "cdr")?,
        mmse: u8::try_from(mmse_raw).map_err(|_| format!("mmse out of range [0,30]: {mmse_raw}"))?,
        npiq: num(required(7)?, "npiq")?,
        abeta42: optional(8).map(|v| num(v, "abeta42")).transpose()?,
        amyloid_status: optional(9).map(|v| num(v, "amyloid_status")).transpose()?,
        label: required(10)?.parse()?,
        volume_ref: required(11)?.to_string(),
    })
}

/// Read a cohort CSV. Header mismatches are schema errors; malformed rows are
/// returned with their line numbers for the caller to reject or report.
pub fn read_csv_rows<R: Read>(r: R) -> Result<Vec<RawRow>> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(r);
    let header = rd.headers()?.clone();
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    let has_history = match names.as_slice() {
        n if n == COLUMNS => false,
        n if n.len() == COLUMNS.len() + 1 && n[..COLUMNS.len()] == COLUMNS && n[COLUMNS.len()] == DIAGNOSIS_HISTORY => true,
        _ => {
            return Err(Error::Schema(format!(
                "cohort header must be `{}` (optionally followed by `{DIAGNOSIS_HISTORY}`), got `{}`",
                COLUMNS.join(","),
                names.join(",")
            )))
        }
    };
    let width = header.len();
    let mut rows = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(i as u64 + 2);
        let record = if rec.len() != width {
            Err(format!("expected {width} fields, found {}", rec.len()))
        } else {
            parse_fields(&rec)
        };
        let diagnosis_history = has_history.then(|| rec.get(COLUMNS.len()).unwrap_or("").trim().to_string());
        rows.push(RawRow { line, record, diagnosis_history });
    }
    Ok(rows)
}

/// Strict reader: any malformed row is a line-numbered parse error.
pub fn read_csv<R: Read>(r: R) -> Result<Vec<VisitRecord>> {
    read_csv_rows(r)?
        .into_iter()
        .map(|row| row.record.map_err(|msg| Error::Parse { line: row.line, msg }))
        .collect()
}
