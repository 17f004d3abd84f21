//! Cohort ingestion: field and range checks, volume sidecar checks, and
//! conversion relabelling from an optional diagnosis history.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cohort::{read_csv_rows, Label, VisitRecord};
use crate::error::{Error, Result};
use crate::volume::{read_sidecar, DTYPE_F32LE};

/// Conversion window, in years after the first visit.
pub const CONVERSION_WINDOW_YEARS: f64 = 4.0;

const CDR_STAGES: [f64; 5] = [0.0, 0.5, 1.0, 2.0, 3.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reject {
    pub line: u64,
    pub subject_id: Option<String>,
    pub visit_id: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub records: Vec<VisitRecord>,
    pub rejects: Vec<Reject>,
    /// Visits whose label changed after applying the diagnosis history.
    pub relabeled: usize,
    /// Common volume dims (None when no visit was accepted).
    pub dims: Option<[usize; 3]>,
}

fn check_ranges(r: &VisitRecord) -> std::result::Result<(), String> {
    if !(r.age.is_finite() && r.age > 0.0 && r.age < 130.0) {
        return Err(format!("age out of range (0,130): {}", r.age));
    }
    if r.mmse > 30 {
        return Err(format!("mmse out of range [0,30]: {}", r.mmse));
    }
    if !CDR_STAGES.contains(&r.cdr) {
        return Err(format!("cdr must be one of 0, 0.5, 1, 2, 3: {}", r.cdr));
    }
    if !(r.npiq.is_finite() && r.npiq >= 0.0) {
        return Err(format!("npiq must be a finite non-negative number: {}", r.npiq));
    }
    if matches!(r.apoe4, Some(a) if a > 2) {
        return Err(format!("apoe4 out of range [0,2]: {}", r.apoe4.unwrap()));
    }
    if matches!(r.amyloid_status, Some(a) if a > 1) {
        return Err(format!("amyloid_status must be 0 or 1: {}", r.amyloid_status.unwrap()));
    }
    if matches!(r.abeta42, Some(a) if !(a.is_finite() && a > 0.0)) {
        return Err(format!("abeta42 must be positive: {}", r.abeta42.unwrap()));
    }
    Ok(())
}

/// Label from a history of `years:diagnosis` entries separated by `;`
/// (years since the first visit). Converter iff AD is diagnosed after
/// baseline and no later than [`CONVERSION_WINDOW_YEARS`].
pub fn label_from_history(history: &str) -> std::result::Result<Label, String> {
    let mut converter = false;
    for entry in history.split(';').map(str::trim).filter(|e| !e.is_empty()) {
        let (years, dx) = entry
            .split_once(':')
            .ok_or_else(|| format!("diagnosis history entry `{entry}` is not `years:diagnosis`"))?;
        let years: f64 = years
            .trim()
            .parse()
            .map_err(|_| format!("diagnosis history entry `{entry}` has a non-numeric year"))?;
        if !(years.is_finite() && years >= 0.0) {
            return Err(format!("diagnosis history entry `{entry}` has a negative year"));
        }
        match dx.trim() {
            "CN" | "MCI" => {}
            "AD" if years == 0.0 => return Err("AD diagnosed at baseline".into()),
            "AD" => converter |= years <= CONVERSION_WINDOW_YEARS,
            other => return Err(format!("unknown diagnosis `{other}` (expected CN, MCI or AD)")),
        }
    }
    Ok(if converter { Label::Converter } else { Label::NonConverter })
}

fn check_volume(volume_dir: &Path, r: &VisitRecord) -> std::result::Result<[usize; 3], String> {
    let raw = volume_dir.join(&r.volume_ref);
    let sc = read_sidecar(&raw).map_err(|e| format!("volume sidecar: {e}"))?;
    if sc.dtype != DTYPE_F32LE {
        return Err(format!("volume dtype must be {DTYPE_F32LE}, got {}", sc.dtype));
    }
    if sc.dims.contains(&0) {
        return Err(format!("volume dims {:?} contain zero", sc.dims));
    }
    let len = fs::metadata(&raw).map_err(|e| format!("volume {}: {e}", raw.display()))?.len();
    let expected = sc.dims.iter().product::<usize>() as u64 * 4;
    if len != expected {
        return Err(format!("volume {} has {len} bytes, sidecar dims need {expected}", raw.display()));
    }
    Ok(sc.dims)
}

/// Missing or out-of-range fields and bad volumes reject the row; rows that
/// cannot be parsed at all are a line-numbered error.
pub fn ingest(cohort_csv: &Path, volume_dir: &Path) -> Result<IngestReport> {
    let file = fs::File::open(cohort_csv).map_err(|e| Error::io(cohort_csv, e))?;
    let rows = read_csv_rows(std::io::BufReader::new(file))?;
    let mut records = Vec::new();
    let mut rejects = Vec::new();
    let mut relabeled = 0;
    let mut dims: Option<[usize; 3]> = None;
    let mut seen = HashSet::new();
    for row in rows {
        let mut rec = match row.record {
            Ok(r) => r,
            Err(msg) if msg.starts_with("missing required field") || msg.contains("out of range") => {
                rejects.push(Reject { line: row.line, subject_id: None, visit_id: None, reason: msg });
                continue;
            }
            Err(msg) => return Err(Error::Parse { line: row.line, msg }),
        };
        let mut reject = |reason: String, rec: &VisitRecord| {
            rejects.push(Reject {
                line: row.line,
                subject_id: Some(rec.subject_id.clone()),
                visit_id: Some(rec.visit_id.clone()),
                reason,
            })
        };
        if let Err(reason) = check_ranges(&rec) {
            reject(reason, &rec);
            continue;
        }
        if let Some(history) = row.diagnosis_history.as_deref().filter(|h| !h.is_empty()) {
            match label_from_history(history) {
                Ok(label) => {
                    if label != rec.label {
                        relabeled += 1;
                        rec.label = label;
                    }
                }
                Err(reason) => {
                    reject(reason, &rec);
                    continue;
                }
            }
        }
        if !seen.insert(rec.key()) {
            reject(format!("duplicate visit {}", rec.key()), &rec);
            continue;
        }
        match check_volume(volume_dir, &rec) {
            Ok(d) if dims.is_some_and(|first| first != d) => {
                reject(format!("volume dims {d:?} differ from the cohort's {:?}", dims.unwrap()), &rec);
                continue;
            }
            Ok(d) => dims = Some(d),
            Err(reason) => {
                reject(reason, &rec);
                continue;
            }
        }
        records.push(rec);
    }
    for r in &rejects {
        log::warn!("line {}: rejected: {}", r.line, r.reason);
    }
    Ok(IngestReport { records, rejects, relabeled, dims })
}
