//! Normative scoring: DNPI is the residual between observed NPIQ and the
//! score the normative model predicts from anatomy.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cohort::VisitRecord;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::volnet::ModelState;
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignConvention {
    /// Positive DNPI means more symptoms than the anatomy predicts.
    #[default]
    ObservedMinusPredicted,
    PredictedMinusObserved,
}

impl SignConvention {
    pub fn apply(self, observed: f64, predicted: f64) -> f64 {
        match self {
            SignConvention::ObservedMinusPredicted => observed - predicted,
            SignConvention::PredictedMinusObserved => predicted - observed,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            SignConvention::ObservedMinusPredicted => SignConvention::PredictedMinusObserved,
            SignConvention::PredictedMinusObserved => SignConvention::ObservedMinusPredicted,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SignConvention::ObservedMinusPredicted => "observed_minus_predicted",
            SignConvention::PredictedMinusObserved => "predicted_minus_observed",
        }
    }
}

impl fmt::Display for SignConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SignConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "observed_minus_predicted" => Ok(SignConvention::ObservedMinusPredicted),
            "predicted_minus_observed" => Ok(SignConvention::PredictedMinusObserved),
            other => Err(Error::Argument(format!("unknown sign convention `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationRecord {
    pub subject_id: String,
    pub visit_id: String,
    pub observed_npiq: f64,
    pub predicted_npiq: f64,
    pub dnpi: f64,
    pub sign_convention: SignConvention,
    pub checkpoint_id: String,
}

impl DeviationRecord {
    pub fn new(
        subject_id: &str,
        visit_id: &str,
        observed: f64,
        predicted: f64,
        convention: SignConvention,
        checkpoint_id: &str,
    ) -> Self {
        DeviationRecord {
            subject_id: subject_id.to_string(),
            visit_id: visit_id.to_string(),
            observed_npiq: observed,
            predicted_npiq: predicted,
            dnpi: convention.apply(observed, predicted),
            sign_convention: convention,
            checkpoint_id: checkpoint_id.to_string(),
        }
    }

    pub fn key(&self) -> String {
        crate::cohort::visit_key(&self.subject_id, &self.visit_id)
    }

    /// The same residual under the opposite convention.
    pub fn flipped(&self) -> Self {
        Self::new(
            &self.subject_id,
            &self.visit_id,
            self.observed_npiq,
            self.predicted_npiq,
            self.sign_convention.flipped(),
            &self.checkpoint_id,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ScoreOptions {
    pub convention: SignConvention,
    /// Permit scoring visits the model was trained on.
    pub allow_training_visits: bool,
}

/// One record per visit, in input order. `volumes[i]` belongs to `visits[i]`.
/// No augmentation is applied.
pub fn score_cohort(
    model: &ModelState,
    checkpoint_id: &str,
    visits: &[VisitRecord],
    volumes: &[Volume],
    options: ScoreOptions,
    exec: Exec,
) -> Result<Vec<DeviationRecord>> {
    if visits.len() != volumes.len() {
        return Err(Error::Shape(format!("{} visits but {} volumes", visits.len(), volumes.len())));
    }
    let manifest: BTreeSet<&str> = model.provenance.training_manifest.iter().map(String::as_str).collect();
    for v in visits {
        if manifest.contains(v.key().as_str()) {
            if options.allow_training_visits {
                log::warn!("scoring training visit {} (override enabled)", v.key());
            } else {
                return Err(Error::Leakage(v.key()));
            }
        }
    }
    let predicted = model.predict(volumes, exec)?;
    Ok(visits
        .iter()
        .zip(predicted)
        .map(|(v, p)| DeviationRecord::new(&v.subject_id, &v.visit_id, v.npiq, p, options.convention, checkpoint_id))
        .collect())
}

pub fn write_csv<W: Write>(records: &[DeviationRecord], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in records {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

/// Reads a deviation CSV and checks that every `dnpi` matches its declared
/// convention exactly.
pub fn read_csv<R: Read>(r: R) -> Result<Vec<DeviationRecord>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (i, row) in rd.deserialize::<DeviationRecord>().enumerate() {
        let rec = row.map_err(|e| Error::Parse { line: i as u64 + 2, msg: e.to_string() })?;
        if rec.sign_convention.apply(rec.observed_npiq, rec.predicted_npiq) != rec.dnpi {
            return Err(Error::Parse {
                line: i as u64 + 2,
                msg: format!("dnpi does not equal {} of observed and predicted", rec.sign_convention),
            });
        }
        out.push(rec);
    }
    Ok(out)
}
