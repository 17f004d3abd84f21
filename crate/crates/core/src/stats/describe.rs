//! Group summaries: mean ± SD for continuous variables, N [%] for categorical ones.

use serde::{Deserialize, Serialize};

use crate::cohort::{Gender, Label, VisitRecord};

/// Sample mean and standard deviation (n − 1 denominator; 0 for a single value).
pub fn mean_sd(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    Some((mean, (ss / (n - 1.0)).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Summary {
    Continuous { mean: f64, sd: f64 },
    Count { count: usize, percent: f64 },
    /// The group has no visits (or no observed values for this variable).
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescribeRow {
    pub variable: String,
    pub group: Label,
    pub n: usize,
    pub summary: Summary,
}

impl DescribeRow {
    pub fn display_value(&self) -> String {
        match &self.summary {
            Summary::Continuous { mean, sd } => format!("{mean:.2} ± {sd:.2}"),
            Summary::Count { count, percent } => format!("{count} [{percent:.1}%]"),
            Summary::Empty => "n=0".to_string(),
        }
    }
}

type Extract = fn(&VisitRecord) -> Option<f64>;

const CONTINUOUS: [(&str, Extract); 5] = [
    ("age", |r| Some(r.age)),
    ("mmse", |r| Some(r.mmse as f64)),
    ("cdr", |r| Some(r.cdr)),
    ("npiq", |r| Some(r.npiq)),
    ("abeta42", |r| r.abeta42),
];

type Flag = fn(&VisitRecord) -> Option<bool>;

const CATEGORICAL: [(&str, Flag); 3] = [
    ("male", |r| Some(r.gender == Gender::M)),
    ("apoe4_carrier", |r| r.apoe4.map(|a| a > 0)),
    ("amyloid_positive", |r| r.amyloid_status.map(|a| a > 0)),
];

/// Per-group summary table. A group with no visits yields a single `n=0` row.
pub fn describe(cohort: &[VisitRecord]) -> Vec<DescribeRow> {
    let mut rows = Vec::new();
    for group in [Label::Converter, Label::NonConverter] {
        let members: Vec<&VisitRecord> = cohort.iter().filter(|r| r.label == group).collect();
        if members.is_empty() {
            rows.push(DescribeRow { variable: "visits".into(), group, n: 0, summary: Summary::Empty });
            continue;
        }
        rows.push(DescribeRow {
            variable: "visits".into(),
            group,
            n: members.len(),
            summary: Summary::Count { count: members.len(), percent: 100.0 * members.len() as f64 / cohort.len() as f64 },
        });
        for (name, f) in CONTINUOUS {
            let vals: Vec<f64> = members.iter().filter_map(|r| f(r)).collect();
            let summary = match mean_sd(&vals) {
                Some((mean, sd)) => Summary::Continuous { mean, sd },
                None => Summary::Empty,
            };
            rows.push(DescribeRow { variable: name.into(), group, n: vals.len(), summary });
        }
        for (name, f) in CATEGORICAL {
            let vals: Vec<bool> = members.iter().filter_map(|r| f(r)).collect();
            let summary = if vals.is_empty() {
                Summary::Empty
            } else {
                let count = vals.iter().filter(|&&b| b).count();
                Summary::Count { count, percent: 100.0 * count as f64 / vals.len() as f64 }
            };
            rows.push(DescribeRow { variable: name.into(), group, n: vals.len(), summary });
        }
    }
    rows
}
