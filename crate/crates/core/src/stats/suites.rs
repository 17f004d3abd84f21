//! Association (odds ratios per adjustment set) and discrimination (fit on
//! one set, evaluate on another) over DNPI joined with the cohort table.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::describe::mean_sd;
use super::logit::{logit_fit, AssociationResult, Coefficient, DesignMatrix};
use super::roc::{bootstrap, fixed_fpr_operating_point, roc_auc, BandPoint, BootstrapConfig, Confusion, ResampleUnit, RocPoint};
use crate::cohort::VisitRecord;
use crate::deviation::DeviationRecord;
use crate::error::{Error, Result};
use crate::exec::Exec;

pub const DNPI: &str = "dnpi";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Covariate {
    Age,
    /// Coded M = 1, F = 0.
    Gender,
    Apoe4,
    Cdr,
    Mmse,
    /// Binary amyloid positivity: the recorded status, else `abeta42 < cutoff`.
    Amyloid,
    /// Continuous CSF Aβ42.
    Abeta42,
}

impl Covariate {
    pub fn column(self) -> &'static str {
        match self {
            Covariate::Age => "age",
            Covariate::Gender => "gender",
            Covariate::Apoe4 => "apoe4",
            Covariate::Cdr => "cdr",
            Covariate::Mmse => "mmse",
            Covariate::Amyloid => "amyloid_status",
            Covariate::Abeta42 => "abeta42",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Covariate::Age => "Age",
            Covariate::Gender => "Gender",
            Covariate::Apoe4 => "APOE4",
            Covariate::Cdr => "CDR",
            Covariate::Mmse => "MMSE",
            Covariate::Amyloid => "Aβ42",
            Covariate::Abeta42 => "Aβ42 (continuous)",
        }
    }

    fn value(self, r: &VisitRecord, amyloid_cutoff: Option<f64>) -> Result<Option<f64>> {
        Ok(match self {
            Covariate::Age => Some(r.age),
            Covariate::Gender => Some(r.gender.code()),
            Covariate::Apoe4 => r.apoe4.map(f64::from),
            Covariate::Cdr => Some(r.cdr),
            Covariate::Mmse => Some(f64::from(r.mmse)),
            Covariate::Abeta42 => r.abeta42,
            Covariate::Amyloid => match (r.amyloid_status, r.abeta42, amyloid_cutoff) {
                (Some(s), _, _) => Some(f64::from(s)),
                (None, Some(a), Some(cut)) => Some(if a < cut { 1.0 } else { 0.0 }),
                (None, Some(_), None) => {
                    return Err(Error::Config(format!(
                        "visit {} has no amyloid_status; deriving it from abeta42 needs an amyloid cutoff",
                        r.key()
                    )))
                }
                (None, None, _) => {
                    return Err(Error::Config(format!("visit {} has neither amyloid_status nor abeta42", r.key())))
                }
            },
        })
    }
}

impl fmt::Display for Covariate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AdjustmentSet {
    pub covariates: Vec<Covariate>,
}

impl AdjustmentSet {
    pub fn new(covariates: &[Covariate]) -> Self {
        AdjustmentSet { covariates: covariates.to_vec() }
    }

    pub fn label(&self) -> String {
        if self.covariates.is_empty() {
            "DNPI (Unadjusted)".to_string()
        } else {
            let names: Vec<&str> = self.covariates.iter().map(|c| c.label()).collect();
            format!("+ {}", names.join(", "))
        }
    }

    /// The rows of the published association table.
    pub fn table_one() -> Vec<AdjustmentSet> {
        use Covariate::*;
        vec![
            Self::new(&[]),
            Self::new(&[Gender]),
            Self::new(&[Age]),
            Self::new(&[Cdr]),
            Self::new(&[Mmse]),
            Self::new(&[Amyloid]),
            Self::new(&[Gender, Age, Cdr, Amyloid]),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SuiteOptions {
    /// Report the DNPI odds ratio per standard deviation instead of per point.
    pub standardize_dnpi: bool,
    pub amyloid_cutoff: Option<f64>,
}

/// A scored visit joined with its cohort row.
#[derive(Debug, Clone, PartialEq)]
pub struct Joined {
    pub dnpi: f64,
    pub visit: VisitRecord,
}

/// Inner join on (subject_id, visit_id). Every deviation record must match a
/// cohort row; cohort rows without a score are skipped.
pub fn join(dnpi: &[DeviationRecord], cohort: &[VisitRecord]) -> Result<Vec<Joined>> {
    let by_key: HashMap<String, &VisitRecord> = cohort.iter().map(|r| (r.key(), r)).collect();
    let mut missing = Vec::new();
    let mut out = Vec::with_capacity(dnpi.len());
    for d in dnpi {
        match by_key.get(&d.key()) {
            Some(v) => out.push(Joined { dnpi: d.dnpi, visit: (*v).clone() }),
            None => missing.push(d.key()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Join { ids: missing });
    }
    Ok(out)
}

fn design(rows: &[Joined], lead: (&str, fn(&Joined) -> Option<f64>), covariates: &[Covariate], cutoff: Option<f64>) -> Result<DesignMatrix> {
    let mut names = vec![lead.0];
    names.extend(covariates.iter().map(|c| c.column()));
    let mut cells = Vec::with_capacity(rows.len());
    for r in rows {
        let mut row = vec![(lead.1)(r)];
        for c in covariates {
            row.push(c.value(&r.visit, cutoff)?);
        }
        cells.push((row, r.visit.label.is_converter()));
    }
    DesignMatrix::new(&names, cells)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationRow {
    pub model: String,
    pub covariates: Vec<Covariate>,
    /// `"raw"` (per point) or `"per_sd"`.
    pub dnpi_units: String,
    pub dnpi: Coefficient,
    pub dropped: usize,
    pub fit: AssociationResult,
}

/// One logistic fit per adjustment set with DNPI always the first predictor.
pub fn association_suite(
    dnpi: &[DeviationRecord],
    cohort: &[VisitRecord],
    sets: &[AdjustmentSet],
    options: &SuiteOptions,
) -> Result<Vec<AssociationRow>> {
    let mut rows = join(dnpi, cohort)?;
    if options.standardize_dnpi {
        let vals: Vec<f64> = rows.iter().map(|r| r.dnpi).collect();
        let sd = mean_sd(&vals).map(|(_, sd)| sd).unwrap_or(0.0);
        if sd == 0.0 {
            return Err(Error::ZeroVariance);
        }
        rows.iter_mut().for_each(|r| r.dnpi /= sd);
    }
    sets.iter()
        .map(|set| {
            let x = design(&rows, (DNPI, |r| Some(r.dnpi)), &set.covariates, options.amyloid_cutoff)?;
            let fit = logit_fit(&x)?;
            Ok(AssociationRow {
                model: set.label(),
                covariates: set.covariates.clone(),
                dnpi_units: if options.standardize_dnpi { "per_sd" } else { "raw" }.to_string(),
                dnpi: fit.coefficient(DNPI).cloned().expect("dnpi column present"),
                dropped: x.dropped,
                fit,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predictor {
    Dnpi,
    Abeta42,
}

impl Predictor {
    fn column(self) -> (&'static str, fn(&Joined) -> Option<f64>) {
        match self {
            Predictor::Dnpi => (DNPI, |r| Some(r.dnpi)),
            Predictor::Abeta42 => ("abeta42", |r| r.visit.abeta42),
        }
    }

    fn label(self) -> &'static str {
        match self {
            Predictor::Dnpi => "DNPI",
            Predictor::Abeta42 => "Aβ42",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub predictor: Predictor,
    #[serde(default)]
    pub covariates: Vec<Covariate>,
}

impl ModelSpec {
    pub fn new(predictor: Predictor, covariates: &[Covariate]) -> Self {
        ModelSpec { predictor, covariates: covariates.to_vec() }
    }

    pub fn label(&self) -> String {
        if self.covariates.is_empty() {
            format!("{} (univariate)", self.predictor.label())
        } else {
            let mut s = self.predictor.label().to_string();
            for c in &self.covariates {
                s.push_str(" + ");
                s.push_str(match c {
                    Covariate::Age => "age",
                    Covariate::Gender => "gender",
                    other => other.label(),
                });
            }
            s
        }
    }

    /// The rows of the published discrimination table.
    pub fn table_two() -> Vec<ModelSpec> {
        use Covariate::*;
        vec![
            Self::new(Predictor::Dnpi, &[]),
            Self::new(Predictor::Abeta42, &[]),
            Self::new(Predictor::Abeta42, &[Age, Gender, Cdr]),
            Self::new(Predictor::Dnpi, &[Age, Gender, Cdr]),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminationOptions {
    pub fpr_cap: f64,
    pub bootstrap: BootstrapConfig,
    /// Also report a subject-level bootstrap interval for the AUC.
    pub cluster_by_subject: bool,
    pub amyloid_cutoff: Option<f64>,
}

impl DiscriminationOptions {
    pub fn new(n_iter: usize, seed: u64) -> Self {
        DiscriminationOptions {
            fpr_cap: 0.2,
            bootstrap: BootstrapConfig::new(n_iter, seed),
            cluster_by_subject: false,
            amyloid_cutoff: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminationReport {
    pub model: String,
    pub spec: ModelSpec,
    pub n_fit: usize,
    pub n_eval: usize,
    pub auc: f64,
    pub auc_ci95: [f64; 2],
    pub balanced_accuracy: f64,
    pub balanced_accuracy_ci95: [f64; 2],
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
    pub f1_ci95: [f64; 2],
    /// Predicted-probability threshold; positive when probability > threshold.
    pub threshold: f64,
    pub fpr_cap: f64,
    pub achieved_fpr: f64,
    pub confusion: Confusion,
    /// Thresholds are predicted probabilities (the first point is `+inf`).
    pub roc_points: Vec<RocPoint>,
    pub roc_band: Vec<BandPoint>,
    pub bootstrap_redrawn: usize,
    pub subject_auc_ci95: Option<[f64; 2]>,
    pub fit: AssociationResult,
}

fn ensure_column(rows: &[Joined], spec: &ModelSpec, which: &str) -> Result<()> {
    let (name, get) = spec.predictor.column();
    if !rows.is_empty() && rows.iter().all(|r| get(r).is_none()) {
        return Err(Error::Config(format!("model `{}`: column `{name}` is missing from the {which} set", spec.label())));
    }
    for c in &spec.covariates {
        let absent = match c {
            Covariate::Apoe4 => rows.iter().all(|r| r.visit.apoe4.is_none()),
            Covariate::Abeta42 => rows.iter().all(|r| r.visit.abeta42.is_none()),
            _ => false,
        };
        if absent && !rows.is_empty() {
            return Err(Error::Config(format!(
                "model `{}`: column `{}` is missing from the {which} set",
                spec.label(),
                c.column()
            )));
        }
    }
    Ok(())
}

/// Fit each model on `fit_set`, score `eval_set` with predicted
/// probabilities and summarize discrimination there.
pub fn discrimination_suite(
    fit_set: &[Joined],
    eval_set: &[Joined],
    specs: &[ModelSpec],
    options: &DiscriminationOptions,
    exec: Exec,
) -> Result<Vec<DiscriminationReport>> {
    specs
        .iter()
        .map(|spec| {
            ensure_column(fit_set, spec, "fit")?;
            ensure_column(eval_set, spec, "evaluation")?;
            let xf = design(fit_set, spec.predictor.column(), &spec.covariates, options.amyloid_cutoff)?;
            let fit = logit_fit(&xf)?;
            // keep the subject of every evaluation row that survives missing-cell dropping
            let (lead, get) = spec.predictor.column();
            let mut kept = Vec::new();
            for r in eval_set {
                let mut complete = get(r).is_some();
                for c in &spec.covariates {
                    complete &= c.value(&r.visit, options.amyloid_cutoff)?.is_some();
                }
                if complete {
                    kept.push(r);
                }
            }
            let xe = design(eval_set, (lead, get), &spec.covariates, options.amyloid_cutoff)?;
            let probs = fit.predict(&xe)?;
            let labels: Vec<bool> = xe.outcome().iter().map(|&y| y == 1.0).collect();
            let curve = roc_auc(&probs, &labels)?;
            let op = fixed_fpr_operating_point(&probs, &labels, options.fpr_cap)?;
            let mut cfg = options.bootstrap.clone();
            cfg.fpr_cap = options.fpr_cap;
            cfg.unit = ResampleUnit::Row;
            let boot = bootstrap(&probs, &labels, None, &cfg, exec)?;
            let subject_auc_ci95 = if options.cluster_by_subject {
                let mut ids = BTreeMap::new();
                let clusters: Vec<usize> = kept
                    .iter()
                    .map(|r| {
                        let next = ids.len();
                        *ids.entry(r.visit.subject_id.clone()).or_insert(next)
                    })
                    .collect();
                cfg.unit = ResampleUnit::Subject;
                Some(bootstrap(&probs, &labels, Some(&clusters), &cfg, exec)?.auc_ci95)
            } else {
                None
            };
            Ok(DiscriminationReport {
                model: spec.label(),
                spec: spec.clone(),
                n_fit: xf.n_rows(),
                n_eval: xe.n_rows(),
                auc: curve.auc,
                auc_ci95: boot.auc_ci95,
                balanced_accuracy: op.balanced_accuracy,
                balanced_accuracy_ci95: boot.balanced_accuracy_ci95,
                sensitivity: op.sensitivity,
                specificity: op.specificity,
                f1: op.f1,
                f1_ci95: boot.f1_ci95,
                threshold: op.threshold,
                fpr_cap: options.fpr_cap,
                achieved_fpr: op.achieved_fpr,
                confusion: op.confusion,
                roc_points: curve.points,
                roc_band: boot.roc_band,
                bootstrap_redrawn: boot.redrawn,
                subject_auc_ci95,
                fit,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{Gender, Label};
    use crate::deviation::SignConvention;

    fn visit(i: usize, dnpi_like: f64, conv: bool) -> (DeviationRecord, VisitRecord) {
        let v = VisitRecord {
            subject_id: format!("S{i:03}"),
            visit_id: "V1".into(),
            age: 60.0 + (i % 17) as f64,
            gender: if i.is_multiple_of(2) { Gender::M } else { Gender::F },
            apoe4: Some((i % 3) as u8),
            cdr: if i.is_multiple_of(4) { 0.5 } else { 0.0 },
            mmse: 25 + (i % 6) as u8,
            npiq: 3.0,
            abeta42: Some(700.0 + ((i * 37) % 500) as f64),
            amyloid_status: None,
            label: if conv { Label::Converter } else { Label::NonConverter },
            volume_ref: String::new(),
        };
        let d = DeviationRecord::new(&v.subject_id, "V1", 3.0 + dnpi_like, 3.0, SignConvention::default(), "c");
        (d, v)
    }

    fn cohort(n: usize) -> (Vec<DeviationRecord>, Vec<VisitRecord>) {
        (0..n)
            .map(|i| {
                let x = ((i * 7919) % 101) as f64 / 25.0 - 2.0;
                let conv = ((i * 104729) % 97) as f64 / 97.0 < crate::stats::logit::sigmoid(-1.0 + x);
                visit(i, x, conv)
            })
            .unzip()
    }

    #[test]
    fn unadjusted_row_matches_direct_fit() {
        let (d, c) = cohort(150);
        let rows = association_suite(&d, &c, &[AdjustmentSet::default()], &SuiteOptions::default()).unwrap();
        assert_eq!(rows[0].model, "DNPI (Unadjusted)");
        let x = DesignMatrix::new(&["dnpi"], d.iter().zip(&c).map(|(d, v)| (vec![Some(d.dnpi)], v.label.is_converter()))).unwrap();
        assert_eq!(rows[0].fit, logit_fit(&x).unwrap());
    }

    #[test]
    fn unmatched_visits_are_a_join_error() {
        let (mut d, c) = cohort(20);
        d.push(DeviationRecord::new("S999", "V9", 1.0, 0.0, SignConvention::default(), "c"));
        match association_suite(&d, &c, &[AdjustmentSet::default()], &SuiteOptions::default()) {
            Err(Error::Join { ids }) => assert_eq!(ids, vec!["S999/V9".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn amyloid_needs_status_or_cutoff() {
        let (d, c) = cohort(60);
        let set = [AdjustmentSet::new(&[Covariate::Amyloid])];
        assert!(matches!(association_suite(&d, &c, &set, &SuiteOptions::default()), Err(Error::Config(_))));
        let opts = SuiteOptions { amyloid_cutoff: Some(880.0), ..Default::default() };
        let rows = association_suite(&d, &c, &set, &opts).unwrap();
        assert_eq!(rows[0].model, "+ Aβ42");
    }

    #[test]
    fn sign_flip_negates_beta_and_inverts_or() {
        let (d, c) = cohort(150);
        let flipped: Vec<_> = d.iter().map(|r| r.flipped()).collect();
        let a = &association_suite(&d, &c, &[AdjustmentSet::default()], &SuiteOptions::default()).unwrap()[0];
        let b = &association_suite(&flipped, &c, &[AdjustmentSet::default()], &SuiteOptions::default()).unwrap()[0];
        assert!((a.dnpi.beta + b.dnpi.beta).abs() < 1e-9);
        assert!((a.dnpi.odds_ratio * b.dnpi.odds_ratio - 1.0).abs() < 1e-9);
        assert!((a.dnpi.p_value - b.dnpi.p_value).abs() < 1e-9);
    }

    #[test]
    fn table_labels() {
        let labels: Vec<String> = AdjustmentSet::table_one().iter().map(|s| s.label()).collect();
        assert_eq!(labels.last().unwrap(), "+ Gender, Age, CDR, Aβ42");
        let labels: Vec<String> = ModelSpec::table_two().iter().map(|s| s.label()).collect();
        assert_eq!(labels, ["DNPI (univariate)", "Aβ42 (univariate)", "Aβ42 + age + gender + CDR", "DNPI + age + gender + CDR"]);
    }

    #[test]
    fn univariate_auc_equals_raw_predictor_auc() {
        let (d, c) = cohort(150);
        let joined = join(&d, &c).unwrap();
        let opts = DiscriminationOptions::new(100, 1);
        let r = &discrimination_suite(&joined, &joined, &[ModelSpec::new(Predictor::Dnpi, &[])], &opts, Exec::Sequential).unwrap()[0];
        assert!(r.fit.coefficient("dnpi").unwrap().beta > 0.0);
        let raw: Vec<f64> = joined.iter().map(|j| j.dnpi).collect();
        let labels: Vec<bool> = joined.iter().map(|j| j.visit.label.is_converter()).collect();
        assert_eq!(r.auc, roc_auc(&raw, &labels).unwrap().auc);
        assert!(r.auc_ci95[0] <= r.auc && r.auc <= r.auc_ci95[1]);
        assert!((r.balanced_accuracy - (r.sensitivity + r.specificity) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn missing_column_is_config_error() {
        let (d, mut c) = cohort(40);
        c.iter_mut().for_each(|v| v.abeta42 = None);
        let joined = join(&d, &c).unwrap();
        let opts = DiscriminationOptions::new(10, 1);
        let r = discrimination_suite(&joined, &joined, &[ModelSpec::new(Predictor::Abeta42, &[])], &opts, Exec::Sequential);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn subject_level_interval_is_reported_on_request() {
        let (d, c) = cohort(120);
        let joined = join(&d, &c).unwrap();
        let mut opts = DiscriminationOptions::new(50, 2);
        opts.cluster_by_subject = true;
        let r = &discrimination_suite(&joined, &joined, &[ModelSpec::new(Predictor::Dnpi, &[])], &opts, Exec::Sequential).unwrap()[0];
        assert!(r.subject_auc_ci95.is_some());
    }
}
