//! End-to-end orchestration. Each stage reads and writes artifacts in the
//! output directory, so stages can also run one at a time.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{RunConfig, Seeds};
use super::ingest::{ingest, IngestReport};
use super::report::{render_reports, ModelFailure, Reports};
use super::splits::{audit, make_splits, AuditReport, Split, SplitManifest};
use crate::cohort::VisitRecord;
use crate::deviation::{self, score_cohort, DeviationRecord, ScoreOptions};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::stats::suites::{join, DiscriminationOptions, Joined, SuiteOptions};
use crate::stats::{
    association_suite, describe, discrimination_suite, mann_whitney_u, welch_t, AssociationRow, DescribeRow,
    DiscriminationReport, MannWhitney, WelchT,
};
use crate::volnet::{checkpoint, train, EpochLoss, ModelState, NetSpec, Sample};
use crate::volume::Volume;

pub const INGEST_JSON: &str = "ingest.json";
pub const SPLITS_JSON: &str = "splits.json";
pub const CHECKPOINT: &str = "checkpoint.npick";
pub const TRAINING_JSON: &str = "training.json";
pub const DEVIATION_CSV: &str = "deviation.csv";
pub const DESCRIBE_JSON: &str = "describe.json";
pub const ASSOCIATION_JSON: &str = "association.json";
pub const DISCRIMINATION_JSON: &str = "discrimination.json";
pub const AUDIT_JSON: &str = "audit.json";
pub const RUN_JSON: &str = "run.json";
pub const REPORT_DIR: &str = "report";
pub const LOCK: &str = ".lock";
pub const STALE: &str = "STALE";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub config_sha256: String,
    pub cohort_sha256: String,
    pub seeds: Seeds,
    pub version: String,
}

impl Stamp {
    pub fn footer(&self) -> String {
        let aug = self.seeds.augment.map_or("none".to_string(), |s| s.to_string());
        format!(
            "config_sha256={} cohort_sha256={} seeds: train={} split={} bootstrap={} augment={}",
            self.config_sha256, self.cohort_sha256, self.seeds.train, self.seeds.split, self.seeds.bootstrap, aug
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub stamp: Stamp,
    pub data: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub checkpoint_id: String,
    pub n_params: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub history: Vec<EpochLoss>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupComparison {
    pub variable: String,
    pub welch: Option<WelchT>,
    pub mann_whitney: Option<MannWhitney>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Describe {
    pub rows: Vec<DescribeRow>,
    pub comparisons: Vec<GroupComparison>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationOutput {
    pub rows: Vec<AssociationRow>,
    pub failures: Vec<ModelFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminationOutput {
    pub reports: Vec<DiscriminationReport>,
    pub failures: Vec<ModelFailure>,
}

/// Numeric failures of one model are recorded; anything else aborts.
fn per_model<T>(model: String, r: Result<Vec<T>>, ok: &mut Vec<T>, failures: &mut Vec<ModelFailure>) -> Result<()> {
    match r {
        Ok(v) => ok.extend(v),
        Err(e) if e.exit_code() == 3 => {
            log::warn!("model `{model}` skipped: {e}");
            failures.push(ModelFailure { model, error: e.to_string() });
        }
        Err(e) => return Err(e),
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub checkpoint_id: String,
    pub n_visits: usize,
    pub n_rejected: usize,
    pub n_scored: usize,
    pub audit: AuditReport,
    /// SHA-256 of every artifact, keyed by path relative to the output dir.
    pub artifacts: BTreeMap<String, String>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn staged<T>(stage: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage { stage, source: Box::new(e) },
    })
}

/// ASCII file-name slug for a model label.
pub fn slug(label: &str) -> String {
    let mut s = String::new();
    for c in label.replace("Aβ42", "abeta42").chars() {
        if c.is_ascii_alphanumeric() {
            s.push(c.to_ascii_lowercase());
        } else if !s.ends_with('_') && !s.is_empty() {
            s.push('_');
        }
    }
    s.trim_end_matches('_').to_string()
}

/// A validated configuration bound to its output directory.
pub struct Context {
    pub config: RunConfig,
    pub stamp: Stamp,
    pub exec: Exec,
}

impl Context {
    /// Validates the configuration (before any compute) and hashes its inputs.
    pub fn new(config: RunConfig, exec: Exec) -> Result<Self> {
        staged("validate", config.validate())?;
        let stamp = Stamp {
            config_sha256: config.hash()?,
            cohort_sha256: sha256_file(&config.paths.cohort_csv)?,
            seeds: config.seeds(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        };
        Ok(Context { config, stamp, exec })
    }

    pub fn out(&self) -> &Path {
        &self.config.paths.output_dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out().join(name)
    }

    fn ensure_out(&self) -> Result<()> {
        fs::create_dir_all(self.out()).map_err(|e| Error::io(self.out(), e))
    }

    fn write_json<T: Serialize>(&self, name: &str, data: &T) -> Result<()> {
        self.ensure_out()?;
        let body = serde_json::to_string_pretty(&Stamped { stamp: self.stamp.clone(), data })? + "\n";
        let p = self.path(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))
    }

    fn read_json<T: DeserializeOwned>(&self, name: &str) -> Result<T> {
        let p = self.path(name);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let stamped: Stamped<T> = serde_json::from_str(&text)?;
        if stamped.stamp.cohort_sha256 != self.stamp.cohort_sha256 {
            log::warn!("{} was produced from a different cohort file", p.display());
        }
        Ok(stamped.data)
    }

    pub fn ingest(&self) -> Result<IngestReport> {
        staged("ingest", (|| {
            let report = ingest(&self.config.paths.cohort_csv, &self.config.paths.volume_dir)?;
            self.write_json(INGEST_JSON, &report)?;
            if report.records.is_empty() {
                return Err(Error::SampleSize("no visits passed ingestion".into()));
            }
            Ok(report)
        })())
    }

    pub fn split(&self, records: &[VisitRecord]) -> Result<SplitManifest> {
        staged("split", (|| {
            let m = make_splits(records, &self.config.splits.fractions, self.config.splits.seed)?;
            self.write_json(SPLITS_JSON, &m)?;
            Ok(m)
        })())
    }

    pub fn load_manifest(&self) -> Result<SplitManifest> {
        self.read_json(SPLITS_JSON)
    }

    fn volumes(&self, records: &[&VisitRecord]) -> Result<Vec<Volume>> {
        let dir = &self.config.paths.volume_dir;
        self.exec.try_map_range(records.len(), |i| Volume::read(&dir.join(&records[i].volume_ref)))
    }

    fn in_split<'a>(records: &'a [VisitRecord], manifest: &SplitManifest, split: Split) -> Vec<&'a VisitRecord> {
        records.iter().filter(|r| manifest.split_of(&r.subject_id, &r.visit_id) == Some(split)).collect()
    }

    /// Trains on training-split visits, selects on non-converter validation visits.
    pub fn train(&self, records: &[VisitRecord], manifest: &SplitManifest) -> Result<(ModelState, String)> {
        staged("train", (|| {
            let train_recs: Vec<&VisitRecord> =
                Self::in_split(records, manifest, Split::Train).into_iter().filter(|r| !r.label.is_converter()).collect();
            let val_recs: Vec<&VisitRecord> =
                Self::in_split(records, manifest, Split::Val).into_iter().filter(|r| !r.label.is_converter()).collect();
            let train_vols = self.volumes(&train_recs)?;
            let val_vols = self.volumes(&val_recs)?;
            let dims = train_vols.first().map(|v| v.dims()).ok_or_else(|| Error::Config("training split is empty".into()))?;
            let spec = NetSpec::preset(&self.config.model.preset, dims)?;
            fn samples<'a>(recs: &[&VisitRecord], vols: &'a [Volume]) -> Vec<Sample<'a>> {
                recs.iter().zip(vols).map(|(r, v)| Sample { volume: v, target: r.npiq }).collect()
            }
            let outcome = train(
                &samples(&train_recs, &train_vols),
                &samples(&val_recs, &val_vols),
                &spec,
                &self.config.train,
                self.config.augment.as_ref(),
                self.exec,
            )?;
            let mut model = outcome.state;
            model.provenance.training_manifest = train_recs.iter().map(|r| r.key()).collect();
            self.ensure_out()?;
            let id = checkpoint::save(&model, &self.path(CHECKPOINT))?;
            let summary = TrainingSummary {
                checkpoint_id: id.clone(),
                n_params: model.n_params(),
                n_train: train_recs.len(),
                n_val: val_recs.len(),
                best_epoch: model.epoch,
                best_val_loss: model.best_val_loss,
                history: outcome.history,
            };
            self.write_json(TRAINING_JSON, &summary)?;
            Ok((model, id))
        })())
    }

    pub fn load_checkpoint(&self) -> Result<(ModelState, String)> {
        checkpoint::load(&self.path(CHECKPOINT))
    }

    /// Scores every validation and test visit.
    pub fn score(&self, records: &[VisitRecord], manifest: &SplitManifest, model: &ModelState, checkpoint_id: &str) -> Result<Vec<DeviationRecord>> {
        staged("score", (|| {
            let visits: Vec<&VisitRecord> =
                records.iter().filter(|r| matches!(manifest.split_of(&r.subject_id, &r.visit_id), Some(Split::Val | Split::Test))).collect();
            let vols = self.volumes(&visits)?;
            let owned: Vec<VisitRecord> = visits.into_iter().cloned().collect();
            let options = ScoreOptions {
                convention: self.config.scoring.sign_convention,
                allow_training_visits: self.config.scoring.allow_training_visits,
            };
            let dev = score_cohort(model, checkpoint_id, &owned, &vols, options, self.exec)?;
            self.ensure_out()?;
            let p = self.path(DEVIATION_CSV);
            let f = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
            deviation::write_csv(&dev, std::io::BufWriter::new(f))?;
            Ok(dev)
        })())
    }

    pub fn load_deviation(&self) -> Result<Vec<DeviationRecord>> {
        let p = self.path(DEVIATION_CSV);
        let f = fs::File::open(&p).map_err(|e| Error::io(&p, e))?;
        deviation::read_csv(std::io::BufReader::new(f))
    }

    pub fn describe(&self, dev: &[DeviationRecord], records: &[VisitRecord]) -> Result<Describe> {
        staged("describe", (|| {
            let joined = join(dev, records)?;
            let visits: Vec<VisitRecord> = joined.iter().map(|j| j.visit.clone()).collect();
            let rows = describe(&visits);
            type Get = fn(&Joined) -> Option<f64>;
            let vars: [(&str, Get); 5] = [
                ("age", |j| Some(j.visit.age)),
                ("mmse", |j| Some(f64::from(j.visit.mmse))),
                ("cdr", |j| Some(j.visit.cdr)),
                ("npiq", |j| Some(j.visit.npiq)),
                ("dnpi", |j| Some(j.dnpi)),
            ];
            let comparisons = vars
                .iter()
                .map(|(name, get)| {
                    let group = |conv: bool| -> Vec<f64> {
                        joined.iter().filter(|j| j.visit.label.is_converter() == conv).filter_map(get).collect()
                    };
                    let (a, b) = (group(true), group(false));
                    let welch = welch_t(&a, &b);
                    let mwu = mann_whitney_u(&a, &b);
                    let note = match (&welch, &mwu) {
                        (Err(e), _) | (_, Err(e)) => Some(e.to_string()),
                        _ => None,
                    };
                    GroupComparison { variable: name.to_string(), welch: welch.ok(), mann_whitney: mwu.ok(), note }
                })
                .collect();
            let d = Describe { rows, comparisons };
            self.write_json(DESCRIBE_JSON, &d)?;
            Ok(d)
        })())
    }

    pub fn associate(&self, dev: &[DeviationRecord], records: &[VisitRecord]) -> Result<AssociationOutput> {
        staged("assoc", (|| {
            let a = &self.config.association;
            let options = SuiteOptions { standardize_dnpi: a.standardize_dnpi, amyloid_cutoff: a.amyloid_cutoff };
            let mut out = AssociationOutput { rows: Vec::new(), failures: Vec::new() };
            for set in &a.adjustment_sets {
                let r = association_suite(dev, records, std::slice::from_ref(set), &options);
                per_model(set.label(), r, &mut out.rows, &mut out.failures)?;
            }
            self.write_json(ASSOCIATION_JSON, &out)?;
            Ok(out)
        })())
    }

    pub fn load_association(&self) -> Result<AssociationOutput> {
        self.read_json(ASSOCIATION_JSON)
    }

    /// Fits on validation visits and evaluates on test visits.
    pub fn discriminate(&self, dev: &[DeviationRecord], records: &[VisitRecord], manifest: &SplitManifest) -> Result<DiscriminationOutput> {
        staged("discrim", (|| {
            let joined = join(dev, records)?;
            let pick = |s: Split| -> Vec<Joined> {
                joined.iter().filter(|j| manifest.split_of(&j.visit.subject_id, &j.visit.visit_id) == Some(s)).cloned().collect()
            };
            let d = &self.config.discrimination;
            let mut options = DiscriminationOptions::new(d.bootstrap_iterations, d.bootstrap_seed);
            options.fpr_cap = d.fpr_cap;
            options.cluster_by_subject = d.cluster_by_subject;
            options.amyloid_cutoff = self.config.association.amyloid_cutoff;
            let (fit, eval) = (pick(Split::Val), pick(Split::Test));
            let mut out = DiscriminationOutput { reports: Vec::new(), failures: Vec::new() };
            for spec in &d.models {
                let r = discrimination_suite(&fit, &eval, std::slice::from_ref(spec), &options, self.exec);
                per_model(spec.label(), r, &mut out.reports, &mut out.failures)?;
            }
            self.write_json(DISCRIMINATION_JSON, &out)?;
            for r in &out.reports {
                let p = self.path(&format!("roc_{}.csv", slug(&r.model)));
                let mut wr = csv::Writer::from_path(&p)?;
                wr.write_record(["fpr", "tpr", "threshold"])?;
                for pt in &r.roc_points {
                    let t = if pt.threshold.is_infinite() { "inf".to_string() } else { pt.threshold.to_string() };
                    wr.write_record([pt.fpr.to_string(), pt.tpr.to_string(), t])?;
                }
                wr.flush().map_err(|e| Error::io(&p, e))?;
            }
            Ok(out)
        })())
    }

    pub fn load_discrimination(&self) -> Result<DiscriminationOutput> {
        self.read_json(DISCRIMINATION_JSON)
    }

    pub fn report(&self, association: &AssociationOutput, discrimination: &DiscriminationOutput) -> Result<Reports> {
        staged("report", (|| {
            let r = render_reports(
                &association.rows,
                &association.failures,
                &discrimination.reports,
                &discrimination.failures,
                &self.stamp.footer(),
            )?;
            r.write(&self.path(REPORT_DIR))?;
            Ok(r)
        })())
    }

    /// Leakage audit from the written manifest and deviation table only.
    pub fn audit(&self) -> Result<AuditReport> {
        staged("audit", (|| {
            let report = audit(&self.load_manifest()?, &self.load_deviation()?);
            self.write_json(AUDIT_JSON, &report)?;
            Ok(report)
        })())
    }
}

struct Lock(PathBuf);

impl Lock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(LOCK);
        fs::OpenOptions::new().write(true).create_new(true).open(&p).map_err(|e| Error::io(&p, e))?;
        Ok(Lock(p))
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn collect_artifacts(dir: &Path, base: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.collect::<std::io::Result<_>>().map_err(|e| Error::io(dir, e))?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        let name = e.file_name().to_string_lossy().to_string();
        if name == LOCK || name == STALE || name == RUN_JSON {
            continue;
        }
        if p.is_dir() {
            collect_artifacts(&p, base, out)?;
        } else {
            let rel = p.strip_prefix(base).unwrap_or(&p).to_string_lossy().replace('\\', "/");
            out.insert(rel, sha256_file(&p)?);
        }
    }
    Ok(())
}

/// ingest → split → train → score → describe → association → discrimination
/// → report → audit. On failure the output directory keeps a `STALE` marker
/// naming the failed stage.
pub fn run_pipeline(config: RunConfig, exec: Exec) -> Result<RunSummary> {
    let ctx = Context::new(config, exec)?;
    let _lock = Lock::acquire(ctx.out())?;
    let stale = ctx.path(STALE);
    fs::write(&stale, "run in progress\n").map_err(|e| Error::io(&stale, e))?;
    let result = (|| -> Result<RunSummary> {
        let ingested = ctx.ingest()?;
        let records = &ingested.records;
        let manifest = ctx.split(records)?;
        let (model, id) = ctx.train(records, &manifest)?;
        let dev = ctx.score(records, &manifest, &model, &id)?;
        ctx.describe(&dev, records)?;
        let assoc = ctx.associate(&dev, records)?;
        let discrim = ctx.discriminate(&dev, records, &manifest)?;
        ctx.report(&assoc, &discrim)?;
        let audit = ctx.audit()?;
        if !audit.is_clean() {
            return Err(Error::Stage { stage: "audit", source: Box::new(Error::Leakage(format!("{audit:?}"))) });
        }
        let mut artifacts = BTreeMap::new();
        collect_artifacts(ctx.out(), ctx.out(), &mut artifacts)?;
        let summary = RunSummary {
            checkpoint_id: id,
            n_visits: records.len(),
            n_rejected: ingested.rejects.len(),
            n_scored: dev.len(),
            audit,
            artifacts,
        };
        ctx.write_json(RUN_JSON, &summary)?;
        Ok(summary)
    })();
    match &result {
        Ok(_) => fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?,
        Err(e) => {
            let _ = fs::write(&stale, format!("stale: {e}\n"));
        }
    }
    result
}
