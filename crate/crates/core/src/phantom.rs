//! Synthetic cohorts with a known ground-truth deviation effect.
//!
//! Each subject has a latent severity `a ~ U[0, 1]`. Its volume holds a soft
//! ellipsoidal "brain" with a central cavity whose radius grows linearly with
//! `a`, so the image determines `a` exactly. The normative score is
//! `f(a) = s_max · a`; the observed NPIQ is `f(a)` plus Gaussian noise plus
//! the injected deviation for converters, clipped to `[0, s_max]`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cohort::{write_csv, Gender, Label, VisitRecord};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng::{domain, substream};
use crate::volume::Volume;

/// How conversion labels are assigned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelModel {
    /// Exactly `round(converter_fraction · n)` subjects are converters and
    /// receive the injected deviation.
    Injected,
    /// `P(converter) = sigmoid(intercept + beta · d)` where `d` is the subject's
    /// mean true deviation; no deviation is injected.
    Logistic { intercept: f64, beta: f64 },
}

/// Group-wise covariate distributions. `*_converter` fields are the converter
/// group's values; offsets are added for converters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CovariateModel {
    pub age_mean: f64,
    pub age_sd: f64,
    pub age_converter_offset: f64,
    pub p_male: f64,
    pub p_male_converter: f64,
    pub p_apoe4: f64,
    pub p_apoe4_converter: f64,
    pub p_cdr_half: f64,
    pub p_cdr_half_converter: f64,
    pub mmse_mean: f64,
    pub mmse_sd: f64,
    pub mmse_converter_offset: f64,
    pub abeta42_mean: f64,
    pub abeta42_sd: f64,
    pub abeta42_converter_offset: f64,
    /// Amyloid positive when abeta42 is below this value.
    pub amyloid_cutoff: f64,
}

impl Default for CovariateModel {
    fn default() -> Self {
        CovariateModel {
            age_mean: 72.5,
            age_sd: 7.0,
            age_converter_offset: 3.0,
            p_male: 0.53,
            p_male_converter: 0.64,
            p_apoe4: 0.3,
            p_apoe4_converter: 0.5,
            p_cdr_half: 0.5,
            p_cdr_half_converter: 0.85,
            mmse_mean: 28.4,
            mmse_sd: 1.3,
            mmse_converter_offset: -2.9,
            abeta42_mean: 1000.0,
            abeta42_sd: 300.0,
            abeta42_converter_offset: -150.0,
            amyloid_cutoff: 880.0,
        }
    }
}

impl CovariateModel {
    /// Identical distributions in both groups.
    pub fn uninformative() -> Self {
        let d = Self::default();
        CovariateModel {
            age_converter_offset: 0.0,
            p_male_converter: d.p_male,
            p_apoe4_converter: d.p_apoe4,
            p_cdr_half_converter: d.p_cdr_half,
            mmse_converter_offset: 0.0,
            abeta42_converter_offset: 0.0,
            ..d
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub n_subjects: usize,
    #[serde(default = "defaults::visits")]
    pub visits_per_subject: usize,
    #[serde(default = "defaults::dims")]
    pub dims: [usize; 3],
    #[serde(default = "defaults::s_max")]
    pub s_max: f64,
    #[serde(default = "defaults::noise")]
    pub observation_noise_sigma: f64,
    #[serde(default = "defaults::converter_fraction")]
    pub converter_fraction: f64,
    #[serde(default = "defaults::delta")]
    pub injected_deviation: f64,
    #[serde(default = "defaults::label_model")]
    pub label_model: LabelModel,
    /// Per-visit Gaussian voxel noise (0 keeps the image an exact function of `a`).
    #[serde(default)]
    pub image_noise_sigma: f64,
    #[serde(default)]
    pub covariates: CovariateModel,
    pub rng_seed: u64,
}

mod defaults {
    use super::LabelModel;
    pub fn visits() -> usize {
        1
    }
    pub fn dims() -> [usize; 3] {
        [16, 16, 16]
    }
    pub fn s_max() -> f64 {
        36.0
    }
    pub fn noise() -> f64 {
        0.5
    }
    pub fn converter_fraction() -> f64 {
        0.2
    }
    pub fn delta() -> f64 {
        2.0
    }
    pub fn label_model() -> LabelModel {
        LabelModel::Injected
    }
}

impl PhantomConfig {
    pub fn new(n_subjects: usize, rng_seed: u64) -> Self {
        PhantomConfig {
            n_subjects,
            visits_per_subject: defaults::visits(),
            dims: defaults::dims(),
            s_max: defaults::s_max(),
            observation_noise_sigma: defaults::noise(),
            converter_fraction: defaults::converter_fraction(),
            injected_deviation: defaults::delta(),
            label_model: LabelModel::Injected,
            image_noise_sigma: 0.0,
            covariates: CovariateModel::default(),
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || self.visits_per_subject == 0 {
            return Err(Error::Config("n_subjects and visits_per_subject must be positive".into()));
        }
        if self.dims.contains(&0) {
            return Err(Error::Config("phantom dims must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.converter_fraction) {
            return Err(Error::Config("converter_fraction must be in [0, 1]".into()));
        }
        if !(self.s_max > 0.0) {
            return Err(Error::Config("s_max must be > 0".into()));
        }
        if !(self.observation_noise_sigma >= 0.0) || !(self.image_noise_sigma >= 0.0) {
            return Err(Error::Config("noise sigmas must be >= 0".into()));
        }
        let c = &self.covariates;
        if !(c.age_sd >= 0.0 && c.mmse_sd >= 0.0 && c.abeta42_sd >= 0.0) {
            return Err(Error::Config("covariate standard deviations must be >= 0".into()));
        }
        Ok(())
    }

    /// Normative score `f(a) = s_max · a`, clipped to `[0, s_max]`.
    pub fn score_map(&self, a: f64) -> f64 {
        (self.s_max * a).clamp(0.0, self.s_max)
    }
}

/// Cavity radius in normalized coordinates (half-extent = 1).
const CAVITY_MIN: f64 = 0.15;
const CAVITY_MAX: f64 = 0.5;
const EDGE_WIDTH: f64 = 0.05;

pub fn cavity_radius(a: f64) -> f64 {
    CAVITY_MIN + (CAVITY_MAX - CAVITY_MIN) * a.clamp(0.0, 1.0)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn normalized(i: usize, n: usize) -> f64 {
    let c = (n as f64 - 1.0) / 2.0;
    (i as f64 - c) / (n as f64 / 2.0)
}

/// Noise-free phantom image for latent severity `a`.
pub fn phantom_volume(a: f64, dims: [usize; 3]) -> Volume {
    let r = cavity_radius(a);
    Volume::from_fn(dims, |x, y, z| {
        let (u, v, w) = (normalized(x, dims[0]), normalized(y, dims[1]), normalized(z, dims[2]));
        let rho_brain = ((u / 0.9).powi(2) + (v / 0.8).powi(2) + (w / 0.85).powi(2)).sqrt();
        let tissue = sigmoid((1.0 - rho_brain) / EDGE_WIDTH);
        let rho = (u * u + v * v + w * w).sqrt();
        let cavity = sigmoid((r - rho) / EDGE_WIDTH);
        (0.9 * tissue * (1.0 - cavity)) as f32
    })
}

/// Fixed mask of voxels within the largest cavity radius.
pub fn cavity_mask(dims: [usize; 3]) -> Vec<bool> {
    let mut mask = Vec::with_capacity(dims.iter().product());
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let (u, v, w) = (normalized(x, dims[0]), normalized(y, dims[1]), normalized(z, dims[2]));
                mask.push((u * u + v * v + w * w).sqrt() <= CAVITY_MAX);
            }
        }
    }
    mask
}

#[derive(Debug, Clone)]
pub struct PhantomCohort {
    pub config: PhantomConfig,
    pub records: Vec<VisitRecord>,
    /// Latent severity per subject id.
    pub latents: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TruthRow {
    subject_id: String,
    latent: f64,
    normative_score: f64,
}

pub fn subject_id(i: usize) -> String {
    format!("S{:04}", i + 1)
}

/// Generate the cohort table. Each subject draws from its own stream, so the
/// result is independent of evaluation order.
pub fn generate_records(config: &PhantomConfig) -> Result<PhantomCohort> {
    config.validate()?;
    let n = config.n_subjects;
    let injected: Vec<bool> = match config.label_model {
        LabelModel::Injected => {
            let k = (config.converter_fraction * n as f64).round() as usize;
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut substream(config.rng_seed, &[domain::PHANTOM_LABELS]));
            let mut flags = vec![false; n];
            for &i in &order[..k] {
                flags[i] = true;
            }
            flags
        }
        LabelModel::Logistic { .. } => vec![false; n],
    };

    let subjects = Exec::default().try_map_range(n, |i| generate_subject(config, i, injected[i]))?;
    let mut records = Vec::with_capacity(n * config.visits_per_subject);
    let mut latents = BTreeMap::new();
    for (a, recs) in subjects {
        latents.insert(recs[0].subject_id.clone(), a);
        records.extend(recs);
    }
    Ok(PhantomCohort { config: config.clone(), records, latents })
}

fn generate_subject(config: &PhantomConfig, i: usize, injected: bool) -> Result<(f64, Vec<VisitRecord>)> {
    let mut rng = substream(config.rng_seed, &[domain::PHANTOM_SUBJECT, i as u64]);
    let sid = subject_id(i);
    let a: f64 = rng.random_range(0.0..1.0);
    let fa = config.score_map(a);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let delta = if injected { config.injected_deviation } else { 0.0 };
    let npiq: Vec<f64> = (0..config.visits_per_subject)
        .map(|_| {
            let e = config.observation_noise_sigma * std_normal.sample(&mut rng);
            (fa + e + delta).clamp(0.0, config.s_max)
        })
        .collect();
    let label = match config.label_model {
        LabelModel::Injected => {
            if injected {
                Label::Converter
            } else {
                Label::NonConverter
            }
        }
        LabelModel::Logistic { intercept, beta } => {
            let d = npiq.iter().map(|s| s - fa).sum::<f64>() / npiq.len() as f64;
            if rng.random_bool(sigmoid(intercept + beta * d)) {
                Label::Converter
            } else {
                Label::NonConverter
            }
        }
    };
    let conv = label.is_converter();
    let c = &config.covariates;
    let pick = |base: f64, conv_v: f64| if conv { conv_v } else { base };
    let gender = if rng.random_bool(pick(c.p_male, c.p_male_converter)) { Gender::M } else { Gender::F };
    let apoe4 = u8::from(rng.random_bool(pick(c.p_apoe4, c.p_apoe4_converter)));
    let cdr = if rng.random_bool(pick(c.p_cdr_half, c.p_cdr_half_converter)) { 0.5 } else { 0.0 };
    let base_age = c.age_mean + pick(0.0, c.age_converter_offset) + c.age_sd * std_normal.sample(&mut rng);
    let abeta42 = (c.abeta42_mean + pick(0.0, c.abeta42_converter_offset) + c.abeta42_sd * std_normal.sample(&mut rng)).max(50.0);
    let amyloid = u8::from(abeta42 < c.amyloid_cutoff);

    let records = npiq
        .into_iter()
        .enumerate()
        .map(|(v, npiq)| {
            let mmse = (c.mmse_mean + pick(0.0, c.mmse_converter_offset) + c.mmse_sd * std_normal.sample(&mut rng))
                .round()
                .clamp(0.0, 30.0) as u8;
            let vid = format!("V{}", v + 1);
            VisitRecord {
                volume_ref: format!("{sid}_{vid}.f32"),
                subject_id: sid.clone(),
                visit_id: vid,
                age: round_to(base_age + v as f64, 2),
                gender,
                apoe4: Some(apoe4),
                cdr,
                mmse,
                npiq,
                abeta42: Some(round_to(abeta42, 1)),
                amyloid_status: Some(amyloid),
                label,
            }
        })
        .collect();
    Ok((a, records))
}

fn round_to(x: f64, decimals: i32) -> f64 {
    let f = 10f64.powi(decimals);
    (x * f).round() / f
}

impl PhantomCohort {
    pub fn latent(&self, subject_id: &str) -> Option<f64> {
        self.latents.get(subject_id).copied()
    }

    /// The visit's image: the noise-free phantom plus optional per-visit voxel noise.
    pub fn volume(&self, record: &VisitRecord) -> Result<Volume> {
        let a = self
            .latent(&record.subject_id)
            .ok_or_else(|| Error::Argument(format!("unknown phantom subject {}", record.subject_id)))?;
        let clean = phantom_volume(a, self.config.dims);
        if self.config.image_noise_sigma == 0.0 {
            return Ok(clean);
        }
        let subject_index = record.subject_id[1..].parse::<u64>().unwrap_or(0);
        let visit_index = record.visit_id[1..].parse::<u64>().unwrap_or(0);
        let mut rng = substream(self.config.rng_seed, &[domain::PHANTOM_SUBJECT, subject_index, visit_index]);
        let normal = Normal::new(0.0, self.config.image_noise_sigma).expect("validated sigma");
        let data = clean.data().iter().map(|&v| (v as f64 + normal.sample(&mut rng)) as f32).collect();
        Volume::new(self.config.dims, [1.0; 3], data)
    }

    /// Ground-truth deviation of a visit: `npiq − f(a)`.
    pub fn true_dnpi(&self, record: &VisitRecord) -> Result<f64> {
        true_dnpi(record, self)
    }

    /// Write `cohort.csv`, `truth.csv` and `volumes/` (raw + sidecar per visit).
    pub fn write(&self, out_dir: &Path, exec: Exec) -> Result<()> {
        let vol_dir = out_dir.join("volumes");
        fs::create_dir_all(&vol_dir).map_err(|e| Error::io(&vol_dir, e))?;
        let cohort_path = out_dir.join("cohort.csv");
        let f = fs::File::create(&cohort_path).map_err(|e| Error::io(&cohort_path, e))?;
        write_csv(&self.records, std::io::BufWriter::new(f))?;

        let truth_path = out_dir.join("truth.csv");
        let mut wr = csv::Writer::from_path(&truth_path)?;
        for (sid, &a) in &self.latents {
            wr.serialize(TruthRow { subject_id: sid.clone(), latent: a, normative_score: self.config.score_map(a) })?;
        }
        wr.flush().map_err(|e| Error::io(&truth_path, e))?;

        exec.try_map_range(self.records.len(), |i| {
            let rec = &self.records[i];
            self.volume(rec)?.write(&vol_dir.join(&rec.volume_ref))
        })?;
        Ok(())
    }
}

/// `npiq − f(a)` for a phantom visit. Test oracle only.
pub fn true_dnpi(record: &VisitRecord, cohort: &PhantomCohort) -> Result<f64> {
    let a = cohort
        .latent(&record.subject_id)
        .ok_or_else(|| Error::Argument(format!("unknown phantom subject {}", record.subject_id)))?;
    Ok(record.npiq - cohort.config.score_map(a))
}

/// Read `truth.csv` back into a latent map.
pub fn read_truth(path: &Path) -> Result<BTreeMap<String, f64>> {
    let mut rd = csv::Reader::from_path(path)?;
    let mut out = BTreeMap::new();
    for row in rd.deserialize() {
        let row: TruthRow = row?;
        out.insert(row.subject_id, row.latent);
    }
    Ok(out)
}
