//! Run configuration (TOML). Relative paths resolve against the config
//! file's directory; every seed is mandatory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::splits::Fractions;
use crate::augment::AugmentPolicy;
use crate::deviation::SignConvention;
use crate::error::{Error, Result};
use crate::stats::{AdjustmentSet, ModelSpec};
use crate::volnet::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub cohort_csv: PathBuf,
    pub volume_dir: PathBuf,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// `tiny` or `resnet34-3d`; input dims come from the volumes.
    pub preset: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub seed: u64,
    #[serde(default)]
    pub fractions: Fractions,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoringSection {
    #[serde(default)]
    pub sign_convention: SignConvention,
    #[serde(default)]
    pub allow_training_visits: bool,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssociationSection {
    #[serde(default = "AdjustmentSet::table_one")]
    pub adjustment_sets: Vec<AdjustmentSet>,
    #[serde(default)]
    pub standardize_dnpi: bool,
    /// Amyloid positive when abeta42 is below this; only used for visits
    /// without a recorded amyloid_status.
    #[serde(default)]
    pub amyloid_cutoff: Option<f64>,
}

impl Default for AssociationSection {
    fn default() -> Self {
        AssociationSection { adjustment_sets: AdjustmentSet::table_one(), standardize_dnpi: false, amyloid_cutoff: None }
    }
}

fn default_fpr_cap() -> f64 {
    0.2
}

fn default_iterations() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminationSection {
    #[serde(default = "ModelSpec::table_two")]
    pub models: Vec<ModelSpec>,
    #[serde(default = "default_fpr_cap")]
    pub fpr_cap: f64,
    #[serde(default = "default_iterations")]
    pub bootstrap_iterations: usize,
    pub bootstrap_seed: u64,
    #[serde(default)]
    pub cluster_by_subject: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub model: ModelSection,
    pub train: TrainConfig,
    /// Training-time augmentation; omitted means none.
    #[serde(default)]
    pub augment: Option<AugmentPolicy>,
    pub splits: SplitSection,
    #[serde(default)]
    pub scoring: ScoringSection,
    #[serde(default)]
    pub association: AssociationSection,
    pub discrimination: DiscriminationSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub train: u64,
    pub split: u64,
    pub bootstrap: u64,
    pub augment: Option<u64>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parse a config file and resolve its relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.paths.cohort_csv, &mut self.paths.volume_dir, &mut self.paths.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Replace every seed with `seed`.
    pub fn override_seeds(&mut self, seed: u64) {
        self.train.rng_seed = seed;
        self.splits.seed = seed;
        self.discrimination.bootstrap_seed = seed;
        if let Some(a) = self.augment.as_mut() {
            a.rng_seed = seed;
        }
    }

    pub fn seeds(&self) -> Seeds {
        Seeds {
            train: self.train.rng_seed,
            split: self.splits.seed,
            bootstrap: self.discrimination.bootstrap_seed,
            augment: self.augment.as_ref().map(|a| a.rng_seed),
        }
    }

    /// SHA-256 of the canonical TOML rendering of the configuration.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    /// Checks everything that can be checked before any compute.
    pub fn validate(&self) -> Result<()> {
        if !self.paths.cohort_csv.is_file() {
            return Err(Error::Config(format!("cohort CSV {} does not exist", self.paths.cohort_csv.display())));
        }
        if !self.paths.volume_dir.is_dir() {
            return Err(Error::Config(format!("volume directory {} does not exist", self.paths.volume_dir.display())));
        }
        crate::volnet::NetSpec::preset(&self.model.preset, [8, 8, 8])?;
        self.train.validate()?;
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        self.splits.fractions.validate()?;
        let d = &self.discrimination;
        if !(0.0..1.0).contains(&d.fpr_cap) {
            return Err(Error::Config(format!("fpr_cap must be in [0, 1), got {}", d.fpr_cap)));
        }
        if d.bootstrap_iterations == 0 {
            return Err(Error::Config("bootstrap_iterations must be ≥ 1".into()));
        }
        if d.models.is_empty() || self.association.adjustment_sets.is_empty() {
            return Err(Error::Config("need at least one discrimination model and one adjustment set".into()));
        }
        Ok(())
    }

    /// A small, fast configuration for the given data layout.
    pub fn example(cohort_csv: &Path, volume_dir: &Path, output_dir: &Path, seed: u64) -> Self {
        RunConfig {
            paths: Paths {
                cohort_csv: cohort_csv.to_path_buf(),
                volume_dir: volume_dir.to_path_buf(),
                output_dir: output_dir.to_path_buf(),
            },
            model: ModelSection { preset: "tiny".into() },
            train: TrainConfig { epochs: 50, rng_seed: seed, ..TrainConfig::default() },
            augment: None,
            splits: SplitSection { seed, fractions: Fractions::default() },
            scoring: ScoringSection::default(),
            association: AssociationSection::default(),
            discrimination: DiscriminationSection {
                models: ModelSpec::table_two(),
                fpr_cap: 0.2,
                bootstrap_iterations: 1000,
                bootstrap_seed: seed,
                cluster_by_subject: false,
            },
        }
    }
}
