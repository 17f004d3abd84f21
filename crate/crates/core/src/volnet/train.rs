//! Checkpointing training loop.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::adam::adam_step;
use super::model::{mse, ModelState, TargetNorm};
use super::spec::NetSpec;
use super::tensor::Tensor;
use crate::augment::{apply_policy, AugmentPolicy};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng::{domain, substream};
use crate::volume::Volume;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::epsilon")]
    pub epsilon: f64,
    /// No default: every run names its seed.
    pub rng_seed: u64,
    /// Fit the head in z-scored target units (mean/std of the training targets).
    #[serde(default = "defaults::standardize")]
    pub standardize_targets: bool,
}

mod defaults {
    pub fn learning_rate() -> f64 {
        0.001
    }
    pub fn epochs() -> usize {
        300
    }
    pub fn batch_size() -> usize {
        8
    }
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.999
    }
    pub fn epsilon() -> f64 {
        1e-8
    }
    pub fn standardize() -> bool {
        true
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: defaults::learning_rate(),
            epochs: defaults::epochs(),
            batch_size: defaults::batch_size(),
            beta1: defaults::beta1(),
            beta2: defaults::beta2(),
            epsilon: defaults::epsilon(),
            rng_seed: 0,
            standardize_targets: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0 < self.beta1 && self.beta1 < self.beta2 && self.beta2 < 1.0) {
            return Err(Error::Config("Adam constants must satisfy 0 < beta1 < beta2 < 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub volume: &'a Volume,
    pub target: f64,
}

/// Losses in score units (squared), one entry per epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation MSE (earliest on ties).
    pub state: ModelState,
    pub history: Vec<EpochLoss>,
}

/// Train from a seeded initialization. Augmentation, when given, is applied
/// to training samples only; each sample draws from its own
/// `(augment seed, epoch, sample index)` stream.
pub fn train(
    train_set: &[Sample<'_>],
    val_set: &[Sample<'_>],
    spec: &NetSpec,
    config: &TrainConfig,
    augment: Option<&AugmentPolicy>,
    exec: Exec,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    if let Some(p) = augment {
        p.validate()?;
    }
    let mut state = ModelState::init(spec, config.rng_seed)?;
    let train_targets: Vec<f64> = train_set.iter().map(|s| s.target).collect();
    if train_targets.iter().chain(val_set.iter().map(|s| &s.target)).any(|t| !t.is_finite()) {
        return Err(Error::Numeric("non-finite target".into()));
    }
    state.target_norm = if config.standardize_targets {
        TargetNorm::fit(&train_targets)
    } else {
        TargetNorm::default()
    };
    state.provenance.train_config = Some(config.clone());
    state.provenance.augment = augment.cloned();

    let val_volumes: Vec<Volume> = val_set.iter().map(|s| s.volume.clone()).collect();
    let val_targets: Vec<f64> = val_set.iter().map(|s| s.target).collect();
    let scale2 = state.target_norm.std.powi(2);

    let mut best: Option<ModelState> = None;
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=config.epochs {
        order.sort_unstable();
        order.shuffle(&mut substream(config.rng_seed, &[domain::SHUFFLE, epoch as u64]));
        let mut sum_sq = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let inputs: Vec<Tensor> = exec.try_map_range(chunk.len(), |j| -> Result<Tensor> {
                let i = chunk[j];
                let vol = train_set[i].volume;
                match augment {
                    Some(p) => {
                        let mut rng = substream(p.rng_seed, &[domain::AUGMENT, epoch as u64, i as u64]);
                        Ok(Tensor::from_volume(&apply_policy(vol, p, &mut rng)?))
                    }
                    None => Ok(Tensor::from_volume(vol)),
                }
            })?;
            let targets: Vec<f64> = chunk.iter().map(|&i| train_set[i].target).collect();
            let (grad, loss) = match state.backward_tensors(&inputs, &targets, exec) {
                Err(Error::NumericOverflow { .. }) => return Err(Error::TrainingDiverged { epoch }),
                other => other?,
            };
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingDiverged { epoch });
            }
            adam_step(&mut state, &grad, config)?;
            if state.params.iter().any(|p| !p.is_finite()) {
                return Err(Error::TrainingDiverged { epoch });
            }
            sum_sq += loss * chunk.len() as f64;
        }
        let train_loss = sum_sq / train_set.len() as f64 * scale2;
        let preds = match state.predict(&val_volumes, exec) {
            Err(Error::NumericOverflow { .. }) => return Err(Error::TrainingDiverged { epoch }),
            other => other?,
        };
        let val_loss = mse(&preds, &val_targets);
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        state.epoch = epoch;
        history.push(EpochLoss { epoch, train_loss, val_loss });
        log::debug!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        if best.as_ref().is_none_or(|b| val_loss < b.best_val_loss) {
            let mut snap = state.clone();
            snap.best_val_loss = val_loss;
            best = Some(snap);
        }
    }
    let best_val = best.as_ref().map(|b| b.best_val_loss).unwrap_or(f64::INFINITY);
    let mut state_out = best.expect("at least one epoch ran");
    state_out.best_val_loss = best_val;
    Ok(TrainOutcome { state: state_out, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn volumes(n: usize, seed: u64) -> Vec<Volume> {
        (0..n)
            .map(|i| {
                let mut rng = substream(seed, &[i as u64]);
                Volume::from_fn([8, 8, 8], |_, _, _| rng.random_range(0.0..1.0))
            })
            .collect()
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig { epochs, batch_size: 4, rng_seed: 3, ..TrainConfig::default() }
    }

    #[test]
    fn rejects_empty_split_and_bad_config() {
        let v = volumes(2, 1);
        let s: Vec<Sample> = v.iter().map(|v| Sample { volume: v, target: 1.0 }).collect();
        let spec = NetSpec::tiny([8, 8, 8]);
        assert!(matches!(train(&[], &s, &spec, &cfg(1), None, Exec::Sequential), Err(Error::Config(_))));
        assert!(matches!(train(&s, &[], &spec, &cfg(1), None, Exec::Sequential), Err(Error::Config(_))));
        assert!(matches!(train(&s, &s, &spec, &cfg(0), None, Exec::Sequential), Err(Error::Config(_))));
        let bad = TrainConfig { beta1: 0.999, beta2: 0.9, ..cfg(1) };
        assert!(matches!(train(&s, &s, &spec, &bad, None, Exec::Sequential), Err(Error::Config(_))));
    }

    #[test]
    fn single_epoch_returns_post_epoch_state() {
        let v = volumes(6, 2);
        let s: Vec<Sample> = v.iter().enumerate().map(|(i, v)| Sample { volume: v, target: i as f64 }).collect();
        let out = train(&s[..4], &s[4..], &NetSpec::tiny([8, 8, 8]), &cfg(1), None, Exec::Sequential).unwrap();
        assert_eq!(out.history.len(), 1);
        assert_eq!(out.state.epoch, 1);
        assert_eq!(out.state.adam.step_count, 1);
        assert_eq!(out.state.best_val_loss, out.history[0].val_loss);
    }

    #[test]
    fn learns_a_constant_through_the_head_bias() {
        let v = volumes(12, 3);
        let c = 1.5;
        let s: Vec<Sample> = v.iter().map(|v| Sample { volume: v, target: c }).collect();
        let config = TrainConfig {
            epochs: 50,
            learning_rate: 0.01,
            standardize_targets: false,
            ..cfg(50)
        };
        let out = train(&s[..8], &s[8..], &NetSpec::tiny([8, 8, 8]), &config, None, Exec::Parallel).unwrap();
        let best = out.history.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(best, out.state.best_val_loss);
        assert!(best < 1e-2 * (1.0 + c * c), "best val MSE {best}");
    }

    #[test]
    fn identical_seeds_give_identical_histories() {
        let v = volumes(10, 4);
        let s: Vec<Sample> = v.iter().enumerate().map(|(i, v)| Sample { volume: v, target: (i % 3) as f64 }).collect();
        let policy = AugmentPolicy::default_with_seed(9);
        let run = |exec| train(&s[..7], &s[7..], &NetSpec::tiny([8, 8, 8]), &cfg(3), Some(&policy), exec).unwrap();
        let a = run(Exec::Sequential);
        let b = run(Exec::Parallel);
        assert_eq!(a.history.len(), 3);
        for (x, y) in a.history.iter().zip(&b.history) {
            assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
            assert_eq!(x.val_loss.to_bits(), y.val_loss.to_bits());
        }
        assert_eq!(a.state.params, b.state.params);
    }

    #[test]
    fn best_checkpoint_is_minimum_and_earliest() {
        let v = volumes(10, 5);
        let s: Vec<Sample> = v.iter().enumerate().map(|(i, v)| Sample { volume: v, target: i as f64 * 0.3 }).collect();
        let out = train(&s[..7], &s[7..], &NetSpec::tiny([8, 8, 8]), &cfg(6), None, Exec::Sequential).unwrap();
        let min = out.history.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        let first = out.history.iter().find(|e| e.val_loss == min).unwrap().epoch;
        assert_eq!(out.state.epoch, first);
        assert_eq!(out.state.best_val_loss, min);
    }

    #[test]
    fn divergence_reports_epoch() {
        let v = volumes(4, 6);
        let s: Vec<Sample> = v.iter().map(|v| Sample { volume: v, target: 1e300 }).collect();
        let config = TrainConfig { standardize_targets: false, ..cfg(2) };
        match train(&s[..2], &s[2..], &NetSpec::tiny([8, 8, 8]), &config, None, Exec::Sequential) {
            Err(Error::TrainingDiverged { epoch }) => assert_eq!(epoch, 1),
            other => panic!("expected divergence, got {:?}", other.map(|o| o.history)),
        }
    }
}
