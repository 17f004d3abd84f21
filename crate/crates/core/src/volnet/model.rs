use rand::Rng;
use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::net::{Net, ParamBlock};
use super::spec::NetSpec;
use super::tensor::Tensor;
use super::train::TrainConfig;
use crate::augment::AugmentPolicy;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng::{domain, substream};
use crate::volume::Volume;

/// Affine map between raw head output and score units: `score = mean + std * raw`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetNorm {
    pub mean: f64,
    pub std: f64,
}

impl Default for TargetNorm {
    fn default() -> Self {
        TargetNorm { mean: 0.0, std: 1.0 }
    }
}

impl TargetNorm {
    /// Mean and population standard deviation of the targets; a zero spread maps to 1.
    pub fn fit(targets: &[f64]) -> Self {
        let n = targets.len().max(1) as f64;
        let mean = targets.iter().sum::<f64>() / n;
        let var = targets.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        TargetNorm {
            mean,
            std: if std > 1e-12 { std } else { 1.0 },
        }
    }

    pub fn to_raw(&self, score: f64) -> f64 {
        (score - self.mean) / self.std
    }

    pub fn to_score(&self, raw: f64) -> f64 {
        self.mean + self.std * raw
    }
}

/// Where a trained model came from. `training_manifest` lists the
/// `subject_id/visit_id` keys the parameters were fitted on.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub rng_seed: u64,
    pub train_config: Option<TrainConfig>,
    pub augment: Option<AugmentPolicy>,
    pub training_manifest: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ModelState {
    net: Net,
    pub params: Vec<f64>,
    pub adam: AdamState,
    pub best_val_loss: f64,
    pub epoch: usize,
    pub target_norm: TargetNorm,
    pub provenance: Provenance,
}

impl ModelState {
    /// All-zero parameters.
    pub fn zeros(spec: &NetSpec) -> Result<Self> {
        let net = Net::new(spec)?;
        let n = net.n_params();
        Ok(ModelState {
            net,
            params: vec![0.0; n],
            adam: AdamState::new(n),
            best_val_loss: f64::INFINITY,
            epoch: 0,
            target_norm: TargetNorm::default(),
            provenance: Provenance::default(),
        })
    }

    /// Weights uniform in ±sqrt(6 / fan_in), biases zero, one stream per layer.
    pub fn init(spec: &NetSpec, seed: u64) -> Result<Self> {
        let mut state = Self::zeros(spec)?;
        for (li, block) in state.net.layout().iter().enumerate() {
            if block.is_bias {
                continue;
            }
            let bound = (6.0 / block.fan_in as f64).sqrt();
            let mut rng = substream(seed, &[domain::INIT, li as u64]);
            for p in &mut state.params[block.offset..block.offset + block.len] {
                *p = rng.random_range(-bound..bound);
            }
        }
        state.provenance.rng_seed = seed;
        Ok(state)
    }

    pub fn from_parts(
        spec: &NetSpec,
        params: Vec<f64>,
        adam: AdamState,
        best_val_loss: f64,
        epoch: usize,
        target_norm: TargetNorm,
        provenance: Provenance,
    ) -> Result<Self> {
        let net = Net::new(spec)?;
        if params.len() != net.n_params() || adam.first_moment.len() != params.len() || adam.second_moment.len() != params.len() {
            return Err(Error::Shape(format!(
                "state vectors do not match the network's {} parameters",
                net.n_params()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric("non-finite parameter".into()));
        }
        Ok(ModelState { net, params, adam, best_val_loss, epoch, target_norm, provenance })
    }

    pub fn spec(&self) -> &NetSpec {
        self.net.spec()
    }

    pub fn net(&self) -> &Net {
        &self.net
    }

    pub fn layout(&self) -> &[ParamBlock] {
        self.net.layout()
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn check_dims(&self, v: &Volume) -> Result<()> {
        if v.dims() != self.spec().input_dims {
            return Err(Error::Shape(format!(
                "volume dims {:?} do not match network input {:?}",
                v.dims(),
                self.spec().input_dims
            )));
        }
        Ok(())
    }

    /// Predicted scores, one per volume, in input order.
    pub fn predict(&self, batch: &[Volume], exec: Exec) -> Result<Vec<f64>> {
        for v in batch {
            self.check_dims(v)?;
        }
        exec.try_map_range(batch.len(), |i| {
            let y = self.net.forward(&self.params, &Tensor::from_volume(&batch[i]))?;
            Ok(self.target_norm.to_score(y))
        })
    }

    /// MSE loss over the batch (in normalized target units) and its exact gradient.
    pub fn backward(&self, batch: &[Volume], targets: &[f64], exec: Exec) -> Result<(Vec<f64>, f64)> {
        for v in batch {
            self.check_dims(v)?;
        }
        let inputs: Vec<Tensor> = batch.iter().map(Tensor::from_volume).collect();
        self.backward_tensors(&inputs, targets, exec)
    }

    /// Per-sample reverse passes may run concurrently; they are summed in index order.
    pub(crate) fn backward_tensors(&self, inputs: &[Tensor], targets: &[f64], exec: Exec) -> Result<(Vec<f64>, f64)> {
        if inputs.len() != targets.len() {
            return Err(Error::Shape(format!("{} inputs but {} targets", inputs.len(), targets.len())));
        }
        if inputs.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        if targets.iter().any(|t| !t.is_finite()) {
            return Err(Error::Numeric("non-finite target".into()));
        }
        let b = inputs.len() as f64;
        let per_sample = exec.try_map_range(inputs.len(), |i| -> Result<(Vec<f64>, f64)> {
            let (y, cache) = self.net.forward_cached(&self.params, &inputs[i])?;
            let r = y - self.target_norm.to_raw(targets[i]);
            let mut g = vec![0.0; self.params.len()];
            self.net.backward(&self.params, &cache, 2.0 * r / b, &mut g);
            Ok((g, r * r))
        })?;
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        for (g, sq) in per_sample {
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            loss += sq;
        }
        Ok((grad, loss / b))
    }
}

/// Mean squared error. Non-negative, zero iff every prediction equals its target.
pub fn mse(predictions: &[f64], targets: &[f64]) -> f64 {
    assert_eq!(predictions.len(), targets.len());
    if predictions.is_empty() {
        return 0.0;
    }
    predictions.iter().zip(targets).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / predictions.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volnet::spec::StemSpec;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn rand_volume(dims: [usize; 3], seed: u64) -> Volume {
        let mut rng = substream(seed, &[]);
        Volume::from_fn(dims, |_, _, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn zero_network_predicts_zero() {
        let m = ModelState::zeros(&NetSpec::tiny([8, 8, 8])).unwrap();
        let batch = vec![rand_volume([8, 8, 8], 1), rand_volume([8, 8, 8], 2)];
        assert_eq!(m.predict(&batch, Exec::Sequential).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn duplicated_input_gives_identical_predictions() {
        let m = ModelState::init(&NetSpec::tiny([8, 8, 8]), 5).unwrap();
        let v = rand_volume([8, 8, 8], 3);
        let w = rand_volume([8, 8, 8], 4);
        let p = m.predict(&[v.clone(), w.clone(), v.clone()], Exec::Parallel).unwrap();
        assert_eq!(p[0].to_bits(), p[2].to_bits());
        let alone = m.predict(&[v], Exec::Sequential).unwrap();
        assert_eq!(alone[0].to_bits(), p[0].to_bits());
    }

    #[test]
    fn wrong_dims_is_shape_error() {
        let m = ModelState::init(&NetSpec::tiny([8, 8, 8]), 5).unwrap();
        let r = m.predict(&[Volume::zeros([8, 8, 7])], Exec::Sequential);
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn overflow_names_the_layer() {
        let mut m = ModelState::init(&NetSpec::tiny([8, 8, 8]), 5).unwrap();
        let stem = m.layout().iter().find(|b| b.name == "stem.bias").unwrap().clone();
        m.params[stem.offset] = f64::MAX;
        m.params[stem.offset + 1] = f64::MAX;
        let v = Volume::from_fn([8, 8, 8], |_, _, _| 1.0);
        match m.predict(&[v], Exec::Sequential) {
            Err(Error::NumericOverflow { layer }) => assert!(layer.starts_with("stage1"), "{layer}"),
            other => panic!("expected overflow, got {other:?}"),
        }
    }

    /// conv → relu → global average pool → affine, written out by hand.
    #[test]
    fn two_layer_net_matches_direct_computation() {
        let spec = NetSpec {
            input_dims: [4, 4, 4],
            in_channels: 1,
            stem: StemSpec { out_channels: 2, kernel: 3, stride: 1 },
            stages: vec![],
            block_kernel: 3,
        };
        let m = ModelState::init(&spec, 11).unwrap();
        let mut m = m;
        // give the biases and the head bias non-zero values
        m.params[54] = 0.1;
        m.params[55] = -0.05;
        m.params[58] = 0.3;
        let v = rand_volume([4, 4, 4], 9);
        let w = &m.params[..54];
        let b = &m.params[54..56];
        let hw = &m.params[56..58];
        let mut pooled = [0.0f64; 2];
        for oc in 0..2 {
            for z in 0..4i32 {
                for y in 0..4i32 {
                    for x in 0..4i32 {
                        let mut acc = b[oc];
                        for kz in 0..3i32 {
                            for ky in 0..3i32 {
                                for kx in 0..3i32 {
                                    let (ix, iy, iz) = (x + kx - 1, y + ky - 1, z + kz - 1);
                                    if (0..4).contains(&ix) && (0..4).contains(&iy) && (0..4).contains(&iz) {
                                        let wi = oc * 27 + (kz * 9 + ky * 3 + kx) as usize;
                                        acc += w[wi] * v.get(ix as usize, iy as usize, iz as usize) as f64;
                                    }
                                }
                            }
                        }
                        pooled[oc] += acc.max(0.0) / 64.0;
                    }
                }
            }
        }
        let expected = hw[0] * pooled[0] + hw[1] * pooled[1] + m.params[58];
        let got = m.predict(&[v], Exec::Sequential).unwrap()[0];
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn perfect_predictions_give_zero_loss_and_gradient() {
        let m = ModelState::init(&NetSpec::tiny([8, 8, 8]), 2).unwrap();
        let batch = vec![rand_volume([8, 8, 8], 1), rand_volume([8, 8, 8], 2)];
        let preds = m.predict(&batch, Exec::Sequential).unwrap();
        let (g, loss) = m.backward(&batch, &preds, Exec::Sequential).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_affine_layer_gradient() {
        // With a 1-channel 1³ stem and no stages the net is y = w_h·relu(w_s·x + b_s) + b_h.
        // Fix the stem to identity so y = w·mean(x) + b on non-negative input.
        let spec = NetSpec {
            input_dims: [1, 1, 1],
            in_channels: 1,
            stem: StemSpec { out_channels: 1, kernel: 1, stride: 1 },
            stages: vec![],
            block_kernel: 3,
        };
        let mut m = ModelState::zeros(&spec).unwrap();
        m.params = vec![1.0, 0.0, 0.7, -0.2];
        let x = 1.5f64;
        let t = 0.4;
        let y = 0.7 * x - 0.2;
        let v = Volume::from_data([1, 1, 1], vec![x as f32]).unwrap();
        let (g, loss) = m.backward(&[v], &[t], Exec::Sequential).unwrap();
        assert!((loss - (y - t).powi(2)).abs() < 1e-15);
        assert!((g[2] - 2.0 * (y - t) * x).abs() < 1e-12);
        assert!((g[3] - 2.0 * (y - t)).abs() < 1e-12);
    }

    #[test]
    fn batch_composition_does_not_change_gradient_sum() {
        let m = ModelState::init(&NetSpec::tiny([8, 8, 8]), 3).unwrap();
        let batch: Vec<Volume> = (0..4).map(|i| rand_volume([8, 8, 8], 20 + i)).collect();
        let t = [0.1, 0.5, -0.3, 1.0];
        let (g_seq, l_seq) = m.backward(&batch, &t, Exec::Sequential).unwrap();
        let (g_par, l_par) = m.backward(&batch, &t, Exec::Parallel).unwrap();
        assert_eq!(g_seq, g_par);
        assert_eq!(l_seq, l_par);
    }

    proptest! {
        #[test]
        fn mse_nonnegative_and_zero_iff_equal(
            p in proptest::collection::vec(-1e3f64..1e3, 1..20),
            d in proptest::collection::vec(-1.0f64..1.0, 1..20),
        ) {
            let n = p.len().min(d.len());
            let p = &p[..n];
            let t: Vec<f64> = p.iter().zip(&d[..n]).map(|(a, b)| a + b).collect();
            let l = mse(p, &t);
            prop_assert!(l >= 0.0);
            prop_assert_eq!(l == 0.0, d[..n].iter().all(|&x| x == 0.0));
            prop_assert_eq!(mse(p, p), 0.0);
        }
    }
}
