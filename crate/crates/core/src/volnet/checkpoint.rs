//! Binary checkpoint format.
//!
//! ```text
//! b"NPICKPT1" | u64 LE header length | JSON header | params | first moment | second moment
//! ```
//! Each vector is `n_params` little-endian f64 values in layout order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::adam::AdamState;
use super::model::{ModelState, Provenance, TargetNorm};
use super::net::ParamBlock;
use super::spec::NetSpec;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"NPICKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub spec: NetSpec,
    pub epoch: usize,
    /// `None` when no validation loss has been recorded.
    pub best_val_loss: Option<f64>,
    pub rng_seed: u64,
    pub step_count: u64,
    pub n_params: usize,
    pub layout: Vec<ParamBlock>,
    pub target_norm: TargetNorm,
    pub provenance: Provenance,
}

pub fn to_bytes(model: &ModelState) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        spec: model.spec().clone(),
        epoch: model.epoch,
        best_val_loss: model.best_val_loss.is_finite().then_some(model.best_val_loss),
        rng_seed: model.provenance.rng_seed,
        step_count: model.adam.step_count,
        n_params: model.n_params(),
        layout: model.layout().to_vec(),
        target_norm: model.target_norm,
        provenance: model.provenance.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let n = model.n_params();
    let mut out = Vec::with_capacity(16 + json.len() + 24 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in [&model.params, &model.adam.first_moment, &model.adam.second_moment] {
        for x in v.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_header(bytes: &[u8]) -> Result<(CheckpointHeader, usize)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Schema("not a checkpoint file (bad magic)".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Schema("truncated checkpoint header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..body])?;
    Ok((header, body))
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelState> {
    let (header, body) = read_header(bytes)?;
    let n = header.n_params;
    if bytes.len() != body + 24 * n {
        return Err(Error::Schema(format!(
            "checkpoint payload has {} bytes, expected {}",
            bytes.len() - body,
            24 * n
        )));
    }
    let read_vec = |k: usize| -> Vec<f64> {
        bytes[body + 8 * n * k..body + 8 * n * (k + 1)]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect()
    };
    let adam = AdamState {
        step_count: header.step_count,
        first_moment: read_vec(1),
        second_moment: read_vec(2),
    };
    let state = ModelState::from_parts(
        &header.spec,
        read_vec(0),
        adam,
        header.best_val_loss.unwrap_or(f64::INFINITY),
        header.epoch,
        header.target_norm,
        header.provenance,
    )?;
    if state.layout() != header.layout.as_slice() {
        return Err(Error::Schema("checkpoint layout does not match its network spec".into()));
    }
    Ok(state)
}

/// Short content hash identifying a checkpoint.
pub fn checkpoint_id(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

pub fn save(model: &ModelState, path: &Path) -> Result<String> {
    let bytes = to_bytes(model)?;
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(checkpoint_id(&bytes))
}

pub fn load(path: &Path) -> Result<(ModelState, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok((from_bytes(&bytes)?, checkpoint_id(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::Exec;
    use crate::volume::Volume;

    #[test]
    fn round_trip_preserves_predictions_bit_for_bit() {
        let mut m = ModelState::init(&NetSpec::tiny([8, 8, 8]), 17).unwrap();
        m.adam.first_moment[3] = 0.25;
        m.adam.step_count = 12;
        m.epoch = 4;
        m.best_val_loss = 0.125;
        m.target_norm = TargetNorm { mean: 3.0, std: 2.0 };
        m.provenance.training_manifest = vec!["S1/V1".into()];
        let bytes = to_bytes(&m).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.adam, m.adam);
        assert_eq!(back.epoch, 4);
        assert_eq!(back.best_val_loss, 0.125);
        assert_eq!(back.provenance, m.provenance);
        let v = Volume::from_fn([8, 8, 8], |x, y, z| ((x * 7 + y * 3 + z) % 5) as f32 * 0.2);
        let a = m.predict(std::slice::from_ref(&v), Exec::Sequential).unwrap();
        let b = back.predict(&[v], Exec::Sequential).unwrap();
        assert_eq!(a[0].to_bits(), b[0].to_bits());
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn payload_is_little_endian_f64_in_layout_order() {
        let m = ModelState::init(&NetSpec::tiny([8, 8, 8]), 1).unwrap();
        let bytes = to_bytes(&m).unwrap();
        let (_, body) = read_header(&bytes).unwrap();
        let first = f64::from_le_bytes(bytes[body..body + 8].try_into().unwrap());
        assert_eq!(first, m.params[0]);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let m = ModelState::init(&NetSpec::tiny([8, 8, 8]), 1).unwrap();
        let bytes = to_bytes(&m).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());
        assert_ne!(checkpoint_id(&bytes), checkpoint_id(&bad));
    }
}
