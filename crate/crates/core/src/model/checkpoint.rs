// SPDX-License-Identifier: MIT OR Apache-2.0

//! Checkpoint container: magic string, little-endian u64 manifest length,
//! JSON manifest, then every tensor as little-endian f32.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::params::{ModelConfig, ModelParams, TensorSpec};
use super::provenance::TrainingProvenance;

pub const MAGIC: &[u8; 16] = b"STRUCTCORR-CKPT1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    provenance: TrainingProvenance,
    /// Offsets count f32 elements from the start of the data section.
    arrays: Vec<TensorSpec>,
}

pub fn to_bytes(params: &ModelParams, provenance: &TrainingProvenance) -> Result<Vec<u8>> {
    let manifest = Manifest {
        config: params.config.clone(),
        provenance: provenance.clone(),
        arrays: params.layout.tensors.clone(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + 4 * params.n_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for &x in &params.data {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ModelParams, TrainingProvenance)> {
    let schema = |m: &str| Error::Schema(m.to_string());
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(schema("not a structcorr checkpoint (bad magic)"));
    }
    let mut len = [0u8; 8];
    len.copy_from_slice(&bytes[MAGIC.len()..MAGIC.len() + 8]);
    let len = u64::from_le_bytes(len) as usize;
    let start = MAGIC.len() + 8;
    let json = bytes.get(start..start + len).ok_or_else(|| schema("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| Error::Schema(format!("manifest: {e}")))?;
    let data_bytes = &bytes[start + len..];
    let expected = ModelParams::init(&manifest.config)?.layout;
    if manifest.arrays != expected.tensors {
        return Err(schema("array index does not match the configured layout"));
    }
    if data_bytes.len() != 4 * expected.total {
        return Err(schema("data section length does not match the array index"));
    }
    let data = data_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((ModelParams::from_data(&manifest.config, data)?, manifest.provenance))
}

pub fn save(path: &Path, params: &ModelParams, provenance: &TrainingProvenance) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, to_bytes(params, provenance)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ModelParams, TrainingProvenance)> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    from_bytes(&fs::read(path)?)
}

impl ModelParams {
    /// Round every parameter through f32, the checkpoint storage precision.
    pub fn round_to_f32(&self) -> Self {
        let mut p = self.clone();
        p.data.iter_mut().for_each(|x| *x = *x as f32 as f64);
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::provenance::{Regime, StageRecord};
    use crate::model::train::OptimizerSettings;
    use std::collections::BTreeMap;

    fn fixture() -> (ModelParams, TrainingProvenance) {
        let cfg = ModelConfig { n_layers: 1, n_heads: 2, d_model: 8, d_ff: 16, context: 8, vocab_size: 10, seed: 4 };
        let prov = TrainingProvenance::pretrained(StageRecord {
            regime: Regime::Pretrained,
            data_fingerprint: "x".into(),
            optimizer: OptimizerSettings::default(),
            seeds: BTreeMap::new(),
            loss_curve: vec![2.0, 1.5],
            heldout_loss: Some(1.7),
            warnings: Vec::new(),
        })
        .unwrap();
        (ModelParams::init(&cfg).unwrap(), prov)
    }

    #[test]
    fn round_trip_is_exact_at_f32_precision() {
        let (p, prov) = fixture();
        let bytes = to_bytes(&p, &prov).unwrap();
        let (q, prov2) = from_bytes(&bytes).unwrap();
        assert_eq!(q, p.round_to_f32());
        assert_eq!(prov2, prov);
        assert_eq!(to_bytes(&q, &prov2).unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs_are_schema_errors() {
        let (p, prov) = fixture();
        let mut bytes = to_bytes(&p, &prov).unwrap();
        assert!(matches!(from_bytes(&bytes[..10]), Err(Error::Schema(_))));
        bytes.pop();
        assert!(matches!(from_bytes(&bytes), Err(Error::Schema(_))));
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(Error::Schema(_))));
    }

    #[test]
    fn missing_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load(&dir.path().join("m.ckpt")), Err(Error::MissingArtifact(_))));
    }
}
