//! JSON checkpoints with base64 little-endian `f32` payloads.
//!
//! Values are stored at single precision. Training keeps parameters and
//! optimizer moments rounded to `f32` so that a save/load cycle is exact.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::optim::AdamWState;
use super::tensor::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Blob {
    shape: Vec<usize>,
    data: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimFile {
    t: u64,
    m: BTreeMap<String, Blob>,
    v: BTreeMap<String, Blob>,
}

#[derive(Debug, Serialize, Deserialize)]
struct File {
    version: u32,
    seed: u64,
    epoch: usize,
    step: usize,
    config: serde_json::Value,
    params: BTreeMap<String, Blob>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    optimizer: Option<OptimFile>,
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub epoch: usize,
    pub step: usize,
    pub config: serde_json::Value,
    pub params: ParamStore,
    pub optimizer: Option<AdamWState>,
}

fn encode(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    STANDARD.encode(bytes)
}

fn decode(name: &str, blob: &Blob) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(&blob.data)
        .map_err(|e| Error::Checkpoint(format!("`{name}`: bad base64: {e}")))?;
    let expected: usize = blob.shape.iter().product();
    if bytes.len() != expected * 4 {
        return Err(Error::Checkpoint(format!(
            "`{name}`: shape {:?} needs {} bytes, payload has {}",
            blob.shape,
            expected * 4,
            bytes.len()
        )));
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::Checkpoint(format!("`{name}`: non-finite value in payload")));
    }
    Ok(vals)
}

fn blobs_of(map: &BTreeMap<String, Vec<f64>>, shapes: &ParamStore) -> BTreeMap<String, Blob> {
    map.iter()
        .map(|(k, v)| {
            let shape = shapes.get(k).map_or_else(|| vec![v.len()], |t| t.shape().to_vec());
            (k.clone(), Blob { shape, data: encode(v) })
        })
        .collect()
}

fn vecs_of(map: &BTreeMap<String, Blob>) -> Result<BTreeMap<String, Vec<f64>>> {
    map.iter().map(|(k, b)| Ok((k.clone(), decode(k, b)?))).collect()
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let params = self
            .params
            .iter()
            .map(|(k, t)| {
                (
                    k.clone(),
                    Blob {
                        shape: t.shape().to_vec(),
                        data: encode(t.data()),
                    },
                )
            })
            .collect();
        let optimizer = self.optimizer.as_ref().map(|st| OptimFile {
            t: st.t,
            m: blobs_of(&st.m, &self.params),
            v: blobs_of(&st.v, &self.params),
        });
        let file = File {
            version: CHECKPOINT_VERSION,
            seed: self.seed,
            epoch: self.epoch,
            step: self.step,
            config: self.config.clone(),
            params,
            optimizer,
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("not valid JSON: {e}")))?;
        match raw.get("version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == CHECKPOINT_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Checkpoint(format!(
                    "unsupported version {v}, expected {CHECKPOINT_VERSION}"
                )))
            }
            None => return Err(Error::Checkpoint("missing version field".into())),
        }
        let file: File =
            serde_json::from_value(raw).map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))?;
        let mut params = ParamStore::new();
        for (k, blob) in &file.params {
            let data = decode(k, blob)?;
            let t = Tensor::new(blob.shape.clone(), data).map_err(|e| Error::Checkpoint(e.to_string()))?;
            params.insert(k.clone(), t)?;
        }
        let optimizer = match file.optimizer {
            Some(o) => Some(AdamWState {
                t: o.t,
                m: vecs_of(&o.m)?,
                v: vecs_of(&o.v)?,
            }),
            None => None,
        };
        Ok(Checkpoint {
            seed: file.seed,
            epoch: file.epoch,
            step: file.step,
            config: file.config,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_json()?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn sample() -> Checkpoint {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        ps.init_uniform("b.weight", &[3, 2], 3, &mut rng).unwrap();
        ps.init_uniform("a.bias", &[4], 2, &mut rng).unwrap();
        ps.round_to_f32();
        let mut st = AdamWState {
            t: 5,
            ..Default::default()
        };
        st.m.insert("a.bias".into(), vec![0.1, 0.2, 0.3, 0.4]);
        st.v.insert("a.bias".into(), vec![1e-3, 2e-3, 3e-3, 4e-3]);
        st.round_to_f32();
        Checkpoint {
            seed: 42,
            epoch: 2,
            step: 17,
            config: serde_json::json!({"lr": 2e-4}),
            params: ps,
            optimizer: Some(st),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let text = ck.to_json().unwrap();
        let back = Checkpoint::from_json(&text).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let text = sample()
            .to_json()
            .unwrap()
            .replacen("\"version\":1", "\"version\":7", 1);
        let err = Checkpoint::from_json(&text).unwrap_err();
        assert!(err.to_string().contains("unsupported version 7"), "{err}");
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let ck = sample();
        let mut v: serde_json::Value = serde_json::from_str(&ck.to_json().unwrap()).unwrap();
        v["params"]["a.bias"]["data"] = serde_json::Value::String(STANDARD.encode([0u8; 6]));
        assert!(matches!(
            Checkpoint::from_json(&v.to_string()),
            Err(Error::Checkpoint(_))
        ));
        v["params"]["a.bias"]["data"] = serde_json::Value::String("@@not base64@@".into());
        assert!(matches!(
            Checkpoint::from_json(&v.to_string()),
            Err(Error::Checkpoint(_))
        ));
    }
}
