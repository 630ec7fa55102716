//! Checkpoint file: a header line, a JSON manifest, then raw little-endian
//! f32 blobs in manifest order.
//!
//! ```text
//! AFRCKPT 1 <manifest bytes>\n
//! { ...manifest... }
//! <blob 0><blob 1>...
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, SeparationModel};
use crate::params::ParamStore;
use crate::tensor::{DType, Tensor};

const MAGIC: &str = "AFRCKPT";
const VERSION: u32 = 1;

/// Adam moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ParamStore<f32>,
    pub adam: Option<AdamState>,
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Validation SI-SNRi at save time.
    pub score: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    group: String,
    shape: Vec<usize>,
    dtype: DType,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    model: ModelConfig,
    epoch: usize,
    step: u64,
    score: Option<f64>,
    adam_step: Option<u64>,
    tensors: Vec<Entry>,
}

const GROUPS: [&str; 3] = ["param", "adam_m", "adam_v"];

impl Checkpoint {
    pub fn from_model(model: &SeparationModel<f32>) -> Self {
        Checkpoint {
            model: model.cfg.clone(),
            params: model.store.clone(),
            adam: None,
            epoch: 0,
            step: 0,
            score: None,
        }
    }

    pub fn to_model(&self) -> Result<SeparationModel<f32>> {
        SeparationModel::from_store(self.model.clone(), self.params.clone())
    }

    fn stores(&self) -> Vec<(&'static str, &ParamStore<f32>)> {
        let mut v = vec![(GROUPS[0], &self.params)];
        if let Some(a) = &self.adam {
            v.push((GROUPS[1], &a.m));
            v.push((GROUPS[2], &a.v));
        }
        v
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut blob = Vec::new();
        for (group, store) in self.stores() {
            for (name, t) in store.iter() {
                tensors.push(Entry {
                    name: name.clone(),
                    group: group.to_string(),
                    shape: t.shape().to_vec(),
                    dtype: DType::F32,
                    offset: blob.len() as u64,
                });
                for v in t.data() {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let manifest = Manifest {
            model: self.model.clone(),
            epoch: self.epoch,
            step: self.step,
            score: self.score,
            adam_step: self.adam.as_ref().map(|a| a.step),
            tensors,
        };
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Usage(e.to_string()))?;
        let mut out = format!("{MAGIC} {VERSION} {}\n", json.len()).into_bytes();
        out.extend_from_slice(json.as_bytes());
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let bad = |offset: usize, detail: String| Error::Format {
            offset: offset as u64,
            detail,
        };
        let nl = b
            .iter()
            .position(|&c| c == b'\n')
            .ok_or_else(|| bad(0, "missing header line".into()))?;
        let header = std::str::from_utf8(&b[..nl]).map_err(|_| bad(0, "header is not UTF-8".into()))?;
        let fields: Vec<&str> = header.split(' ').collect();
        if fields.len() != 3 || fields[0] != MAGIC {
            return Err(bad(0, format!("not a checkpoint header: '{header}'")));
        }
        if fields[1] != VERSION.to_string() {
            return Err(bad(MAGIC.len() + 1, format!("unsupported version {}", fields[1])));
        }
        let len: usize = fields[2]
            .parse()
            .map_err(|_| bad(MAGIC.len() + 3, format!("bad manifest length '{}'", fields[2])))?;
        let start = nl + 1;
        let body = b
            .get(start..start + len)
            .ok_or_else(|| bad(b.len(), "manifest truncated".into()))?;
        let manifest: Manifest =
            serde_json::from_slice(body).map_err(|e| bad(start + e.column(), format!("manifest: {e}")))?;
        let blob_at = start + len;
        let blob = &b[blob_at..];
        let mut stores: [ParamStore<f32>; 3] = Default::default();
        for e in &manifest.tensors {
            if e.dtype != DType::F32 {
                return Err(bad(blob_at, format!("{}: dtype {} not supported", e.name, e.dtype)));
            }
            let g = GROUPS
                .iter()
                .position(|&g| g == e.group)
                .ok_or_else(|| bad(blob_at, format!("{}: unknown group '{}'", e.name, e.group)))?;
            let n: usize = e.shape.iter().product();
            let lo = e.offset as usize;
            let bytes = blob
                .get(lo..lo + 4 * n)
                .ok_or_else(|| bad(blob_at + lo, format!("{}: blob out of range", e.name)))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            stores[g].insert(e.name.clone(), Tensor::from_vec(&e.shape, data)?);
        }
        let [params, m, v] = stores;
        let adam = manifest.adam_step.map(|step| AdamState { step, m, v });
        Ok(Checkpoint {
            model: manifest.model,
            params,
            adam,
            epoch: manifest.epoch,
            step: manifest.step,
            score: manifest.score,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        // Write then rename, so an interrupted save never clobbers a good file.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip() {
        let cfg = ModelConfig {
            enc_channels: 4,
            channels: 4,
            stages: 2,
            blocks: 2,
            ..ModelConfig::default()
        };
        let model = SeparationModel::<f32>::new(cfg, 9).unwrap();
        let mut ck = Checkpoint::from_model(&model);
        ck.adam = Some(AdamState {
            step: 3,
            m: model.store.clone(),
            v: model.store.clone(),
        });
        ck.score = Some(1.5);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert!(matches!(Checkpoint::from_bytes(b"nope\n"), Err(Error::Format { offset: 0, .. })));
    }
}
