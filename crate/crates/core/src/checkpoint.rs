//! Binary checkpoints: magic `DHBRCKPT`, little-endian, versioned.
//!
//! Layout: magic, u32 version, then length-prefixed config TOML, skeleton
//! hash and hierarchy hash, then u32 parameter count followed by
//! (name, rank, dims, f64 data) per parameter.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::hierarchy::{Reader, SamplingHierarchy};
use crate::mesh::Mesh;
use crate::model::DhbrModel;
use crate::nn::{ParamStore, Tensor};
use crate::skeleton::SkeletonSpec;

const MAGIC: &[u8; 8] = b"DHBRCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// The TOML text exactly as stored.
    pub config_text: String,
    pub skeleton_hash: String,
    pub hierarchy_hash: String,
    pub params: ParamStore,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, x: usize) {
        self.0.extend_from_slice(&u32::try_from(x).expect("fits in u32").to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
}

fn read_str(r: &mut Reader) -> Result<String> {
    let n = r.u32()?;
    String::from_utf8(r.bytes(n)?.to_vec()).map_err(|e| Error::Format(format!("checkpoint string: {e}")))
}

impl Checkpoint {
    pub fn from_model(model: &DhbrModel, config: &RunConfig) -> Self {
        let config_text = config.to_toml();
        Checkpoint {
            config: config.clone(),
            config_text,
            skeleton_hash: model.skeleton().hash(),
            hierarchy_hash: model.hierarchy().hash(),
            params: model.params().clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(MAGIC.to_vec());
        w.0.extend_from_slice(&VERSION.to_le_bytes());
        w.str(&self.config_text);
        w.str(&self.skeleton_hash);
        w.str(&self.hierarchy_hash);
        w.u32(self.params.len());
        for id in self.params.ids() {
            let t = self.params.get(id);
            w.str(self.params.name(id));
            w.u32(t.shape().len());
            for &d in t.shape() {
                w.u32(d);
            }
            for x in t.data() {
                w.0.extend_from_slice(&x.to_le_bytes());
            }
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        if r.bytes(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let config_text = read_str(&mut r)?;
        let config = RunConfig::from_toml(&config_text)?;
        let skeleton_hash = read_str(&mut r)?;
        let hierarchy_hash = read_str(&mut r)?;
        let n = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let name = read_str(&mut r)?;
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            params.add(name, Tensor::new(shape, data)?);
        }
        if !r.done() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint {
            config,
            config_text,
            skeleton_hash,
            hierarchy_hash,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// Rebuilds the model, verifying both hashes and every parameter shape.
    pub fn into_model(
        self,
        template: Mesh,
        skeleton: SkeletonSpec,
        hierarchy: SamplingHierarchy,
    ) -> Result<DhbrModel> {
        if skeleton.hash() != self.skeleton_hash {
            return Err(Error::HashMismatch(format!(
                "skeleton {} differs from checkpoint {}",
                skeleton.hash(),
                self.skeleton_hash
            )));
        }
        if hierarchy.hash() != self.hierarchy_hash {
            return Err(Error::HashMismatch(format!(
                "hierarchy {} differs from checkpoint {}",
                hierarchy.hash(),
                self.hierarchy_hash
            )));
        }
        let mut model = DhbrModel::new(self.config.model.clone(), template, skeleton, hierarchy)?;
        if model.params().len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model needs {}",
                self.params.len(),
                model.params().len()
            )));
        }
        let store = model.params_mut();
        for id in self.params.ids() {
            if store.name(id) != self.params.name(id) || store.get(id).shape() != self.params.get(id).shape() {
                return Err(Error::Format(format!(
                    "tensor {} {:?} does not match model tensor {} {:?}",
                    self.params.name(id),
                    self.params.get(id).shape(),
                    store.name(id),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = self.params.get(id).clone();
        }
        Ok(model)
    }
}

/// Loads a checkpoint file against a dataset's template, skeleton and
/// hierarchy. Also returns the run config and the SHA-256 of the file.
pub fn load_trained(path: impl AsRef<Path>, dataset: &Dataset) -> Result<(DhbrModel, RunConfig, String)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let hash = hex::encode(Sha256::digest(&bytes));
    let ck = Checkpoint::from_bytes(&bytes)?;
    let config = ck.config.clone();
    let hierarchy = dataset.load_hierarchy()?;
    let model = ck.into_model(dataset.template.clone(), dataset.skeleton.clone(), hierarchy)?;
    Ok((model, config, hash))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::small_model;

    #[test]
    fn round_trip_and_hash_checks() {
        let (m, meshes) = small_model();
        let cfg = RunConfig {
            epochs: 7,
            ..RunConfig::default()
        };
        let ck = Checkpoint::from_model(m, &cfg);
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..8], b"DHBRCKPT");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.config, cfg);
        assert_eq!(back.to_bytes(), bytes);

        let model = back
            .clone()
            .into_model(m.template().clone(), m.skeleton().clone(), m.hierarchy().clone())
            .unwrap();
        assert_eq!(model.reconstruct(&meshes[0]).unwrap(), m.reconstruct(&meshes[0]).unwrap());

        let mut other = m.hierarchy().clone();
        other.spirals[0].sequences[0].swap(1, 2);
        let err = back.into_model(m.template().clone(), m.skeleton().clone(), other).unwrap_err();
        assert!(matches!(err, Error::HashMismatch(_)));
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let (m, _) = small_model();
        let bytes = Checkpoint::from_model(m, &RunConfig::default()).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }
}
