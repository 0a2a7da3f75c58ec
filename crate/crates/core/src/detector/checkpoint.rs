//! Self-describing checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   "DLADCKPT"
//! version  u32       FORMAT_VERSION
//! hlen     u64       length of the JSON header
//! header   hlen      UTF-8 JSON: detector config, taxonomy, counters,
//!                    momenta, config hash, tensor names and shapes
//! payload  8*N       every tensor value as f64, in header order
//! digest   32 bytes  SHA-256 over everything before it
//! ```
//!
//! Values are stored bit-for-bit, so save -> load -> save reproduces the file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::DetectorConfig;
use super::params::{ModelParameters, Tensor};
use crate::error::{Error, Result};
use crate::labelspace::Taxonomy;

pub const MAGIC: &[u8; 8] = b"DLADCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParameters,
    pub detector: DetectorConfig,
    pub taxonomy: Taxonomy,
    pub iteration: u64,
    pub epoch: u64,
    /// `(dynamic, static)` teacher momenta when written by adaptation.
    pub momenta: Option<(f64, f64)>,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    detector: DetectorConfig,
    taxonomy: Taxonomy,
    iteration: u64,
    epoch: u64,
    momenta: Option<(f64, f64)>,
    config_hash: String,
    tensors: Vec<(String, Vec<usize>)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            detector: self.detector.clone(),
            taxonomy: self.taxonomy.clone(),
            iteration: self.iteration,
            epoch: self.epoch,
            momenta: self.momenta,
            config_hash: self.config_hash.clone(),
            tensors: self
                .params
                .iter()
                .map(|(k, t)| (k.clone(), t.shape.clone()))
                .collect(),
        };
        let json = serde_json::to_vec(&header)
            .map_err(|e| Error::Contract(format!("checkpoint header: {e}")))?;
        let mut out = Vec::with_capacity(52 + json.len() + 8 * self.params.num_values());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in self.params.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Incompatible(msg.to_string());
        if bytes.len() < 8 + 4 + 8 + 32 {
            return Err(bad("file too short"));
        }
        if &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Incompatible(format!(
                "format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch (truncated or corrupted file)"));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| bad("header length exceeds file"))?;
        let header: Header = serde_json::from_slice(&body[20..header_end])
            .map_err(|e| Error::Incompatible(format!("header: {e}")))?;
        let mut payload = body[header_end..].chunks_exact(8);
        if payload.remainder().len() != 0 {
            return Err(bad("payload is not a whole number of values"));
        }
        let mut tensors = BTreeMap::new();
        for (name, shape) in header.tensors {
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let chunk = payload.next().ok_or_else(|| bad("payload too short"))?;
                data.push(f64::from_le_bytes(chunk.try_into().expect("8 bytes")));
            }
            tensors.insert(name, Tensor { shape, data });
        }
        if payload.next().is_some() {
            return Err(bad("trailing payload values"));
        }
        Ok(Checkpoint {
            params: ModelParameters::new(tensors)?,
            detector: header.detector,
            taxonomy: header.taxonomy,
            iteration: header.iteration,
            epoch: header.epoch,
            momenta: header.momenta,
            config_hash: header.config_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::Detector;

    fn sample() -> Checkpoint {
        let det = Detector::new(DetectorConfig::micro()).unwrap();
        Checkpoint {
            params: det.init_params(3),
            detector: det.config().clone(),
            taxonomy: Taxonomy::sorted("t", ["a", "b"]).unwrap(),
            iteration: 17,
            epoch: 2,
            momenta: Some((0.99, 0.6)),
            config_hash: "abc".into(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        let ck = sample();
        ck.save(&a).unwrap();
        let loaded = Checkpoint::load(&a).unwrap();
        assert_eq!(loaded, ck);
        loaded.save(&b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn truncated_and_foreign_files_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                Checkpoint::from_bytes(&bytes[..cut]),
                Err(Error::Incompatible(_))
            ));
        }
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 9;
        let err = Checkpoint::from_bytes(&wrong_version).unwrap_err();
        assert!(err.to_string().contains("version 9"), "{err}");
    }
}
