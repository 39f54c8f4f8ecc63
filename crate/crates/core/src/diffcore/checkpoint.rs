//! Binary parameter files.
//!
//! Layout: the 8-byte magic `IPMODEL1`, a little-endian `u64` header length,
//! a JSON header (method tag, trained flag, tensor manifest with byte
//! offsets), then every tensor's values as little-endian `f64`.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"IPMODEL1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the value blob.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub method: String,
    pub trained: bool,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub provenance: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub method: String,
    pub trained: bool,
    /// Free-form run metadata (seed, config digest, version) stored in the
    /// header.
    pub provenance: BTreeMap<String, String>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut offset = 0u64;
        let tensors = self
            .params
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry { name: name.to_string(), shape: t.shape().to_vec(), offset };
                offset += 8 * t.len() as u64;
                e
            })
            .collect();
        let header = CheckpointHeader {
            method: self.method.clone(),
            trained: self.trained,
            provenance: self.provenance.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, t) in self.params.iter() {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| Error::Checkpoint("file too short for header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a model file".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| Error::Checkpoint("truncated header length".into()))?;
        let len = u64::from_le_bytes(len);
        if len > 64 << 20 {
            return Err(Error::Checkpoint(format!("implausible header length {len}")));
        }
        let mut json = vec![0u8; len as usize];
        r.read_exact(&mut json).map_err(|_| Error::Checkpoint("truncated header".into()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
        let mut blob = Vec::new();
        r.read_to_end(&mut blob)?;

        let mut params = ParamStore::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 8 * n;
            if end > blob.len() {
                return Err(Error::Checkpoint(format!("tensor `{}` runs past end of file", e.name)));
            }
            let data = blob[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(e.shape.clone(), data)
                .map_err(|err| Error::Checkpoint(format!("tensor `{}`: {err}", e.name)))?;
            if params.id(&e.name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor `{}`", e.name)));
            }
            params.add(e.name.clone(), t);
        }
        Ok(Checkpoint { method: header.method, trained: header.trained, provenance: header.provenance, params })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Checkpoint::read_from(std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.add("a", Tensor::matrix(2, 2, vec![1.0, -0.5, 1e-300, 3.25]).unwrap());
        params.add("b", Tensor::vector(vec![7.0]));
        Checkpoint { method: "proposed".into(), trained: true, provenance: BTreeMap::new(), params }
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let ck = sample();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        assert_eq!(Checkpoint::read_from(&buf[..]).unwrap(), ck);
    }

    #[test]
    fn corrupt_files_rejected() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(Checkpoint::read_from(&bad[..]).is_err());
        assert!(Checkpoint::read_from(&buf[..buf.len() - 4]).is_err());
        assert!(Checkpoint::read_from(&buf[..5]).is_err());
    }
}
