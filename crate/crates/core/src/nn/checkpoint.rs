//! Single-file versioned tensor archive: a JSON header describing named
//! tensors plus raw little-endian f32 data. Used for encoder checkpoints and
//! linear probes.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::sha256_hex;

const MAGIC: &[u8; 8] = b"SSBDTAR1";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    /// Caller-owned metadata (method, config snapshot, manifest hash, ...).
    meta: serde_json::Value,
    tensors: Vec<TensorMeta>,
}

/// In-memory archive of named tensors plus caller metadata.
#[derive(Debug, Clone)]
pub struct TensorArchive {
    pub meta: serde_json::Value,
    tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl TensorArchive {
    pub fn new(meta: serde_json::Value) -> Self {
        TensorArchive {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: String, shape: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push((name, shape, data));
    }

    pub fn names(&self) -> Vec<&str> {
        self.tensors.iter().map(|(n, _, _)| n.as_str()).collect()
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, d)| (s.as_slice(), d.as_slice()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let header = Header {
            version: ARCHIVE_VERSION,
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, s, _)| TensorMeta {
                    name: n.clone(),
                    shape: s.clone(),
                })
                .collect(),
        };
        let header_bytes = serde_json::to_vec(&header).map_err(|e| Error::json(path, e))?;
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&(header_bytes.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&header_bytes).map_err(io)?;
        for (_, _, data) in &self.tensors {
            for v in data {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<TensorArchive> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = std::io::BufReader::new(file);
        let io = |e| Error::io(path, e);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::Data(format!(
                "{} is not a tensor archive",
                path.display()
            )));
        }
        let mut len_bytes = [0u8; 8];
        r.read_exact(&mut len_bytes).map_err(io)?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_bytes = vec![0u8; header_len];
        r.read_exact(&mut header_bytes).map_err(io)?;
        let header: Header =
            serde_json::from_slice(&header_bytes).map_err(|e| Error::json(path, e))?;
        if header.version != ARCHIVE_VERSION {
            return Err(Error::Data(format!(
                "unsupported archive version {}",
                header.version
            )));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for meta in header.tensors {
            let count: usize = meta.shape.iter().product();
            let mut raw = vec![0u8; count * 4];
            r.read_exact(&mut raw).map_err(io)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((meta.name, meta.shape, data));
        }
        Ok(TensorArchive {
            meta: header.meta,
            tensors,
        })
    }
}

/// Hash of a file's bytes, for provenance stamping.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_tensors_and_meta() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let mut a = TensorArchive::new(serde_json::json!({"epoch": 3, "tag": "x"}));
        a.push("w".into(), vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 5.0, -0.25]);
        a.push("b".into(), vec![3], vec![0.5, 0.25, 0.125]);
        a.save(&path).unwrap();
        let b = TensorArchive::load(&path).unwrap();
        assert_eq!(b.meta["epoch"], 3);
        assert_eq!(b.names(), vec!["w", "b"]);
        let (shape, data) = b.get("w").unwrap();
        assert_eq!(shape, &[2, 3]);
        assert_eq!(data, &[1.0, -2.0, 3.5, 0.0, 5.0, -0.25]);
        // Byte-stable: saving the same content twice gives the same hash.
        let path2 = dir.path().join("b.ckpt");
        b.save(&path2).unwrap();
        assert_eq!(file_hash(&path).unwrap(), file_hash(&path2).unwrap());
    }

    #[test]
    fn refuses_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"not an archive").unwrap();
        assert!(TensorArchive::load(&path).is_err());
    }
}
