//! Single-file parameter archive: a JSON manifest (names, shapes, offsets,
//! config hash) followed by raw little-endian f64 buffers.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numerics::{ParamSet, Tensor};

use super::ModelError;

const MAGIC: &[u8; 8] = b"NMCDRCK1";

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// Byte offset into the payload section.
    offset: u64,
    /// Payload bytes (rows * cols * 8).
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    dtype: String,
    config_hash: String,
    tensors: Vec<ManifestEntry>,
}

fn ck_err(path: &Path, msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint { path: path.display().to_string(), msg: msg.into() }
}

/// Write `params` in insertion order. Byte-stable for identical inputs.
pub fn save_checkpoint(params: &ParamSet, config_hash: &str, path: &Path) -> Result<(), ModelError> {
    let mut entries = Vec::new();
    let mut offset = 0u64;
    for (name, t) in params.iter() {
        let len = (t.len() * 8) as u64;
        entries.push(ManifestEntry {
            name: name.to_string(),
            rows: t.rows(),
            cols: t.cols(),
            offset,
            len,
        });
        offset += len;
    }
    let manifest = Manifest {
        format: "nmcdr-checkpoint-v1".to_string(),
        dtype: "f64le".to_string(),
        config_hash: config_hash.to_string(),
        tensors: entries,
    };
    let manifest_bytes = serde_json::to_vec(&manifest).map_err(|e| ck_err(path, e.to_string()))?;

    let file = File::create(path).map_err(|e| ck_err(path, e.to_string()))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| ck_err(path, e.to_string());
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(manifest_bytes.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&manifest_bytes).map_err(io)?;
    for (_, t) in params.iter() {
        for v in t.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    Ok(())
}

/// Read an archive back; returns the parameters and the recorded config hash.
pub fn load_checkpoint(path: &Path) -> Result<(ParamSet, String), ModelError> {
    let file = File::open(path).map_err(|e| ck_err(path, e.to_string()))?;
    let mut r = BufReader::new(file);
    let io = |e: std::io::Error| ck_err(path, e.to_string());

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(ck_err(path, "bad magic; not a checkpoint archive"));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes).map_err(io)?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    r.read_exact(&mut manifest_bytes).map_err(io)?;
    let manifest: Manifest =
        serde_json::from_slice(&manifest_bytes).map_err(|e| ck_err(path, e.to_string()))?;
    if manifest.dtype != "f64le" {
        return Err(ck_err(path, format!("unsupported dtype {:?}", manifest.dtype)));
    }

    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(io)?;
    let mut params = ParamSet::new();
    for e in &manifest.tensors {
        let (lo, hi) = (e.offset as usize, (e.offset + e.len) as usize);
        if hi > payload.len() || e.len as usize != e.rows * e.cols * 8 {
            return Err(ck_err(path, format!("tensor {:?} out of bounds", e.name)));
        }
        let data: Vec<f64> = payload[lo..hi]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::from_vec(e.rows, e.cols, data).map_err(|err| ck_err(path, err.to_string()))?;
        params.insert(&e.name, t).map_err(|err| ck_err(path, err.to_string()))?;
    }
    Ok((params, manifest.config_hash))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits_and_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.nmck");
        let mut params = ParamSet::new();
        params
            .insert("z.w", Tensor::from_vec(2, 3, vec![0.1, -2.5, 3e-9, f64::MIN_POSITIVE, 7.0, -0.0]).unwrap())
            .unwrap();
        params.insert("a.b", Tensor::scalar(42.25)).unwrap();
        save_checkpoint(&params, "cfg123", &path).unwrap();
        let (loaded, hash) = load_checkpoint(&path).unwrap();
        assert_eq!(hash, "cfg123");
        let names: Vec<_> = loaded.names().collect();
        assert_eq!(names, vec!["z.w", "a.b"]);
        for ((_, a), (_, b)) in params.iter().zip(loaded.iter()) {
            let same_bits =
                a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same_bits);
        }
    }

    #[test]
    fn identical_saves_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.nmck");
        let p2 = dir.path().join("b.nmck");
        let mut params = ParamSet::new();
        params.insert("t", Tensor::filled(4, 4, 0.125)).unwrap();
        save_checkpoint(&params, "h", &p1).unwrap();
        save_checkpoint(&params, "h", &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
