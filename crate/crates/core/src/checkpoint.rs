//! Binary checkpoint format.
//!
//! Layout (little-endian): magic `MRCK`, version `u32`, tensor count `u32`,
//! then per tensor `{name length u16, name bytes, rank u8, dims u32[rank],
//! data f32[]}`, then a `u32`-length-prefixed UTF-8 JSON blob.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::ParamStore;

const MAGIC: &[u8; 4] = b"MRCK";
pub const FORMAT_VERSION: u32 = 1;

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Writes every tensor of `tensors` (stored as `f32`) plus the JSON blob.
pub fn save(path: &Path, tensors: &ParamStore, json: &serde_json::Value) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(std::fs::File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for (name, value) in tensors.iter() {
            let bytes = name.as_bytes();
            let len = u16::try_from(bytes.len()).map_err(|_| bad(path, format!("tensor name too long: {name}")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&[2u8])?;
            for d in value.shape() {
                w.write_all(&(*d as u32).to_le_bytes())?;
            }
            for v in value.iter() {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        let blob = serde_json::to_vec(json)?;
        w.write_all(&(blob.len() as u32).to_le_bytes())?;
        w.write_all(&blob)?;
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read, path: &Path) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| bad(path, format!("truncated file: {e}")))?;
    Ok(buf)
}

pub fn load(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    if &read_exact::<4>(&mut r, path)? != MAGIC {
        return Err(bad(path, "missing MRCK magic"));
    }
    let version = u32::from_le_bytes(read_exact(&mut r, path)?);
    if version != FORMAT_VERSION {
        return Err(bad(path, format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(read_exact(&mut r, path)?);
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(read_exact(&mut r, path)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|e| bad(path, format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| bad(path, "tensor name is not UTF-8"))?;
        let rank = read_exact::<1>(&mut r, path)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u32::from_le_bytes(read_exact(&mut r, path)?) as usize);
        }
        let (rows, cols) = match dims.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [a, b] => (*a, *b),
            _ => return Err(bad(path, format!("tensor {name} has rank {rank}"))),
        };
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(f32::from_le_bytes(read_exact(&mut r, path)?) as f64);
        }
        let m = Mat::from_shape_vec((rows, cols), data).map_err(|e| bad(path, e.to_string()))?;
        store.insert(&name, m);
    }
    let blob_len = u32::from_le_bytes(read_exact(&mut r, path)?) as usize;
    let mut blob = vec![0u8; blob_len];
    r.read_exact(&mut blob).map_err(|e| bad(path, format!("truncated config: {e}")))?;
    let json = serde_json::from_slice(&blob).map_err(|e| bad(path, format!("config blob: {e}")))?;
    Ok((store, json))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.mrck");
        let mut s = ParamStore::new();
        s.insert("a", array![[1.5, -0.25], [3.0, 1e-7 as f32 as f64]]);
        s.insert("bias", Mat::zeros((1, 3)));
        let json = serde_json::json!({"step": 3, "name": "x"});
        save(&p, &s, &json).unwrap();
        let (back, j) = load(&p).unwrap();
        assert_eq!(back, s);
        assert_eq!(j, json);
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"MRCK");
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.mrck");
        std::fs::write(&p, b"NOPE....").unwrap();
        assert!(matches!(load(&p), Err(Error::Checkpoint { .. })));
        std::fs::write(&p, b"MRCK\x01\x00\x00\x00\x05\x00").unwrap();
        assert!(matches!(load(&p), Err(Error::Checkpoint { .. })));
    }
}
