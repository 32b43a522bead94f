//! Versioned weight blobs and JSON manifest helpers.
//!
//! A blob stores named f64 arrays in insertion order: an 8-byte magic with a
//! format version, then per entry the name, the shape and raw little-endian
//! values. Checkpoint directories pair one or more blobs with a
//! `manifest.json` describing the architecture that produced them.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use ndarray::{ArrayD, IxDyn};
use serde::{de::DeserializeOwned, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"INVSRWB1";

pub fn save_weights(path: &Path, store: &ParamStore) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, arr) in store.iter() {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.extend_from_slice(&(arr.ndim() as u32).to_le_bytes());
        for d in arr.shape() {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in arr.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    file.write_all(&buf)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn load_weights(path: &Path) -> Result<ParamStore> {
    let mut file = std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;

    let mut cursor = 0usize;
    let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
        if *cursor + n > buf.len() {
            return Err(Error::Checkpoint(format!(
                "{}: truncated weight blob",
                path.display()
            )));
        }
        let slice = &buf[*cursor..*cursor + n];
        *cursor += n;
        Ok(slice)
    };

    if take(&mut cursor, 8)? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a recognized weight blob",
            path.display()
        )));
    }
    let count = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut cursor, name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{}: bad parameter name", path.display())))?;
        let ndim = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            values.push(f64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), values)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        store.insert(&name, arr);
    }
    Ok(store)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Checkpoint(format!("serialize {}: {e}", path.display())))?;
    std::fs::write(path, text.as_bytes())
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    #[test]
    fn weights_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        store.insert("a.w", ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.5, -2.25, 0.1, 4.0, -0.0, 1e-300]).unwrap());
        store.insert("a.b", ArrayD::from_elem(IxDyn(&[3]), 0.125));
        let path = dir.path().join("w.bin");
        save_weights(&path, &store).unwrap();
        let loaded = load_weights(&path).unwrap();
        assert_eq!(store.digest(), loaded.digest());
    }

    #[test]
    fn load_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"not a blob").unwrap();
        assert!(matches!(load_weights(&path), Err(Error::Checkpoint(_))));
        assert!(matches!(
            load_weights(&dir.path().join("missing.bin")),
            Err(Error::Checkpoint(_))
        ));
    }
}
