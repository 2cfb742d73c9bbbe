//! Binary checkpoint format.
//!
//! ```text
//! magic    b"G2TCKPT\0"
//! version  u32 LE
//! count    u64 LE
//! count x entry:
//!   name_len u32 LE, name (UTF-8)
//!   rank     u32 LE, dims u64 LE x rank
//!   payload  f64 LE x prod(dims)
//! ```
//!
//! Parameters of store `s` are written as `s/<name>`. Adam state lives under
//! reserved prefixes: `__adam_m/s/<name>`, `__adam_v/s/<name>` and a rank-0
//! step counter `__adam_t/s`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"G2TCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub tensor: Tensor,
}

pub fn encode_entries(entries: &[Entry]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.tensor.shape().len() as u32).to_le_bytes());
        for &d in e.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for x in e.tensor.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_entries(bytes: &[u8]) -> Result<Vec<Entry>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version mismatch: file has {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let count = r.u64()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("bad name: {e}")))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64()? as usize);
        }
        let numel: usize = dims.iter().product();
        let raw = r.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push(Entry {
            name,
            tensor: Tensor::new(dims, data)?,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last entry".into()));
    }
    Ok(entries)
}

fn store_entries(prefix: &str, store: &ParamStore, out: &mut Vec<Entry>) {
    for p in store.iter() {
        out.push(Entry {
            name: format!("{prefix}/{}", p.name),
            tensor: p.value.clone(),
        });
    }
    for p in store.iter() {
        out.push(Entry {
            name: format!("__adam_m/{prefix}/{}", p.name),
            tensor: p.m.clone(),
        });
        out.push(Entry {
            name: format!("__adam_v/{prefix}/{}", p.name),
            tensor: p.v.clone(),
        });
    }
    out.push(Entry {
        name: format!("__adam_t/{prefix}"),
        tensor: Tensor::scalar(store.adam_steps_taken() as f64),
    });
}

pub fn encode_stores(stores: &[(&str, &ParamStore)]) -> Vec<u8> {
    let mut entries = Vec::new();
    for (prefix, store) in stores {
        store_entries(prefix, store, &mut entries);
    }
    encode_entries(&entries)
}

pub fn save_checkpoint(path: &Path, stores: &[(&str, &ParamStore)]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, encode_stores(stores)).map_err(|e| Error::io(path, e))
}

/// Load values and optimiser state into existing stores. Every parameter of
/// every store must be present with a matching shape.
pub fn decode_into_stores(bytes: &[u8], stores: &mut [(&str, &mut ParamStore)]) -> Result<()> {
    let entries = decode_entries(bytes)?;
    let lookup: std::collections::HashMap<&str, &Tensor> =
        entries.iter().map(|e| (e.name.as_str(), &e.tensor)).collect();
    let fetch = |key: &str, expected: &[usize]| -> Result<Tensor> {
        let t = lookup
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry `{key}`")))?;
        if t.shape() != expected {
            return Err(Error::ParamShape {
                name: key.to_string(),
                expected: expected.to_vec(),
                found: t.shape().to_vec(),
            });
        }
        Ok((*t).clone())
    };
    for (prefix, store) in stores.iter_mut() {
        let mut updates = Vec::new();
        for p in store.iter() {
            let shape = p.value.shape();
            let value = fetch(&format!("{prefix}/{}", p.name), shape)?;
            let m = fetch(&format!("__adam_m/{prefix}/{}", p.name), shape)?;
            let v = fetch(&format!("__adam_v/{prefix}/{}", p.name), shape)?;
            updates.push((value, m, v));
        }
        let t = fetch(&format!("__adam_t/{prefix}"), &[])?.item();
        for (p, (value, m, v)) in store.params_mut().iter_mut().zip(updates) {
            p.value = value;
            p.m = m;
            p.v = v;
            p.grad = None;
        }
        store.set_adam_t(t as u64);
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path, stores: &mut [(&str, &mut ParamStore)]) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_into_stores(&bytes, stores)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::matrix(2, 2, vec![1.0, -2.0, 3.5, 1e-300]).unwrap())
            .unwrap();
        s.insert("b", Tensor::scalar(-0.0)).unwrap();
        s
    }

    #[test]
    fn byte_exact_round_trip() {
        let s = store();
        let bytes = encode_stores(&[("m", &s)]);
        let mut t = store();
        t.set("a", Tensor::zeros(vec![2, 2])).unwrap();
        decode_into_stores(&bytes, &mut [("m", &mut t)]).unwrap();
        assert_eq!(encode_stores(&[("m", &t)]), bytes);
    }

    #[test]
    fn wrong_shape_names_param() {
        let s = store();
        let bytes = encode_stores(&[("m", &s)]);
        let mut t = ParamStore::new();
        t.insert("a", Tensor::zeros(vec![3])).unwrap();
        t.insert("b", Tensor::scalar(0.0)).unwrap();
        let err = decode_into_stores(&bytes, &mut [("m", &mut t)]).unwrap_err();
        assert!(err.to_string().contains("m/a"), "{err}");
    }

    #[test]
    fn truncated_and_version_errors() {
        let bytes = encode_stores(&[("m", &store())]);
        assert!(decode_entries(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        let err = decode_entries(&bad).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }
}
