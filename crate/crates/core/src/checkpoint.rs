//! Flat key -> tensor container format used for checkpoints and weight
//! files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"SVCK"
//! u32    version (currently 1)
//! u64    entry count
//! entry* repeated:
//!   u32    name length, then that many UTF-8 bytes
//!   u8     dtype: 0 = f64 tensor, 1 = raw byte blob
//!   tensor: u8 ndim, ndim x u64 dims, prod(dims) x f64 values
//!   blob:   u64 length, then raw bytes
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::IxDyn;

use crate::autodiff::Arr;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

const MAGIC: &[u8; 4] = b"SVCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    Tensor(Arr),
    Bytes(Vec<u8>),
}

pub fn save(path: &Path, entries: &BTreeMap<String, Entry>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u64).to_le_bytes())?;
    for (name, entry) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        match entry {
            Entry::Tensor(t) => {
                w.write_all(&[0u8])?;
                w.write_all(&[t.ndim() as u8])?;
                for d in t.shape() {
                    w.write_all(&(*d as u64).to_le_bytes())?;
                }
                let std = t.as_standard_layout();
                for v in std.iter() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            Entry::Bytes(b) => {
                w.write_all(&[1u8])?;
                w.write_all(&(b.len() as u64).to_le_bytes())?;
                w.write_all(b)?;
            }
        }
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<BTreeMap<String, Entry>> {
    let mut r = std::io::BufReader::new(
        std::fs::File::open(path)
            .map_err(|e| Error::Load(format!("cannot open {}: {e}", path.display())))?,
    );
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Load(format!(
            "{} is not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Load(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let count = read_u64(&mut r)? as usize;
    let mut entries = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Load("non-UTF8 entry name".to_string()))?;
        let mut dtype = [0u8; 1];
        r.read_exact(&mut dtype)?;
        let entry = match dtype[0] {
            0 => {
                let mut ndim = [0u8; 1];
                r.read_exact(&mut ndim)?;
                let dims: Vec<usize> = (0..ndim[0])
                    .map(|_| read_u64(&mut r).map(|d| d as usize))
                    .collect::<Result<_>>()?;
                let len: usize = dims.iter().product::<usize>().max(1);
                let mut vals = vec![0.0f64; len];
                for v in &mut vals {
                    let mut buf = [0u8; 8];
                    r.read_exact(&mut buf)?;
                    *v = f64::from_le_bytes(buf);
                }
                Entry::Tensor(
                    Arr::from_shape_vec(IxDyn(&dims), vals)
                        .map_err(|e| Error::Load(format!("bad tensor for {name}: {e}")))?,
                )
            }
            1 => {
                let len = read_u64(&mut r)? as usize;
                let mut bytes = vec![0u8; len];
                r.read_exact(&mut bytes)?;
                Entry::Bytes(bytes)
            }
            other => {
                return Err(Error::Load(format!("unknown dtype tag {other} for {name}")));
            }
        };
        entries.insert(name, entry);
    }
    Ok(entries)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Insert every parameter of `store` under `prefix.` into `entries`.
pub fn pack_store(entries: &mut BTreeMap<String, Entry>, prefix: &str, store: &ParamStore) {
    for (name, value) in store.iter() {
        entries.insert(format!("{prefix}.{name}"), Entry::Tensor(value.clone()));
    }
}

/// Extract every `prefix.`-keyed tensor into a fresh store.
pub fn unpack_store(entries: &BTreeMap<String, Entry>, prefix: &str) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    let want = format!("{prefix}.");
    for (name, entry) in entries {
        if let Some(short) = name.strip_prefix(&want) {
            match entry {
                Entry::Tensor(t) => store.insert(short, t.clone()),
                Entry::Bytes(_) => {
                    return Err(Error::Load(format!("{name} should be a tensor")));
                }
            }
        }
    }
    if store.is_empty() {
        return Err(Error::Load(format!("no `{prefix}.` entries in checkpoint")));
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{randn, seeded};

    #[test]
    fn roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.svck");
        let mut entries = BTreeMap::new();
        entries.insert(
            "a.weight".to_string(),
            Entry::Tensor(randn(&mut seeded(1), &[3, 4])),
        );
        entries.insert(
            "meta".to_string(),
            Entry::Bytes(b"hello world".to_vec()),
        );
        entries.insert(
            "scalar".to_string(),
            Entry::Tensor(Arr::from_elem(IxDyn(&[]), 7.25)),
        );
        save(&path, &entries).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back, entries);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.svck");
        std::fs::write(&path, b"NOPE123456").unwrap();
        let err = load(&path).unwrap_err().to_string();
        assert!(err.contains("bad magic"), "{err}");
    }

    #[test]
    fn store_pack_unpack() {
        let mut store = ParamStore::new();
        store.insert("layer.weight", randn(&mut seeded(2), &[2, 2]));
        store.insert("layer.bias", randn(&mut seeded(3), &[2]));
        let mut entries = BTreeMap::new();
        pack_store(&mut entries, "G", &store);
        let back = unpack_store(&entries, "G").unwrap();
        assert_eq!(back.get("layer.weight"), store.get("layer.weight"));
        assert_eq!(back.get("layer.bias"), store.get("layer.bias"));
        assert!(unpack_store(&entries, "D").is_err());
    }
}
