//! Binary named-tensor archive.
//!
//! Layout: magic `DBGN`, version `u16`, entry count `u32`; per entry a
//! length-prefixed UTF-8 name, a dtype tag (`0` = f32), rank `u8`, dims as
//! `u32` little-endian, then raw 32-bit little-endian floats. An optional
//! trailing `META` block carries sorted `key=value` lines. Writing is
//! deterministic (entries sorted by name) and `load(save(x))` reproduces
//! every tensor bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DBGN";
const META_MAGIC: &[u8; 4] = b"META";
const VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor<f32>>,
    pub meta: BTreeMap<String, String>,
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    tensors: &BTreeMap<String, Tensor<T>>,
    meta: &BTreeMap<String, String>,
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out.extend_from_slice(META_MAGIC);
    let mut meta_text = String::new();
    for (k, v) in meta {
        debug_assert!(!k.contains('\n') && !v.contains('\n'));
        meta_text.push_str(k);
        meta_text.push('=');
        meta_text.push_str(v);
        meta_text.push('\n');
    }
    out.extend_from_slice(&(meta_text.len() as u32).to_le_bytes());
    out.extend_from_slice(meta_text.as_bytes());
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let slice = self.bytes.get(self.pos..self.pos + n).ok_or_else(|| Error::Format {
            path: self.path.display().to_string(),
            msg: format!("truncated at byte {}", self.pos),
        })?;
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    let bad = |msg: String| Error::Format {
        path: path.display().to_string(),
        msg,
    };
    if r.take(4)? != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| bad("tensor name is not UTF-8".into()))?;
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(bad(format!("unsupported dtype tag {dtype}")));
        }
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(4 * n)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if tensors.insert(name.clone(), Tensor::new(shape, data)).is_some() {
            return Err(bad(format!("duplicate tensor name {name}")));
        }
    }
    let mut meta = BTreeMap::new();
    if r.bytes.len() > r.pos {
        if r.take(4)? != META_MAGIC {
            return Err(bad("expected META block after entries".into()));
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|_| bad("metadata is not UTF-8".into()))?;
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                meta.insert(k.to_string(), v.to_string());
            }
        }
    }
    Ok(Checkpoint { tensors, meta })
}

/// FNV-1a hash of a string, for cheap config fingerprints in metadata.
pub fn fingerprint(s: &str) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for b in s.bytes() {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("deblur-checkpoint-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn round_trip_is_bitwise_exact() {
        let mut rng = Rng::new(100);
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "a.w".to_string(),
            Tensor::<f32>::new(vec![2, 3], (0..6).map(|_| rng.range(-1.0, 1.0) as f32).collect()),
        );
        tensors.insert("b".to_string(), Tensor::<f32>::scalar(-0.0));
        let mut meta = BTreeMap::new();
        meta.insert("epoch".to_string(), "3".to_string());
        let path = tmp("roundtrip.ckpt");
        save_checkpoint(&path, &tensors, &meta).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.meta["epoch"], "3");
        assert_eq!(loaded.tensors.len(), 2);
        for (name, t) in &tensors {
            assert!(loaded.tensors[name].bits_eq(t), "bit drift in {name}");
        }
        // Save again: identical bytes.
        let path2 = tmp("roundtrip2.ckpt");
        save_checkpoint(&path2, &loaded.tensors, &loaded.meta).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let path = tmp("bad.ckpt");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(load_checkpoint(&path).is_err());
        std::fs::write(&path, b"DBGN\x01\x00\x05\x00\x00\x00").unwrap(); // claims 5 entries
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn fingerprint_is_stable() {
        assert_eq!(fingerprint("abc"), fingerprint("abc"));
        assert_ne!(fingerprint("abc"), fingerprint("abd"));
    }
}
