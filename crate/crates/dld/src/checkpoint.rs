//! Checkpoint container: 8-byte magic `DLDCKPT1`, a u32 record count, then
//! flat records of (name: u32 length + UTF-8 bytes, shape: u32 rank + u32
//! dims, data: little-endian f32). Parameter names are stable across runs;
//! the full name table is documented in the book.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Array;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"DLDCKPT1";

pub fn save(store: &ParamStore<f32>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for e in store.entries() {
        let name = e.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(e.shape.len() as u32).to_le_bytes())?;
        for &d in &e.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in e.data.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, "magic header")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {:?} in {}", magic, path.display())));
    }
    let count = read_u32(&mut r, "record count")? as usize;
    let mut store = ParamStore::new();
    for rec in 0..count {
        let ctx = format!("record {rec}");
        let name_len = read_u32(&mut r, &ctx)? as usize;
        if name_len > 1 << 16 {
            return Err(Error::Format(format!("{ctx}: implausible name length {name_len}")));
        }
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes, &ctx)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Format(format!("{ctx}: parameter name is not UTF-8")))?;
        let rank = read_u32(&mut r, &ctx)? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("{ctx} ({name}): implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r, &ctx)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 4];
        read_exact(&mut r, &mut bytes, &format!("{ctx} ({name}) data"))?;
        let data: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        store.insert(&name, Array::new(data, shape));
    }
    Ok(store)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::Format(format!("truncated checkpoint while reading {what}: {e}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Hex SHA-256 of a file, used for determinism checks on artifacts.
pub fn file_sha256(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let mut f = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex_string(&hasher.finalize()))
}

pub fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut store = ParamStore::new();
        store.insert("layer.weight", Array::new(vec![1.5f32, -2.25, 0.0, 1e-8], vec![2, 2]));
        store.insert("layer.bias", Array::new(vec![0.25f32, -0.5], vec![2]));
        save(&store, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        for (a, b) in store.entries().iter().zip(loaded.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn bad_magic_and_truncation_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTMAGIC").unwrap();
        assert!(matches!(load(&path), Err(Error::Format(_))));

        let good = dir.path().join("good.ckpt");
        let mut store = ParamStore::new();
        store.insert("w", Array::new(vec![1.0f32; 16], vec![16]));
        save(&store, &good).unwrap();
        let bytes = std::fs::read(&good).unwrap();
        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() - 7]).unwrap();
        match load(&cut) {
            Err(Error::Format(msg)) => assert!(msg.contains("record 0"), "message should name the record: {msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
