//! Flat binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"SFCK"
//! version  u32
//! digest   u32 length + UTF-8 bytes   (model-config digest)
//! count    u32
//! count × { name: u32 length + UTF-8, ndim: u32, dims: ndim × u64, values: f64 × prod(dims) }
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"SFCK";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config_digest: String,
    /// Parameters in store order.
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, config_digest: &str) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config_digest: config_digest.to_string(),
            tensors: store.iter().map(|p| (p.name.clone(), p.tensor.clone())).collect(),
        }
    }

    pub fn to_map(&self) -> BTreeMap<String, Tensor> {
        self.tensors.iter().cloned().collect()
    }
}

pub fn write_checkpoint<W: Write>(mut w: W, ckpt: &Checkpoint) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&ckpt.version.to_le_bytes())?;
    write_str(&mut w, &ckpt.config_digest)?;
    w.write_all(&(ckpt.tensors.len() as u32).to_le_bytes())?;
    for (name, t) in &ckpt.tensors {
        write_str(&mut w, name)?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let config_digest = read_str(&mut r)?;
    let count = read_u32(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = read_str(&mut r)?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        tensors.push((name, Tensor::new(shape, data)?));
    }
    Ok(Checkpoint {
        version,
        config_digest,
        tensors,
    })
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, config_digest: &str) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_checkpoint(&mut w, &Checkpoint::from_store(store, config_digest))?;
    w.flush()?;
    Ok(())
}

/// Loads values into `store`, checking the config digest.
pub fn load_checkpoint(path: &Path, store: &mut ParamStore, config_digest: &str) -> Result<()> {
    let f = std::fs::File::open(path)?;
    let ckpt = read_checkpoint(std::io::BufReader::new(f))?;
    if ckpt.config_digest != config_digest {
        return Err(Error::Checkpoint(format!(
            "config digest mismatch: checkpoint {} vs model {config_digest}",
            ckpt.config_digest
        )));
    }
    store.load_values(&ckpt.to_map())
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u32(r)? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Checkpoint(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::matrix(2, 2, vec![1.5, -0.0, f64::MIN_POSITIVE, 1e-300]).unwrap())
            .unwrap();
        s.add("b", Tensor::scalar(std::f64::consts::PI)).unwrap();
        let ck = Checkpoint::from_store(&s, "abc");
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ck).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.config_digest, "abc");
        for ((n1, t1), (n2, t2)) in ck.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
        let mut buf2 = Vec::new();
        write_checkpoint(&mut buf2, &back).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn rejects_bad_magic_and_digest() {
        assert!(read_checkpoint(&b"NOPE\x01\0\0\0"[..]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut s = ParamStore::new();
        s.add("w", Tensor::row(vec![1.0])).unwrap();
        save_checkpoint(&path, &s, "one").unwrap();
        assert!(load_checkpoint(&path, &mut s, "two").is_err());
        load_checkpoint(&path, &mut s, "one").unwrap();
    }
}
