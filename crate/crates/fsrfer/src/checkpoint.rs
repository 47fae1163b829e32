//! Versioned checkpoint container: a magic string, a format version, a
//! UTF-8 key-value config echo, then named f64 tensors with explicit
//! shapes. All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"FSRFERCK";
const VERSION: u32 = 1;
/// dtype tag for f64 little-endian (the only dtype currently written).
const DTYPE_F64: u8 = 0;

/// A checkpoint: what kind of model it holds, the resolved configuration it
/// was produced under, and the named parameter tensors.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// e.g. "fer" or "fsr".
    pub kind: String,
    pub config: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, ArrayD<f64>>,
}

fn w_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn w_u64<W: Write>(w: &mut W, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn w_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn r_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn r_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn r_str<R: Read>(r: &mut R) -> Result<String> {
    let len = r_u32(r).map_err(|e| Error::Checkpoint(format!("truncated string: {e}")))?;
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated string body: {e}")))?;
    String::from_utf8(buf).map_err(|e| Error::Checkpoint(format!("non-UTF-8 string: {e}")))
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let fail = |e: std::io::Error| Error::io(path, e);
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(fail)?);
        (|| -> std::io::Result<()> {
            w.write_all(MAGIC)?;
            w_u32(&mut w, VERSION)?;
            w_str(&mut w, &self.kind)?;
            w_u32(&mut w, self.config.len() as u32)?;
            for (k, v) in &self.config {
                w_str(&mut w, k)?;
                w_str(&mut w, v)?;
            }
            w_u32(&mut w, self.tensors.len() as u32)?;
            for (name, t) in &self.tensors {
                w_str(&mut w, name)?;
                w.write_all(&[DTYPE_F64])?;
                w_u32(&mut w, t.ndim() as u32)?;
                for &d in t.shape() {
                    w_u64(&mut w, d as u64)?;
                }
                for v in t.iter() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            w.flush()
        })()
        .map_err(fail)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let fail = |e: std::io::Error| Error::io(path, e);
        let mut r = std::io::BufReader::new(std::fs::File::open(path).map_err(fail)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(fail)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "{} is not a checkpoint (bad magic)",
                path.display()
            )));
        }
        let version = r_u32(&mut r).map_err(fail)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let kind = r_str(&mut r)?;
        let n_cfg = r_u32(&mut r).map_err(fail)?;
        let mut config = BTreeMap::new();
        for _ in 0..n_cfg {
            let k = r_str(&mut r)?;
            let v = r_str(&mut r)?;
            config.insert(k, v);
        }
        let n_tensors = r_u32(&mut r).map_err(fail)?;
        let mut tensors = BTreeMap::new();
        for _ in 0..n_tensors {
            let name = r_str(&mut r)?;
            let mut dtype = [0u8; 1];
            r.read_exact(&mut dtype).map_err(fail)?;
            if dtype[0] != DTYPE_F64 {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: unsupported dtype tag {}",
                    dtype[0]
                )));
            }
            let ndim = r_u32(&mut r).map_err(fail)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r_u64(&mut r).map_err(fail)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut buf)
                    .map_err(|e| Error::Checkpoint(format!("tensor {name} truncated: {e}")))?;
                data.push(f64::from_le_bytes(buf));
            }
            tensors.insert(
                name,
                ArrayD::from_shape_vec(IxDyn(&shape), data)
                    .expect("length matches shape by construction"),
            );
        }
        Ok(Checkpoint {
            kind,
            config,
            tensors,
        })
    }

    /// Error when the checkpoint holds a different kind of model.
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a '{kind}' checkpoint, found '{}'",
                self.kind
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "layer.weight".to_string(),
            ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.5, -2.0, 0.25, 1e-300, 3.7, -0.0])
                .unwrap(),
        );
        tensors.insert("layer.bias".to_string(), ArrayD::zeros(IxDyn(&[3])));
        let mut config = BTreeMap::new();
        config.insert("fer.embed_dim".to_string(), "128".to_string());
        let ck = Checkpoint {
            kind: "fer".into(),
            config,
            tensors,
        };
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.kind, "fer");
        assert_eq!(back.config.get("fer.embed_dim").unwrap(), "128");
        assert_eq!(back.tensors.len(), 2);
        assert_eq!(
            back.tensors["layer.weight"],
            ck.tensors["layer.weight"]
        );
        assert!(back.expect_kind("fer").is_ok());
        assert!(back.expect_kind("fsr").is_err());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxx").unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn save_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        let mut tensors = BTreeMap::new();
        tensors.insert("t".to_string(), ArrayD::from_elem(IxDyn(&[4]), 0.125));
        let ck = Checkpoint {
            kind: "fsr".into(),
            config: BTreeMap::new(),
            tensors,
        };
        ck.save(&a).unwrap();
        ck.save(&b).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
}
