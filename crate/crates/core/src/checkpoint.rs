//! Versioned binary checkpoints shared by every trained model.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "DEBIASCK"
//! version    u32      currently 1
//! kind       u32 length + UTF-8 bytes   ("transformer-lm", "judge", "debias-head")
//! header     u32 length + UTF-8 JSON    (model hyperparameters)
//! blocks     u32 count, then per block:
//!              u32 length + UTF-8 name
//!              u32 rank, rank x u64 dims
//!              prod(dims) x f64 values
//! ```
//!
//! Blocks appear in the order documented by each model's `named_tensors`.

use std::path::Path;

use autodiff::Tensor;

use crate::{DebiasError, Result};

pub const MAGIC: &[u8; 8] = b"DEBIASCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub header: serde_json::Value,
    pub blocks: Vec<(String, Tensor)>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(DebiasError::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| DebiasError::Checkpoint("invalid UTF-8 in checkpoint".into()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        put_str(&mut out, &self.header.to_string());
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for (name, t) in &self.blocks {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(DebiasError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(DebiasError::Checkpoint(format!("unsupported version {version}")));
        }
        let kind = r.string()?;
        let header = serde_json::from_str(&r.string()?)
            .map_err(|e| DebiasError::Checkpoint(format!("bad header: {e}")))?;
        let count = r.u32()? as usize;
        let mut blocks = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            blocks.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != buf.len() {
            return Err(DebiasError::Checkpoint("trailing bytes after last block".into()));
        }
        Ok(Self { kind, header, blocks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| DebiasError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| DebiasError::io(path, e))?;
        Self::from_bytes(&buf)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(DebiasError::Checkpoint(format!(
                "expected a `{kind}` checkpoint, found `{}`",
                self.kind
            )));
        }
        Ok(())
    }

    /// Takes the next block, checking its name and shape.
    pub fn take_blocks(self, expected: &[(String, Vec<usize>)]) -> Result<Vec<Tensor>> {
        if self.blocks.len() != expected.len() {
            return Err(DebiasError::Checkpoint(format!(
                "expected {} blocks, found {}",
                expected.len(),
                self.blocks.len()
            )));
        }
        self.blocks
            .into_iter()
            .zip(expected)
            .map(|((name, t), (want, shape))| {
                if &name != want || t.shape() != shape.as_slice() {
                    Err(DebiasError::Checkpoint(format!(
                        "block `{name}` {:?} does not match `{want}` {shape:?}",
                        t.shape()
                    )))
                } else {
                    Ok(t)
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip_and_corruption() {
        let ck = Checkpoint {
            kind: "judge".into(),
            header: serde_json::json!({"width": 4}),
            blocks: vec![
                ("a".into(), Tensor::matrix(2, 2, vec![1.0, -2.5, 3.0, 1e-300]).unwrap()),
                ("b".into(), Tensor::vector(vec![0.5])),
            ],
        };
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }
}
