//! Self-describing binary checkpoints: a text header plus named `f64` blobs,
//! sealed with a SHA-256 digest.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io;
use crate::nn::Tensor;

const MAGIC: &[u8; 8] = b"CAPITCK\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: String,
    pub blobs: Vec<(String, Tensor)>,
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u64(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Integrity("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| Error::Integrity(format!("checkpoint length field {v} is implausible")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Integrity("checkpoint text is not UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.header);
        put_u64(&mut out, self.blobs.len() as u64);
        for (name, t) in &self.blobs {
            put_str(&mut out, name);
            put_u64(&mut out, t.shape().len() as u64);
            for &d in t.shape() {
                put_u64(&mut out, d as u64);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Integrity("not a checkpoint file".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Integrity("checkpoint digest mismatch".into()));
        }
        let mut r = Reader {
            bytes: body,
            pos: MAGIC.len(),
        };
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Integrity(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let header = r.string()?;
        let n = r.len()?;
        let mut blobs = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.string()?;
            let ndim = r.len()?;
            let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let count = shape.iter().product::<usize>();
            let raw = r.take(
                count
                    .checked_mul(8)
                    .ok_or_else(|| Error::Integrity("blob too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            blobs.push((
                name,
                Tensor::from_vec(&shape, data).map_err(|e| Error::Integrity(e.to_string()))?,
            ));
        }
        if r.pos != body.len() {
            return Err(Error::Integrity(
                "trailing bytes after checkpoint blobs".into(),
            ));
        }
        Ok(Checkpoint { header, blobs })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        io::ensure_parent(path)?;
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Integrity(m) => Error::Integrity(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Remove and return every blob whose name starts with `prefix`, in order.
    pub fn take_prefixed(&mut self, prefix: &str) -> Vec<(String, Tensor)> {
        let (hit, keep) = std::mem::take(&mut self.blobs)
            .into_iter()
            .partition(|(n, _)| n.starts_with(prefix));
        self.blobs = keep;
        hit
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            header: "epoch = 3\n".into(),
            blobs: vec![
                (
                    "g.w".into(),
                    Tensor::from_vec(&[2, 2], vec![1.0, -2.5, 3.0, 1e-300]).unwrap(),
                ),
                ("d.b".into(), Tensor::from_vec(&[1], vec![0.125]).unwrap()),
            ],
        }
    }

    #[test]
    fn round_trip_is_lossless() {
        let c = sample();
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
    }

    #[test]
    fn any_flipped_byte_is_detected() {
        let bytes = sample().to_bytes();
        for k in [0, 9, 20, bytes.len() / 2, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[k] ^= 0x40;
            assert!(
                matches!(Checkpoint::from_bytes(&bad), Err(Error::Integrity(_))),
                "byte {k}"
            );
        }
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 5]),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn take_prefixed_partitions() {
        let mut c = sample();
        let g = c.take_prefixed("g.");
        assert_eq!(g.len(), 1);
        assert_eq!(c.blobs.len(), 1);
    }
}
