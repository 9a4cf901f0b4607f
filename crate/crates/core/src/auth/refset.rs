//! `EKRS` reference sets: magic, u16 version, u32 user-id length, user id
//! (UTF-8), u64 creation time, u32 d, u32 count, then `count` pairs of
//! `d` whisper and `d` ultrasonic little-endian f64 values.

use std::fs;
use std::path::Path;

use crate::error::{config, Error, Result};

const MAGIC: &[u8; 4] = b"EKRS";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    pub user_id: String,
    /// Seconds since the Unix epoch, supplied by the caller.
    pub created_at: u64,
    pub pairs: Vec<(Vec<f64>, Vec<f64>)>,
}

impl ReferenceSet {
    pub fn new(user_id: &str, created_at: u64, pairs: Vec<(Vec<f64>, Vec<f64>)>) -> Result<Self> {
        if pairs.is_empty() {
            return config("reference set needs at least one pair");
        }
        let d = pairs[0].0.len();
        for (w, u) in &pairs {
            if d == 0 || w.len() != d || u.len() != d {
                return Err(Error::Shape(format!(
                    "reference vectors must all have dimension {d} > 0"
                )));
            }
            for v in [w, u] {
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite("reference vector"));
                }
                if v.iter().all(|x| *x == 0.0) {
                    return Err(Error::ZeroNorm("reference vector"));
                }
            }
        }
        Ok(Self {
            user_id: user_id.to_string(),
            created_at,
            pairs,
        })
    }

    pub fn dim(&self) -> usize {
        self.pairs[0].0.len()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.user_id.len() as u32).to_le_bytes());
        out.extend_from_slice(self.user_id.as_bytes());
        out.extend_from_slice(&self.created_at.to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for (w, u) in &self.pairs {
            for v in w.iter().chain(u) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not an EKRS reference set".into()));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported reference-set version {version}"
            )));
        }
        let id_len = u32::from_le_bytes(r.array()?) as usize;
        let user_id = String::from_utf8(r.take(id_len)?.to_vec())
            .map_err(|_| Error::Format("user id is not UTF-8".into()))?;
        let created_at = u64::from_le_bytes(r.array()?);
        let d = u32::from_le_bytes(r.array()?) as usize;
        let count = u32::from_le_bytes(r.array()?) as usize;
        let mut pairs = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let w = r.f64s(d)?;
            let u = r.f64s(d)?;
            pairs.push((w, u));
        }
        if !r.buf.is_empty() {
            return Err(Error::Format("trailing bytes after reference set".into()));
        }
        Self::new(&user_id, created_at, pairs)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Format("truncated reference set".into()));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format("size overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let refs = ReferenceSet::new(
            "user07",
            1_700_000_000,
            vec![
                (vec![1.0, -2.0], vec![0.5, 0.25]),
                (vec![3.0, 0.0], vec![0.0, 1.0]),
            ],
        )
        .unwrap();
        let bytes = refs.to_bytes();
        assert_eq!(ReferenceSet::from_bytes(&bytes).unwrap(), refs);
        assert!(ReferenceSet::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(ReferenceSet::from_bytes(&extra).is_err());
        let mut bad = bytes;
        bad[3] = b'X';
        assert!(matches!(
            ReferenceSet::from_bytes(&bad),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn validation() {
        assert!(ReferenceSet::new("u", 0, vec![]).is_err());
        assert!(ReferenceSet::new("u", 0, vec![(vec![0.0], vec![1.0])]).is_err());
        assert!(ReferenceSet::new("u", 0, vec![(vec![1.0], vec![1.0, 2.0])]).is_err());
    }
}
