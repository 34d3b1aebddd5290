//! Binary checkpoint container.
//!
//! Layout, all integers little endian:
//!
//! ```text
//! magic    b"SFDH"
//! version  u32
//! arch     str            (u32 byte length + UTF-8)
//! seed     u64
//! step     u64
//! meta     u32 count, then count x (str key, str value)
//! tensors  u32 count, then count x (str name, u32 rank, rank x u32 dim, f32 data)
//! ```
//!
//! Tensors are written in sorted name order, so equal contents give equal bytes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SFDH";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: String,
    pub seed: u64,
    pub step: u64,
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(arch: impl Into<String>, seed: u64, step: u64) -> Self {
        Self {
            arch: arch.into(),
            seed,
            step,
            metadata: BTreeMap::new(),
            tensors: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, &self.arch);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        put_len(&mut out, self.metadata.len());
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        put_len(&mut out, self.tensors.len());
        for (name, t) in &self.tensors {
            if let Some(i) = t.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::Checkpoint(format!(
                    "refusing to save non-finite value {} at index {i} of parameter {name}",
                    t.data()[i]
                )));
            }
            put_str(&mut out, name);
            put_len(&mut out, t.dims().len());
            for &d in t.dims() {
                put_len(&mut out, d);
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let arch = r.string("architecture id")?;
        let seed = r.u64("seed")?;
        let step = r.u64("step")?;
        let mut metadata = BTreeMap::new();
        for _ in 0..r.u32("metadata count")? {
            let k = r.string("metadata key")?;
            let v = r.string("metadata value")?;
            metadata.insert(k, v);
        }
        let mut tensors = BTreeMap::new();
        let count = r.u32("tensor count")?;
        let mut prev: Option<String> = None;
        for i in 0..count {
            let name = r.string(&format!("name of tensor #{i}"))?;
            if name.is_empty() {
                return Err(Error::Checkpoint(format!("tensor #{i} has an empty name")));
            }
            if prev.as_ref().is_some_and(|p| *p >= name) {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} is duplicated or out of order"
                )));
            }
            let rank = r.u32(&format!("rank of {name}"))? as usize;
            let mut dims = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                dims.push(r.u32(&format!("dims of {name}"))? as usize);
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| {
                    Error::Checkpoint(format!("tensor {name}: dims {dims:?} exceed the file"))
                })?;
            let raw = r.take(numel * 4, &name)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} holds non-finite values"
                )));
            }
            tensors.insert(name.clone(), Tensor::new(dims, data)?);
            prev = Some(name);
        }
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last tensor",
                r.remaining()
            )));
        }
        Ok(Self {
            arch,
            seed,
            step,
            metadata,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Fails unless the architecture id matches.
    pub fn expect_arch(&self, arch: &str) -> Result<()> {
        if self.arch != arch {
            return Err(Error::Checkpoint(format!(
                "architecture mismatch: checkpoint holds {:?}, expected {arch:?}",
                self.arch
            )));
        }
        Ok(())
    }

    /// Checks that exactly the `expected` names are present with the given dims.
    pub fn expect_tensors<'a>(
        &self,
        expected: impl IntoIterator<Item = (&'a str, &'a [usize])>,
    ) -> Result<()> {
        let expected: BTreeMap<&str, &[usize]> = expected.into_iter().collect();
        let missing: Vec<&str> = expected
            .keys()
            .copied()
            .filter(|k| !self.tensors.contains_key(*k))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!(
                "missing tensors: {}",
                missing.join(", ")
            )));
        }
        for (name, t) in &self.tensors {
            match expected.get(name.as_str()) {
                None => return Err(Error::Checkpoint(format!("unexpected tensor {name}"))),
                Some(d) if *d != t.dims() => {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name} has dims {:?}, expected {d:?}",
                        t.dims()
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

fn put_len(out: &mut Vec<u8>, n: usize) {
    out.extend_from_slice(&u32::try_from(n).expect("extent fits u32").to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_len(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what}: need {n} bytes, {} left",
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new("toy", 7, 42);
        c.metadata.insert("note".into(), "x".into());
        c.tensors.insert(
            "w".into(),
            Tensor::from_fn([2, 3], |i| i as f32 * 0.25 - 0.1),
        );
        c.tensors.insert("b".into(), Tensor::full([2], -0.0));
        c
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(back.tensors["b"].data()[0].is_sign_negative());
    }

    #[test]
    fn nan_is_refused_with_name() {
        let mut c = sample();
        c.tensors.get_mut("w").unwrap().data_mut()[4] = f32::NAN;
        let err = c.to_bytes().unwrap_err().to_string();
        assert!(err.contains("parameter w"), "{err}");
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut ver = bytes;
        ver[4] = 9;
        assert!(Checkpoint::from_bytes(&ver)
            .unwrap_err()
            .to_string()
            .contains("version"));
    }

    #[test]
    fn truncation_names_the_tensor() {
        let bytes = sample().to_bytes().unwrap();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 1])
            .unwrap_err()
            .to_string();
        assert!(err.contains('w'), "{err}");
    }

    #[test]
    fn expected_tensor_listing() {
        let c = sample();
        let err = c
            .expect_tensors([("w", &[2usize, 3][..]), ("b", &[2][..]), ("z", &[1][..])])
            .unwrap_err()
            .to_string();
        assert!(err.contains("missing tensors: z"), "{err}");
        c.expect_tensors([("w", &[2usize, 3][..]), ("b", &[2][..])])
            .unwrap();
        assert!(c.expect_arch("other").is_err());
    }
}
