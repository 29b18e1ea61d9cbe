//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "MFGE"
//! version    u32
//! config     u64      hash of the run configuration
//! epoch      u64      completed epochs
//! tensors    u32 count, then per tensor:
//!              name_len u32, name (UTF-8), rank u32, dims u64 × rank,
//!              data f32 × product(dims)
//! optimizer  u32 count, then per blob:
//!              name_len u32, name, step u64, tensors as above
//! ```
//!
//! Floats are stored as raw bits, so a load of a save is bit-identical,
//! NaN payloads included.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{CliError, Result};

pub const MAGIC: [u8; 4] = *b"MFGE";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.shape == other.shape
            && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Optimizer state of one parameter group.
#[derive(Clone, Debug)]
pub struct OptimizerBlob {
    pub name: String,
    pub step: u64,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: u64,
    pub epoch: u64,
    pub tensors: Vec<NamedTensor>,
    pub optimizer: Vec<OptimizerBlob>,
}

fn all_bit_eq(a: &[NamedTensor], b: &[NamedTensor]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.bit_eq(y))
}

impl Checkpoint {
    pub fn new(config_hash: u64, epoch: u64) -> Self {
        Self { version: VERSION, config_hash, epoch, tensors: Vec::new(), optimizer: Vec::new() }
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.version == other.version
            && self.config_hash == other.config_hash
            && self.epoch == other.epoch
            && all_bit_eq(&self.tensors, &other.tensors)
            && self.optimizer.len() == other.optimizer.len()
            && self
                .optimizer
                .iter()
                .zip(&other.optimizer)
                .all(|(a, b)| a.name == b.name && a.step == b.step && all_bit_eq(&a.tensors, &b.tensors))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        write_tensors(&mut out, &self.tensors);
        out.extend_from_slice(&len_u32(self.optimizer.len()).to_le_bytes());
        for blob in &self.optimizer {
            write_name(&mut out, &blob.name);
            out.extend_from_slice(&blob.step.to_le_bytes());
            write_tensors(&mut out, &blob.tensors);
        }
        out
    }

    /// Parses a checkpoint; `origin` only labels errors.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(r.fail(format!("not a checkpoint: expected magic `MFGE`, found {:?}", String::from_utf8_lossy(magic))));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.fail(format!("unsupported checkpoint version {version}, expected {VERSION}")));
        }
        let config_hash = r.u64("config hash")?;
        let epoch = r.u64("epoch")?;
        let tensors = r.tensors()?;
        let n_blobs = r.u32("optimizer count")?;
        let mut optimizer = Vec::new();
        for _ in 0..n_blobs {
            let name = r.name()?;
            let step = r.u64("optimizer step")?;
            let tensors = r.tensors()?;
            optimizer.push(OptimizerBlob { name, step, tensors });
        }
        if r.pos != bytes.len() {
            return Err(r.fail(format!("{} unexpected trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { version, config_hash, epoch, tensors, optimizer })
    }

    /// Writes through a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| CliError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Refuses a checkpoint written under a different configuration unless `force` is set.
    pub fn check_config(&self, expected: u64, force: bool, path: &Path) -> Result<()> {
        if self.config_hash != expected {
            if !force {
                return Err(CliError::ConfigMismatch { path: path.into(), expected, found: self.config_hash });
            }
            log::warn!("{}: configuration hash differs, loading anyway", path.display());
        }
        Ok(())
    }
}

fn len_u32(n: usize) -> u32 {
    u32::try_from(n).expect("count fits in u32")
}

fn write_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&len_u32(name.len()).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

fn write_tensors(out: &mut Vec<u8>, tensors: &[NamedTensor]) {
    out.extend_from_slice(&len_u32(tensors.len()).to_le_bytes());
    for t in tensors {
        write_name(out, &t.name);
        out.extend_from_slice(&len_u32(t.shape.len()).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: String) -> CliError {
        CliError::Checkpoint { path: PathBuf::from(self.origin), msg }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.fail(format!("truncated while reading {what} at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u32("name length")? as usize;
        let raw = self.take(len, "name")?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.fail(format!("name at byte {} is not UTF-8", self.pos - len)))
    }

    fn tensors(&mut self) -> Result<Vec<NamedTensor>> {
        let n = self.u32("tensor count")?;
        let mut out = Vec::new();
        for _ in 0..n {
            let name = self.name()?;
            let rank = self.u32("rank")?;
            let mut shape = Vec::new();
            for _ in 0..rank {
                let d = self.u64("dimension")?;
                shape.push(usize::try_from(d).map_err(|_| self.fail(format!("dimension {d} of `{name}` is too large")))?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| self.fail(format!("shape {shape:?} of `{name}` overflows")))?;
            let raw = self.take(numel, "tensor data")?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            out.push(NamedTensor { name, shape, data });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(0xdead_beef_0123_4567, 7);
        c.tensors.push(NamedTensor { name: "encoder/w".into(), shape: vec![2, 3], data: vec![1.0, -0.0, f32::NAN, 3.5, 1e-40, -7.25] });
        c.tensors.push(NamedTensor { name: "scalar".into(), shape: vec![], data: vec![0.5] });
        c.optimizer.push(OptimizerBlob {
            name: "encoder".into(),
            step: 12,
            tensors: vec![NamedTensor { name: "m/w".into(), shape: vec![0], data: vec![] }],
        });
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert!(c.bit_eq(&back));
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"MFGE");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 0xdead_beef_0123_4567);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 7);
    }

    #[test]
    fn corrupt_magic_names_the_expected_one() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        let err = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap_err().to_string();
        assert!(err.contains("MFGE"), "{err}");
    }

    #[test]
    fn truncation_and_version_are_detected() {
        let bytes = sample().to_bytes();
        for cut in [3, 10, 30, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut], Path::new("mem")).unwrap_err().to_string();
            assert!(err.contains("truncated"), "{cut}: {err}");
        }
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(Checkpoint::from_bytes(&v2, Path::new("mem")).unwrap_err().to_string().contains("version"));
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra, Path::new("mem")).is_err());
    }

    #[test]
    fn config_mismatch_needs_force() {
        let c = sample();
        assert!(c.check_config(1, false, Path::new("x")).is_err());
        assert!(c.check_config(1, true, Path::new("x")).is_ok());
        assert!(c.check_config(c.config_hash, false, Path::new("x")).is_ok());
    }
}
