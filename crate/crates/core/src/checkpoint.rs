//! Self-checking binary container for parameters and training state.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "M3DCKPT\0" | version u32 | config hash u64 | record count u32
//! record*: name len u32, name utf-8, dtype u8, rank u32, dims u64*, payload len u64, payload
//! crc32 of everything above, u32
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"M3DCKPT\0";
pub const VERSION: u32 = 1;
const U64_TAG: u8 = 8;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
}

impl Payload {
    fn tag(&self) -> u8 {
        match self {
            Payload::F32(_) => DType::F32 as u8,
            Payload::F64(_) => DType::F64 as u8,
            Payload::U64(_) => U64_TAG,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::U64(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub shape: Vec<usize>,
    pub payload: Payload,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub records: BTreeMap<String, Record>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| corrupt("truncated checkpoint"))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| corrupt("length overflow"))
    }
}

impl Checkpoint {
    pub fn new(config_hash: u64) -> Self {
        Self { config_hash, records: BTreeMap::new() }
    }

    pub fn put_tensor<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) {
        let payload = match T::DTYPE {
            DType::F32 => Payload::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
            DType::F64 => Payload::F64(t.data().iter().map(|v| v.as_f64()).collect()),
        };
        self.records.insert(name.to_string(), Record { shape: t.shape().to_vec(), payload });
    }

    pub fn put_u64s(&mut self, name: &str, values: &[u64]) {
        self.records.insert(name.to_string(), Record { shape: vec![values.len()], payload: Payload::U64(values.to_vec()) });
    }

    fn record(&self, name: &str) -> Result<&Record> {
        self.records.get(name).ok_or_else(|| corrupt(format!("missing record {name:?}")))
    }

    /// Reads a tensor stored at the same precision as `T`.
    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let r = self.record(name)?;
        let data: Vec<T> = match (&r.payload, T::DTYPE) {
            (Payload::F32(v), DType::F32) => v.iter().map(|&x| T::of(x as f64)).collect(),
            (Payload::F64(v), DType::F64) => v.iter().map(|&x| T::of(x)).collect(),
            _ => return Err(corrupt(format!("record {name:?} has dtype tag {}, wanted {:?}", r.payload.tag(), T::DTYPE))),
        };
        Tensor::new(r.shape.clone(), data).map_err(|e| corrupt(format!("record {name:?}: {e}")))
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match &self.record(name)?.payload {
            Payload::U64(v) => Ok(v),
            _ => Err(corrupt(format!("record {name:?} is not an integer record"))),
        }
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        match self.u64s(name)? {
            [v] => Ok(*v),
            v => Err(corrupt(format!("record {name:?} has {} values", v.len()))),
        }
    }

    /// All tensors under `prefix`, keyed by the rest of their names.
    pub fn tensors_with_prefix<T: Scalar>(&self, prefix: &str) -> Result<BTreeMap<String, Tensor<T>>> {
        self.records
            .keys()
            .filter_map(|k| k.strip_prefix(prefix).map(|rest| (k, rest)))
            .map(|(k, rest)| Ok((rest.to_string(), self.tensor(k)?)))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, r) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(r.payload.tag());
            out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
            for &d in &r.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            let mut payload = Vec::new();
            match &r.payload {
                Payload::F32(v) => v.iter().for_each(|x| x.write_le(&mut payload)),
                Payload::F64(v) => v.iter().for_each(|x| x.write_le(&mut payload)),
                Payload::U64(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
            }
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&payload);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses and verifies a checkpoint. With `expected_hash`, a file written
    /// for a different architecture is refused.
    pub fn from_bytes(bytes: &[u8], expected_hash: Option<u64>) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 8 + 4 + 4 {
            return Err(corrupt("file too short"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { bytes: body, at: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(corrupt(format!("format version {version}, expected {VERSION}")));
        }
        let config_hash = r.u64()?;
        if let Some(h) = expected_hash {
            if h != config_hash {
                return Err(corrupt(format!("config hash {config_hash:016x} does not match {h:016x}")));
            }
        }
        let count = r.u32()?;
        let mut ck = Self::new(config_hash);
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| corrupt("record name is not utf-8"))?;
            let tag = r.u8()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let bytes = r.len()?;
            let data = r.take(bytes)?;
            let payload = match tag {
                t if t == DType::F32 as u8 && bytes == numel * 4 => Payload::F32(data.chunks_exact(4).map(f32::read_le).collect()),
                t if t == DType::F64 as u8 && bytes == numel * 8 => Payload::F64(data.chunks_exact(8).map(f64::read_le).collect()),
                U64_TAG if bytes == numel * 8 => Payload::U64(data.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()),
                _ => return Err(corrupt(format!("record {name:?}: bad dtype {tag} or payload size {bytes}"))),
            };
            debug_assert_eq!(payload.len(), numel);
            ck.records.insert(name, Record { shape, payload });
        }
        if r.at != body.len() {
            return Err(corrupt("trailing bytes after records"));
        }
        Ok(ck)
    }

    /// Writes through a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path, expected_hash: Option<u64>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, expected_hash)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(0xfeed);
        c.put_tensor("w", &Tensor::<f32>::from_fn([2, 3], |i| i as f32 * 0.1 - 0.2));
        c.put_tensor("v", &Tensor::<f64>::from_fn([4], |i| (i as f64).sqrt()));
        c.put_u64s("step", &[42]);
        c
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Some(0xfeed)).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.tensor::<f32>("w").unwrap(), Tensor::<f32>::from_fn([2, 3], |i| i as f32 * 0.1 - 0.2));
        assert_eq!(back.u64("step").unwrap(), 42);
        assert!(back.tensor::<f64>("w").is_err());
    }

    #[test]
    fn refuses_wrong_hash_version_and_corruption() {
        let bytes = sample().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes, Some(1)), Err(Error::Checkpoint(_))));
        let mut flipped = bytes.clone();
        flipped[30] ^= 1;
        assert!(Checkpoint::from_bytes(&flipped, None).is_err());
        let mut versioned = bytes[..bytes.len() - 4].to_vec();
        versioned[8] = 9;
        let crc = crc32fast::hash(&versioned);
        versioned.extend_from_slice(&crc.to_le_bytes());
        let err = Checkpoint::from_bytes(&versioned, None).unwrap_err();
        assert!(err.to_string().contains("version"));
        assert!(Checkpoint::from_bytes(&bytes[..10], None).is_err());
    }

    #[test]
    fn save_and_load_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        sample().save(&p).unwrap();
        let c = Checkpoint::load(&p, Some(0xfeed)).unwrap();
        c.save(&dir.path().join("b.ckpt")).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(dir.path().join("b.ckpt")).unwrap());
    }
}
