//! Binary tensor tables.
//!
//! Layout: magic `CTSAE1\0`, `u32` version, `u64` entry count, then per
//! entry a `u16` name length and UTF-8 name, a `u8` dtype, a `u8` rank,
//! `rank` `u64` extents, the little-endian payload and a `u32` CRC-32 of
//! everything in the entry before it. All integers are little-endian.
//! Dtype 2 holds raw bytes, used for JSON metadata.

use std::fs;
use std::io::Write;
use std::path::Path;

use ctsae_tensor::{DType, Scalar, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 7] = b"CTSAE1\0";
pub const VERSION: u32 = 1;
const DTYPE_BYTES: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    Bytes(Vec<u8>),
}

impl Value {
    pub fn bitwise_eq(&self, other: &Value) -> bool {
        match (self, other) {
            (Value::F32(a), Value::F32(b)) => a.bitwise_eq(b),
            (Value::F64(a), Value::F64(b)) => a.bitwise_eq(b),
            (Value::Bytes(a), Value::Bytes(b)) => a == b,
            _ => false,
        }
    }
}

/// Ordered name-to-value table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub entries: Vec<(String, Value)>,
}

fn scalar_value<T: Scalar>(t: &Tensor<T>) -> Value {
    match T::DTYPE {
        DType::F32 => Value::F32(t.cast()),
        DType::F64 => Value::F64(t.cast()),
    }
}

fn encode_tensor<T: Scalar>(out: &mut Vec<u8>, code: u8, t: &Tensor<T>) {
    out.push(code);
    out.push(t.shape().len() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

impl Table {
    pub fn new() -> Self {
        Table::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Value) {
        self.entries.push((name.into(), value));
    }

    pub fn push_tensor<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.push(name, scalar_value(t));
    }

    pub fn push_f64(&mut self, name: impl Into<String>, v: f64) {
        self.push(name, Value::F64(Tensor::scalar(v)));
    }

    pub fn get(&self, name: &str) -> Option<&Value> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        match self.get(name) {
            Some(Value::F32(t)) => Ok(t.cast()),
            Some(Value::F64(t)) => Ok(t.cast()),
            Some(Value::Bytes(_)) => Err(Error::Data(format!("checkpoint entry {name} is not a tensor"))),
            None => Err(Error::Data(format!("checkpoint has no entry {name}"))),
        }
    }

    pub fn f64(&self, name: &str) -> Result<f64> {
        Ok(self.tensor::<f64>(name)?.data()[0])
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.get(name) {
            Some(Value::Bytes(b)) => Ok(b),
            _ => Err(Error::Data(format!("checkpoint has no byte entry {name}"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (name, value) in &self.entries {
            let mut e = Vec::new();
            e.extend_from_slice(&(name.len() as u16).to_le_bytes());
            e.extend_from_slice(name.as_bytes());
            match value {
                Value::F32(t) => encode_tensor(&mut e, DType::F32 as u8, t),
                Value::F64(t) => encode_tensor(&mut e, DType::F64 as u8, t),
                Value::Bytes(b) => {
                    e.push(DTYPE_BYTES);
                    e.push(1);
                    e.extend_from_slice(&(b.len() as u64).to_le_bytes());
                    e.extend_from_slice(b);
                }
            }
            let crc = crc32fast::hash(&e);
            out.extend_from_slice(&e);
            out.extend_from_slice(&crc.to_le_bytes());
        }
        out
    }

    /// Parses a table. `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        let magic = r.take(MAGIC.len())?;
        if magic != MAGIC {
            return Err(Error::format(path, format!("bad magic: found {magic:?}, expected {MAGIC:?}")));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version} (expected {VERSION})")));
        }
        let count = r.u64()?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let start = r.pos;
            let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::format(path, "entry name is not UTF-8"))?.to_string();
            let dtype = r.take(1)?[0];
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b)).ok_or_else(|| Error::format(path, "extent overflow"))?;
            let value = match dtype {
                DTYPE_BYTES => Value::Bytes(r.take(numel)?.to_vec()),
                code => match DType::from_code(code) {
                    Some(DType::F32) => Value::F32(decode(&mut r, shape, numel)?),
                    Some(DType::F64) => Value::F64(decode(&mut r, shape, numel)?),
                    None => return Err(Error::format(path, format!("entry {name}: unknown dtype {code}"))),
                },
            };
            let body = &bytes[start..r.pos];
            let stored = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
            if crc32fast::hash(body) != stored {
                return Err(Error::format(path, format!("checksum mismatch in entry {name}")));
            }
            entries.push((name, value));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Table { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // Write then rename, so a crash never leaves a half-written file.
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Table::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, format!("truncated at byte {}", self.bytes.len())))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode<T: Scalar>(r: &mut Reader<'_>, shape: Vec<usize>, numel: usize) -> Result<Tensor<T>> {
    let size = T::DTYPE.size_of();
    let raw = r.take(numel.checked_mul(size).ok_or_else(|| Error::format(r.path, "payload overflow"))?)?;
    let data = raw.chunks_exact(size).map(T::read_le).collect();
    Ok(Tensor::from_vec(shape, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Table {
        let mut t = Table::new();
        t.push_tensor("w", &Tensor::<f32>::from_vec([2, 2], vec![1.5, -0.0, f32::MIN_POSITIVE, 3.0]).unwrap());
        t.push_f64("step", 7.0);
        t.push("meta", Value::Bytes(b"{}".to_vec()));
        t
    }

    #[test]
    fn round_trip_is_bitwise() {
        let t = sample();
        let back = Table::from_bytes(&t.to_bytes(), Path::new("x")).unwrap();
        assert_eq!(back.entries.len(), 3);
        for ((n1, v1), (n2, v2)) in t.entries.iter().zip(&back.entries) {
            assert_eq!(n1, n2);
            assert!(v1.bitwise_eq(v2));
        }
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..7], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[7..11].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[11..19].try_into().unwrap()), 3);
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let mut bytes = sample().to_bytes();
        // A payload byte of the first entry.
        bytes[42] ^= 0x40;
        let err = Table::from_bytes(&bytes, Path::new("x")).unwrap_err().to_string();
        assert!(err.contains("checksum"), "{err}");
    }

    #[test]
    fn newer_version_is_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[7..11].copy_from_slice(&2u32.to_le_bytes());
        let err = Table::from_bytes(&bytes, Path::new("x")).unwrap_err().to_string();
        assert!(err.contains("version 2") && err.contains("expected 1"), "{err}");
    }

    #[test]
    fn truncation_is_rejected() {
        let bytes = sample().to_bytes();
        for cut in [3, 15, bytes.len() - 1] {
            assert!(Table::from_bytes(&bytes[..cut], Path::new("x")).is_err());
        }
    }
}
