//! The `TNSR` container: a small little-endian binary format for named f32
//! arrays (weights, feature dumps, transmission maps).
//!
//! Layout:
//! - bytes 0..4: magic `TNSR`
//! - u32 version (currently 1)
//! - u32 entry count
//! - per entry: u16 name length, UTF-8 name, u8 ndim, ndim x u32 dims,
//!   u8 dtype (0 = f32 little-endian), then the row-major payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"TNSR";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// One named array inside a container.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl Entry {
    pub fn new(name: impl Into<String>, dims: Vec<u32>, data: Vec<f32>) -> Result<Self> {
        let expect: usize = dims.iter().map(|&d| d as usize).product();
        if expect != data.len() {
            return Err(Error::shape(format!(
                "entry data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        Ok(Entry {
            name: name.into(),
            dims,
            data,
        })
    }

    pub fn from_tensor(name: impl Into<String>, t: &Tensor) -> Entry {
        Entry {
            name: name.into(),
            dims: t.dims().iter().map(|&d| d as u32).collect(),
            data: t.data().to_vec(),
        }
    }

    pub fn from_values(name: impl Into<String>, values: &[f32]) -> Entry {
        Entry {
            name: name.into(),
            dims: vec![values.len() as u32],
            data: values.to_vec(),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        if self.dims.len() != 4 {
            return Err(Error::shape(format!(
                "entry '{}' has {} dims, expected 4",
                self.name,
                self.dims.len()
            )));
        }
        let dims = [
            self.dims[0] as usize,
            self.dims[1] as usize,
            self.dims[2] as usize,
            self.dims[3] as usize,
        ];
        Tensor::from_vec(dims, self.data.clone())
    }
}

/// Serialize entries to the container byte image.
pub fn encode(entries: &[Entry]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        let name = e.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(e.dims.len() as u8);
        for &d in &e.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.push(DTYPE_F32);
        for &v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::format("TNSR", "truncated container"));
        }
        let slice = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parse a container byte image.
pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>> {
    let mut cur = Cursor { bytes, at: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::format("TNSR", "bad magic"));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::format(
            "TNSR",
            format!("unsupported version {version}"),
        ));
    }
    let count = cur.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::format("TNSR", "entry name is not UTF-8"))?
            .to_string();
        let ndim = cur.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(cur.u32()?);
        }
        let dtype = cur.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::format("TNSR", format!("unknown dtype {dtype}")));
        }
        let numel: usize = dims.iter().map(|&d| d as usize).product();
        let payload = cur.take(numel * 4)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        entries.push(Entry { name, dims, data });
    }
    if cur.at != bytes.len() {
        return Err(Error::format("TNSR", "trailing bytes after last entry"));
    }
    Ok(entries)
}

pub fn write(path: impl AsRef<Path>, entries: &[Entry]) -> Result<()> {
    fs::write(path, encode(entries))?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<Vec<Entry>> {
    decode(&fs::read(path)?)
}

/// Look up one entry by name.
pub fn find<'a>(entries: &'a [Entry], name: &str) -> Result<&'a Entry> {
    entries
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::format("TNSR", format!("missing entry '{name}'")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let entries = vec![
            Entry::new("a.weight", vec![2, 1, 3, 3], vec![0.5; 18]).unwrap(),
            Entry::new("a.bias", vec![2], vec![-0.25, 0.75]).unwrap(),
            Entry::new("t", vec![4, 5], (0..20).map(|i| i as f32 / 19.0).collect()).unwrap(),
        ];
        let bytes = encode(&entries);
        let back = decode(&bytes).unwrap();
        assert_eq!(back, entries);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn rejects_malformed_containers() {
        assert!(decode(b"NOPE").is_err());
        let mut bytes = encode(&[Entry::from_values("x", &[1.0, 2.0])]);
        bytes.truncate(bytes.len() - 1);
        assert!(matches!(
            decode(&bytes),
            Err(Error::Format { format: "TNSR", .. })
        ));
        let mut versioned = encode(&[]);
        versioned[4] = 9;
        assert!(decode(&versioned).is_err());
    }

    #[test]
    fn tensor_round_trip() {
        let t = Tensor::from_vec([1, 2, 2, 2], (0..8).map(|i| i as f32).collect()).unwrap();
        let e = Entry::from_tensor("feat", &t);
        assert_eq!(e.to_tensor().unwrap(), t);
        assert!(Entry::from_values("v", &[1.0]).to_tensor().is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.tnsr");
        let entries = vec![Entry::from_values("bias", &[1.0, -2.0, 3.5])];
        write(&path, &entries).unwrap();
        assert_eq!(read(&path).unwrap(), entries);
    }
}
