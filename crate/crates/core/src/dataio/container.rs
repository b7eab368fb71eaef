//! Binary tensor container used for checkpoints and sampled grids.
//!
//! Layout (little-endian):
//!
//! ```text
//! u8   version
//! u32  record count
//! per record:
//!   u32   name length, then UTF-8 name
//!   u8    dtype (0 = f32, 1 = f64, 2 = raw bytes)
//!   u32   rank, then rank × u64 extents
//!   data  product(extents) elements
//! ```
//!
//! Raw-byte records have rank 1 and hold configs as JSON or binary state.

use std::fs;
use std::io::Write;
use std::path::Path;

use holovox_tensor::Tensor;

use crate::error::{io_err, Error, Result};

pub const FORMAT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum RecordData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    Bytes(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub records: Vec<(String, RecordData)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, data: RecordData) {
        self.records.push((name.into(), data));
    }

    pub fn get(&self, name: &str) -> Option<&RecordData> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, d)| d)
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.get(name) {
            Some(RecordData::Bytes(b)) => Ok(b),
            Some(_) => Err(Error::Malformed(format!("record {name} is not a byte record"))),
            None => Err(Error::Malformed(format!("missing record {name}"))),
        }
    }

    pub fn f32(&self, name: &str) -> Result<&Tensor<f32>> {
        match self.get(name) {
            Some(RecordData::F32(t)) => Ok(t),
            Some(_) => Err(Error::Malformed(format!("record {name} is not f32"))),
            None => Err(Error::Malformed(format!("missing record {name}"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![FORMAT_VERSION];
        out.extend((self.records.len() as u32).to_le_bytes());
        for (name, data) in &self.records {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            let (code, shape): (u8, Vec<usize>) = match data {
                RecordData::F32(t) => (0, t.shape().to_vec()),
                RecordData::F64(t) => (1, t.shape().to_vec()),
                RecordData::Bytes(b) => (2, vec![b.len()]),
            };
            out.push(code);
            out.extend((shape.len() as u32).to_le_bytes());
            for d in shape {
                out.extend((d as u64).to_le_bytes());
            }
            match data {
                RecordData::F32(t) => t.data().iter().for_each(|v| out.extend(v.to_le_bytes())),
                RecordData::F64(t) => t.data().iter().for_each(|v| out.extend(v.to_le_bytes())),
                RecordData::Bytes(b) => out.extend(b),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let version = r.take(1)?[0];
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Malformed("record name is not UTF-8".into()))?;
            let code = r.take(1)?[0];
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::Malformed(format!("record {name}: rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Malformed("extent overflow".into()))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Malformed(format!("record {name}: size overflow")))?;
            let data = match code {
                0 => {
                    let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Malformed("size overflow".into()))?)?;
                    let v = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    RecordData::F32(Tensor::new(shape, v)?)
                }
                1 => {
                    let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Malformed("size overflow".into()))?)?;
                    let v = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    RecordData::F64(Tensor::new(shape, v)?)
                }
                2 if rank == 1 => RecordData::Bytes(r.take(n)?.to_vec()),
                _ => return Err(Error::Malformed(format!("record {name}: unknown dtype {code}"))),
            };
            records.push((name, data));
        }
        if r.pos != bytes.len() {
            return Err(Error::Malformed("trailing bytes after last record".into()));
        }
        Ok(Self { records })
    }

    /// Writes to a temporary sibling, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file_name = path
            .file_name()
            .ok_or_else(|| Error::Input(format!("{} is not a file path", path.display())))?;
        let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
        {
            let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
            f.write_all(&self.to_bytes()).map_err(io_err(&tmp))?;
            f.sync_all().map_err(io_err(&tmp))?;
        }
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Malformed("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_version_check() {
        let mut c = Container::new();
        c.push("a", RecordData::F32(Tensor::new([2, 1], vec![1.5f32, -0.0]).unwrap()));
        c.push("b", RecordData::F64(Tensor::new([1], vec![f64::MIN_POSITIVE]).unwrap()));
        c.push("c", RecordData::Bytes(b"{}".to_vec()));
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back, c);
        let mut future = bytes.clone();
        future[0] = FORMAT_VERSION + 1;
        assert!(matches!(Container::from_bytes(&future), Err(Error::Version { .. })));
        assert!(matches!(
            Container::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Malformed(_))
        ));
    }

    #[test]
    fn documented_byte_layout() {
        let mut c = Container::new();
        c.push("g", RecordData::F32(Tensor::new([1, 2], vec![0.5f32, -2.0]).unwrap()));
        let expected: Vec<u8> = [
            &[0x01][..],
            &[0x01, 0x00, 0x00, 0x00],
            &[0x01, 0x00, 0x00, 0x00, b'g'],
            &[0x00],
            &[0x02, 0x00, 0x00, 0x00],
            &[0x01, 0, 0, 0, 0, 0, 0, 0],
            &[0x02, 0, 0, 0, 0, 0, 0, 0],
            &[0x00, 0x00, 0x00, 0x3f, 0x00, 0x00, 0x00, 0xc0],
        ]
        .concat();
        assert_eq!(c.to_bytes(), expected);
    }
}
