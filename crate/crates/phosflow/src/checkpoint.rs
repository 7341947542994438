//! "PFCK" checkpoint container.
//!
//! Layout: magic "PFCK", format version u32, entry count u32, then per
//! entry: name length u16 + UTF-8 name, dtype code u8 (0 = f32, 1 = f64),
//! rank u8, extents u32 each, raw little-endian values. Flow permutations
//! are stored as f32-encoded index arrays; geometry and the dataset
//! normalization constant ride along as named entries.

use crate::autodiff::{Dtype, Real, Tensor};
use crate::error::{Error, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"PFCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Entry {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Values widened to f64 regardless of stored dtype.
    pub data: Vec<f64>,
}

impl Entry {
    pub fn tensor<T: Real>(&self) -> Result<Tensor<T>> {
        Tensor::from_f64(self.shape.clone(), &self.data)
    }

    pub fn scalar(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::contract(format!(
                "entry is not a scalar: shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }
}

/// Ordered name -> tensor map.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    entries: Vec<(String, Entry)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn insert_tensor<T: Real>(&mut self, name: &str, t: &Tensor<T>) {
        self.entries.push((
            name.to_string(),
            Entry {
                dtype: T::DTYPE,
                shape: t.shape().to_vec(),
                data: t.to_f64_vec(),
            },
        ));
    }

    pub fn insert_scalar(&mut self, name: &str, v: f64) {
        self.entries.push((
            name.to_string(),
            Entry {
                dtype: Dtype::F64,
                shape: vec![],
                data: vec![v],
            },
        ));
    }

    /// Index arrays (e.g. permutations) stored as f32 values.
    pub fn insert_indices(&mut self, name: &str, idx: &[usize]) {
        self.entries.push((
            name.to_string(),
            Entry {
                dtype: Dtype::F32,
                shape: vec![idx.len()],
                data: idx.iter().map(|&i| i as f64).collect(),
            },
        ));
    }

    pub fn get(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, e)| e)
            .ok_or_else(|| Error::contract(format!("checkpoint entry '{}' missing", name)))
    }

    pub fn get_indices(&self, name: &str) -> Result<Vec<usize>> {
        Ok(self.get(name)?.data.iter().map(|&v| v as usize).collect())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| n == name)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u32::<LittleEndian>(self.entries.len() as u32)?;
        for (name, e) in &self.entries {
            let bytes = name.as_bytes();
            w.write_u16::<LittleEndian>(bytes.len() as u16)?;
            w.write_all(bytes)?;
            w.write_u8(e.dtype as u8)?;
            w.write_u8(e.shape.len() as u8)?;
            for &ext in &e.shape {
                w.write_u32::<LittleEndian>(ext as u32)?;
            }
            match e.dtype {
                Dtype::F32 => {
                    for &v in &e.data {
                        w.write_f32::<LittleEndian>(v as f32)?;
                    }
                }
                Dtype::F64 => {
                    for &v in &e.data {
                        w.write_f64::<LittleEndian>(v)?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format(
                0,
                format!("bad magic {:?}, expected {:?}", magic, MAGIC),
            ));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::format(
                4,
                format!(
                    "checkpoint version {} unsupported (expected {}); regenerate the file",
                    version, VERSION
                ),
            ));
        }
        let count = r.read_u32::<LittleEndian>()?;
        let mut entries = Vec::with_capacity(count as usize);
        let mut offset: u64 = 12;
        for _ in 0..count {
            let name_len = r.read_u16::<LittleEndian>()? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|e| Error::format(offset, format!("entry name not UTF-8: {e}")))?;
            let dtype = match r.read_u8()? {
                0 => Dtype::F32,
                1 => Dtype::F64,
                other => {
                    return Err(Error::format(offset, format!("unknown dtype code {other}")))
                }
            };
            let rank = r.read_u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.read_u32::<LittleEndian>()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            match dtype {
                Dtype::F32 => {
                    for _ in 0..numel {
                        data.push(r.read_f32::<LittleEndian>()? as f64);
                    }
                }
                Dtype::F64 => {
                    for _ in 0..numel {
                        data.push(r.read_f64::<LittleEndian>()?);
                    }
                }
            }
            offset += 2 + name_len as u64 + 2 + 4 * rank as u64 + data.len() as u64 * 4;
            entries.push((name, Entry { dtype, shape, data }));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_entries() {
        let mut ck = Checkpoint::new();
        ck.insert_tensor(
            "w",
            &Tensor::<f32>::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
        );
        ck.insert_scalar("alpha", 2.0);
        ck.insert_indices("perm", &[4, 0, 3, 1, 2]);
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&buf[..]).unwrap();
        assert_eq!(back.len(), 3);
        let w: Tensor<f32> = back.get("w").unwrap().tensor().unwrap();
        assert_eq!(w.shape(), &[2, 3]);
        assert_eq!(w.data()[4], 5.0);
        assert_eq!(back.get("alpha").unwrap().scalar().unwrap(), 2.0);
        assert_eq!(back.get_indices("perm").unwrap(), vec![4, 0, 3, 1, 2]);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let buf = b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00".to_vec();
        let err = Checkpoint::read_from(&buf[..]).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn truncated_payload_is_a_format_error() {
        let mut ck = Checkpoint::new();
        ck.insert_tensor("w", &Tensor::<f32>::zeros(vec![8]));
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 5);
        assert!(Checkpoint::read_from(&buf[..]).is_err());
    }
}
