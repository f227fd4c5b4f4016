//! Binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "NMTF" | version: u32
//! repeated until EOF:
//!   name_len: u32 | name: UTF-8 | rank: u32 | dims: rank × u64 | dtype: u8 | payload
//! ```
//!
//! dtype 0 is f64, 1 is f32, 2 is raw bytes (used for text metadata).

use std::io::{Read, Write};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NMTF";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Record {
    F64(Tensor),
    F32 { shape: Vec<usize>, data: Vec<f32> },
    Bytes(Vec<u8>),
}

impl Record {
    fn dtype(&self) -> u8 {
        match self {
            Record::F64(_) => 0,
            Record::F32 { .. } => 1,
            Record::Bytes(_) => 2,
        }
    }
}

pub fn write_records<W: Write>(mut w: W, records: &[(String, Record)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for (name, record) in records {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let shape: Vec<usize> = match record {
            Record::F64(t) => t.shape().to_vec(),
            Record::F32 { shape, .. } => shape.clone(),
            Record::Bytes(b) => vec![b.len()],
        };
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for d in &shape {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        w.write_all(&[record.dtype()])?;
        match record {
            Record::F64(t) => {
                let mut buf = Vec::with_capacity(t.len() * 8);
                for v in t.data() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                w.write_all(&buf)?;
            }
            Record::F32 { data, .. } => {
                for v in data {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            Record::Bytes(b) => w.write_all(b)?,
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.at < n {
            return Err(Error::format("checkpoint", "truncated record"));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_records<R: Read>(mut r: R) -> Result<Vec<(String, Record)>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, at: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::format("checkpoint", "bad magic bytes"));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    while c.at < buf.len() {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)?.to_string();
        let rank = c.u32()? as usize;
        let shape = (0..rank)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let dtype = c.take(1)?[0];
        let record = match dtype {
            0 => {
                let bytes = c.take(n * 8)?;
                let data = bytes
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect();
                Record::F64(Tensor::new(shape, data)?)
            }
            1 => {
                let bytes = c.take(n * 4)?;
                let data = bytes
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect();
                Record::F32 { shape, data }
            }
            2 => Record::Bytes(c.take(n)?.to_vec()),
            other => {
                return Err(Error::format("checkpoint", format!("unknown dtype tag {other}")))
            }
        };
        out.push((name, record));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            values in proptest::collection::vec(any::<f64>(), 0..40),
            text in ".{0,20}",
        ) {
            let t = Tensor::vector(values);
            let records = vec![
                ("w".to_string(), Record::F64(t)),
                ("meta".to_string(), Record::Bytes(text.into_bytes())),
                ("half".to_string(), Record::F32 { shape: vec![2], data: vec![1.5, -0.25] }),
            ];
            let mut buf = Vec::new();
            write_records(&mut buf, &records).unwrap();
            let back = read_records(&buf[..]).unwrap();
            prop_assert_eq!(back.len(), 3);
            for ((n1, r1), (n2, r2)) in records.iter().zip(&back) {
                prop_assert_eq!(n1, n2);
                match (r1, r2) {
                    (Record::F64(a), Record::F64(b)) => {
                        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                        prop_assert_eq!(bits(a), bits(b));
                    }
                    _ => prop_assert_eq!(r1, r2),
                }
            }
        }
    }

    #[test]
    fn header_is_checked() {
        let mut buf = Vec::new();
        write_records(&mut buf, &[]).unwrap();
        assert_eq!(&buf, b"NMTF\x01\x00\x00\x00");
        buf[0] = b'X';
        assert!(read_records(&buf[..]).is_err());
        assert!(read_records(&b"NMTF\x01\x00\x00\x00\x05\x00"[..]).is_err());
    }
}
