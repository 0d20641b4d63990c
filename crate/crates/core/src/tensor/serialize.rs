use std::io::{Read, Write};

use super::numel_of;
use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"PHWT";
pub const WEIGHTS_VERSION: u8 = 1;

/// One named array in a weight file.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Writes `records` as: magic, version byte, `u32` count, then per record
/// `u16` name length, UTF-8 name, `u8` rank, `u32` dims, `f64` values.
/// All integers and floats are little-endian.
pub fn write_records<W: Write>(mut w: W, records: &[Record]) -> Result<()> {
    w.write_all(WEIGHTS_MAGIC)?;
    w.write_all(&[WEIGHTS_VERSION])?;
    w.write_all(&u32_len(records.len(), "record count")?.to_le_bytes())?;
    for r in records {
        if numel_of(&r.shape) != r.data.len() {
            return Err(Error::shape("write_records", &r.shape, &[r.data.len()]));
        }
        let name = r.name.as_bytes();
        let name_len =
            u16::try_from(name.len()).map_err(|_| Error::Format(format!("record name too long: {}", r.name)))?;
        let rank =
            u8::try_from(r.shape.len()).map_err(|_| Error::Format(format!("record {} has too many axes", r.name)))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[rank])?;
        for &d in &r.shape {
            w.write_all(&u32_len(d, "dimension")?.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(r.data.len() * 8);
        for v in &r.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_records<R: Read>(mut r: R) -> Result<Vec<Record>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4)? != WEIGHTS_MAGIC {
        return Err(Error::Format("not a weight file (bad magic)".into()));
    }
    let version = cur.take(1)?[0];
    if version != WEIGHTS_VERSION {
        return Err(Error::Version(version));
    }
    let count = cur.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Format("record name is not UTF-8".into()))?
            .to_owned();
        let rank = cur.take(1)?[0] as usize;
        let shape = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("record {name} is too large")))?;
        let raw = cur.take(n.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        out.push(Record { name, shape, data });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after last record", bytes.len() - cur.pos)));
    }
    Ok(out)
}

fn u32_len(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} {n} exceeds u32")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("weight file truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
