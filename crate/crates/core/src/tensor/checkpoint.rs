//! `STPC` container: `"STPC"`, u32 version, u32 record count, then per record
//! a u16 name length, the UTF-8 name, a u8 rank, u32 dims and f64 values,
//! all little-endian. Records are written in name order.

use std::collections::BTreeMap;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub type Records = BTreeMap<String, Tensor>;

const MAGIC: &[u8; 4] = b"STPC";
const VERSION: u32 = 1;

pub fn encode_stpc(records: &Records) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in records {
        let nb = name.as_bytes();
        let len = u16::try_from(nb.len())
            .map_err(|_| Error::Usage(format!("record name `{name}` is too long")))?;
        let rank = u8::try_from(t.rank())
            .map_err(|_| Error::Usage(format!("record `{name}` has rank {}", t.rank())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(nb);
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Usage(format!("record `{name}` axis too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Little-endian reader that reports truncation as corruption.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Corrupt(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub(crate) fn check_header(r: &mut Reader<'_>, magic: &[u8; 4], version: u32) -> Result<()> {
    let m = r.take(4).map_err(|_| Error::Format("file too short for a header".into()))?;
    if m != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(m),
            String::from_utf8_lossy(magic)
        )));
    }
    let v = r.u32()?;
    if v != version {
        return Err(Error::Format(format!("unsupported version {v}, expected {version}")));
    }
    Ok(())
}

pub fn decode_stpc(bytes: &[u8]) -> Result<Records> {
    let mut r = Reader::new(bytes);
    check_header(&mut r, MAGIC, VERSION)?;
    let count = r.u32()?;
    let mut out = Records::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Corrupt("record name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        if n.checked_mul(8).is_none_or(|b| b > r.remaining()) {
            return Err(Error::Corrupt(format!("record `{name}` payload is truncated")));
        }
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        out.insert(name, Tensor { shape, data });
    }
    if r.remaining() != 0 {
        return Err(Error::Corrupt(format!("{} trailing bytes", r.remaining())));
    }
    Ok(out)
}

pub fn write_stpc(path: impl AsRef<Path>, records: &Records) -> Result<()> {
    std::fs::write(path, encode_stpc(records)?)?;
    Ok(())
}

pub fn read_stpc(path: impl AsRef<Path>) -> Result<Records> {
    decode_stpc(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Records {
        let mut r = Records::new();
        r.insert("norm.mean".into(), Tensor::scalar(42.5));
        r.insert("norm.std".into(), Tensor::scalar(7.25));
        r.insert("pde.B".into(), Tensor::from_rows(&[&[1.0, 0.5], &[-0.0, f64::MIN_POSITIVE]]));
        r
    }

    #[test]
    fn roundtrip_is_exact() {
        let r = sample();
        let back = decode_stpc(&encode_stpc(&r).unwrap()).unwrap();
        assert_eq!(back.len(), r.len());
        for (k, v) in &r {
            let b = &back[k];
            assert_eq!(b.shape(), v.shape());
            for (x, y) in b.data().iter().zip(v.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn layout_is_pinned() {
        let mut r = Records::new();
        r.insert("a".into(), Tensor::from_vec(vec![1.0]));
        let b = encode_stpc(&r).unwrap();
        let mut want = b"STPC".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u16.to_le_bytes());
        want.push(b'a');
        want.push(1);
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1.0f64.to_le_bytes());
        assert_eq!(b, want);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut b = encode_stpc(&sample()).unwrap();
        assert!(matches!(decode_stpc(&b[..b.len() - 3]), Err(Error::Corrupt(_))));
        b[0] = b'X';
        assert!(matches!(decode_stpc(&b), Err(Error::Format(_))));
    }
}
