//! Binary tensor checkpoint format.
//!
//! ```text
//! "VDLS"            4 bytes magic
//! version           u32 LE
//! repeated until EOF:
//!   name_len        u32 LE
//!   name            UTF-8 bytes
//!   rank            u32 LE
//!   extents         rank × u32 LE
//!   values          Π extents × f32 LE
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::dense::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VDLS";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(records: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!("checkpoint truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("not a VDLS checkpoint (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut records = Vec::new();
    while c.pos < buf.len() {
        let n = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(n)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let raw = c.take(count * 4)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        records.push((name.clone(), Tensor::new(shape, data).map_err(|e| Error::Format(format!("{name}: {e}")))?));
    }
    Ok(records)
}

pub fn save(path: &Path, records: &[(String, Tensor)]) -> Result<()> {
    let bytes = encode(records);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    decode(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let bytes = encode(&[("w".into(), Tensor::scalar(1.0))]);
        assert_eq!(&bytes[..4], b"VDLS");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(bytes.len(), 8 + 4 + 1 + 4 + 4 + 4);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode(b"NOPE\x01\0\0\0").is_err());
        let mut bytes = encode(&[("w".into(), Tensor::zeros(&[2, 2]))]);
        bytes.pop();
        assert!(decode(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            names in proptest::collection::vec("[a-z.#0-9]{1,12}", 1..4),
            bits in proptest::collection::vec(any::<u32>(), 1..40),
        ) {
            let records: Vec<(String, Tensor)> = names
                .iter()
                .map(|n| {
                    let data: Vec<f32> = bits.iter().map(|b| f32::from_bits(*b)).collect();
                    (n.clone(), Tensor::new(vec![data.len()], data).unwrap())
                })
                .collect();
            let back = decode(&encode(&records)).unwrap();
            prop_assert_eq!(back.len(), records.len());
            for ((n0, t0), (n1, t1)) in records.iter().zip(&back) {
                prop_assert_eq!(n0, n1);
                prop_assert_eq!(t0.shape(), t1.shape());
                let b0: Vec<u32> = t0.data().iter().map(|v| v.to_bits()).collect();
                let b1: Vec<u32> = t1.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(b0, b1);
            }
        }
    }
}
