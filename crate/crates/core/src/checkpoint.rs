//! Binary parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "NIC1"                      magic
//! u32                         parameter count
//! per parameter:
//!   u32 + bytes               UTF-8 name, length-prefixed
//!   u32 + u32 × rank          shape
//!   f64 × numel               row-major values
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"NIC1";

pub fn encode<'a>(params: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<Vec<u8>> {
    let params: Vec<_> = params.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&u32_of(params.len(), "parameter count")?.to_le_bytes());
    for (name, t) in params {
        out.extend_from_slice(&u32_of(name.len(), "name length")?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&u32_of(t.shape().len(), "rank")?.to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&u32_of(d, "dimension")?.to_le_bytes());
        }
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} {n} does not fit in 32 bits")))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic, expected NIC1".into()));
    }
    let count = r.u32()?;
    let mut params = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()?;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n = numel(&shape);
        let bytes = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("shape overflow".into()))?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(params)
}

pub fn save<'a>(path: impl AsRef<Path>, params: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    let bytes = encode(params)?;
    std::fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(&path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let bytes = encode([("w", &t)]).unwrap();
        assert_eq!(&bytes[..4], b"NIC1");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(bytes[12], b'w');
        assert_eq!(&bytes[13..17], &2u32.to_le_bytes());
        assert_eq!(&bytes[17..21], &1u32.to_le_bytes());
        assert_eq!(&bytes[21..25], &2u32.to_le_bytes());
        assert_eq!(&bytes[25..33], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 41);
    }

    #[test]
    fn rejects_corrupt_input() {
        assert!(decode(b"NIC0\0\0\0\0").is_err());
        let t = Tensor::zeros(&[3]);
        let bytes = encode([("x", &t)]).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(shapes in prop::collection::vec(prop::collection::vec(1usize..4, 0..3), 0..4),
                      seed in any::<u64>()) {
            let tensors: Vec<(String, Tensor)> = shapes.iter().enumerate().map(|(i, s)| {
                let t = Tensor::from_fn(s, |j| (seed as f64).sin() * (j as f64 + 1.0) / (i as f64 + 0.5));
                (format!("p.{i}.ü"), t)
            }).collect();
            let bytes = encode(tensors.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(back, tensors);
        }
    }
}
