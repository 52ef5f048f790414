//! CSIB tensor container and shared little-endian helpers.
//!
//! Layout: `"CSIB"`, `u32` version (1), `u32` scalar width (4 or 8), four
//! `u32` extents `(n, c, h, w)`, then the payload row-major. No padding.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::{Error, Result, Scalar, Shape4, Tensor4};

pub const CSIB_MAGIC: &[u8; 4] = b"CSIB";
pub const CSIB_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 * 6;

/// A decoded CSIB payload of either width.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(Tensor4<f32>),
    F64(Tensor4<f64>),
}

impl StoredTensor {
    pub fn shape(&self) -> Shape4 {
        match self {
            Self::F32(t) => t.shape(),
            Self::F64(t) => t.shape(),
        }
    }

    /// Converts to the requested width (exact when widening or same width).
    pub fn into_tensor<T: Scalar>(self) -> Tensor4<T> {
        match self {
            Self::F32(t) => t.cast(),
            Self::F64(t) => t.cast(),
        }
    }
}

pub fn encode_tensor<T: Scalar>(t: &Tensor4<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + t.data().len() * T::WIDTH as usize);
    out.extend_from_slice(CSIB_MAGIC);
    put_u32(&mut out, CSIB_VERSION);
    put_u32(&mut out, T::WIDTH);
    put_shape(&mut out, t.shape());
    for &x in t.data() {
        x.write_le(&mut out);
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<StoredTensor> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != CSIB_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected \"CSIB\"")));
    }
    let version = r.u32("version")?;
    if version != CSIB_VERSION {
        return Err(Error::Format(format!("unsupported CSIB version {version}")));
    }
    let width = r.u32("scalar width")?;
    let shape = r.shape()?;
    let t = match width {
        4 => StoredTensor::F32(r.payload(shape, "tensor payload")?),
        8 => StoredTensor::F64(r.payload(shape, "tensor payload")?),
        w => return Err(Error::Format(format!("unsupported scalar width {w}"))),
    };
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes after payload", r.remaining())));
    }
    Ok(t)
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_shape(out: &mut Vec<u8>, s: Shape4) {
    for e in [s.n, s.c, s.h, s.w] {
        put_u32(out, e as u32);
    }
}

/// Cursor over a byte slice that reports truncation as a format error.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < len {
            return Err(Error::Format(format!(
                "truncated {what}: need {len} bytes, {} left",
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let b = self.take(len, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }

    pub(crate) fn shape(&mut self) -> Result<Shape4> {
        let n = self.u32("extent n")? as usize;
        let c = self.u32("extent c")? as usize;
        let h = self.u32("extent h")? as usize;
        let w = self.u32("extent w")? as usize;
        Shape4::new(n, c, h, w).map_err(|e| Error::Format(format!("invalid extents: {e}")))
    }

    pub(crate) fn payload<T: Scalar>(&mut self, shape: Shape4, what: &str) -> Result<Tensor4<T>> {
        let width = T::WIDTH as usize;
        let len = shape
            .numel()
            .checked_mul(width)
            .ok_or_else(|| Error::Format(format!("{what} size overflows")))?;
        let raw = self.take(len, what)?;
        let data = raw.chunks_exact(width).map(T::read_le).collect();
        Tensor4::from_vec(shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let s = Shape4::of(1, 2, 32, 32);
        let data: Vec<f32> = (0..s.numel()).map(|i| (i as f32 * 0.37).sin() * 1e-3).collect();
        let t = Tensor4::from_vec(s, data).unwrap();
        let bytes = encode_tensor(&t);
        assert_eq!(bytes.len(), 28 + 4 * 2048);
        assert_eq!(decode_tensor(&bytes).unwrap(), StoredTensor::F32(t.clone()));
        assert_eq!(encode_tensor(&decode_tensor(&bytes).unwrap().into_tensor::<f32>()), bytes);
    }

    #[test]
    fn header_layout() {
        let t = Tensor4::new(Shape4::of(1, 1, 1, 2), 1.0f64).unwrap();
        let b = encode_tensor(&t);
        assert_eq!(&b[..4], b"CSIB");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &8u32.to_le_bytes());
        assert_eq!(&b[24..28], &2u32.to_le_bytes());
        assert_eq!(b.len(), 28 + 16);
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let t = Tensor4::new(Shape4::of(1, 2, 2, 2), 0.25f32).unwrap();
        let good = encode_tensor(&t);

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_tensor(&bad), Err(Error::Format(m)) if m.contains("magic")));

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(decode_tensor(&bad), Err(Error::Format(m)) if m.contains("version")));

        let short = &good[..good.len() - 1];
        assert!(matches!(decode_tensor(short), Err(Error::Format(m)) if m.contains("truncated")));

        let mut long = good.clone();
        long.push(0);
        assert!(decode_tensor(&long).is_err());
        assert!(decode_tensor(&vec![]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn round_trip_random_shapes(n in 1usize..=4, c in 1usize..=64, h in 1usize..=32, w in 1usize..=32,
                                    seed in any::<u32>()) {
            let s = Shape4::of(n, c, h, w);
            let data: Vec<f32> = (0..s.numel())
                .map(|i| f32::from_bits((i as u32).wrapping_mul(2654435761) ^ seed) )
                .map(|x| if x.is_finite() { x } else { 0.0 })
                .collect();
            let t = Tensor4::from_vec(s, data).unwrap();
            let bytes = encode_tensor(&t);
            let back = decode_tensor(&bytes).unwrap().into_tensor::<f32>();
            prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert_eq!(back.shape(), s);
        }
    }
}
