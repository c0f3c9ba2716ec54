//! `PNT1` raw tensor files: the line `PNT1`, a line `n c h w dtype`, then the
//! little-endian payload in NCHW order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::{Shape, Tensor};

const MAGIC: &[u8] = b"PNT1\n";

pub fn encode_tensor<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let s = t.shape();
    let mut out = Vec::with_capacity(32 + t.numel() * T::DTYPE.width());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(format!("{} {} {} {} {}\n", s.n, s.c, s.h, s.w, T::DTYPE.name()).as_bytes());
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Decodes a `PNT1` buffer. A payload stored at the other float width is
/// converted on load.
pub fn decode_tensor<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let rest = bytes.strip_prefix(MAGIC).ok_or_else(|| Error::data("missing PNT1 magic"))?;
    let eol = rest.iter().position(|&b| b == b'\n').ok_or_else(|| Error::data("PNT1 header is not terminated"))?;
    let header = std::str::from_utf8(&rest[..eol]).map_err(|_| Error::data("PNT1 header is not text"))?;
    let fields: Vec<&str> = header.split_ascii_whitespace().collect();
    if fields.len() != 5 {
        return Err(Error::data(format!("PNT1 header needs `n c h w dtype`, got `{header}`")));
    }
    let mut dims = [0usize; 4];
    for (d, f) in dims.iter_mut().zip(&fields[..4]) {
        *d = f.parse().map_err(|_| Error::data(format!("bad PNT1 dimension `{f}`")))?;
    }
    let dtype = Dtype::parse(fields[4]).ok_or_else(|| Error::data(format!("unknown dtype `{}`", fields[4])))?;
    let shape = Shape::from_dims(dims);
    let payload = &rest[eol + 1..];
    let width = dtype.width();
    let expected = shape.numel().checked_mul(width).ok_or_else(|| Error::data("PNT1 shape overflows"))?;
    if payload.len() != expected {
        return Err(Error::data(format!("PNT1 payload is {} bytes, shape {shape} needs {expected}", payload.len())));
    }
    let data = payload
        .chunks_exact(width)
        .map(|c| match dtype {
            Dtype::F32 => T::from_f64c(f32::read_le(c) as f64),
            Dtype::F64 => T::from_f64c(f64::read_le(c)),
        })
        .collect();
    Tensor::from_vec(shape, data)
}

pub fn write_tensor<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    super::write_bytes(path.as_ref(), &encode_tensor(t))
}

pub fn read_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    decode_tensor(&super::read_bytes(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let t = Tensor::from_vec(Shape::new(1, 2, 1, 3), vec![0.1f64, -2.5, 1e-300, f64::MAX, 0.0, -0.0]).unwrap();
        let back: Tensor<f64> = decode_tensor(&encode_tensor(&t)).unwrap();
        let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&t));
        assert_eq!(back.shape(), t.shape());
    }

    #[test]
    fn header_is_text() {
        let t = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![1.0f32]).unwrap();
        let b = encode_tensor(&t);
        assert_eq!(&b[..15], b"PNT1\n1 1 1 1 f3");
        assert_eq!(b.len(), 5 + 12 + 4);
    }

    #[test]
    fn rejects_truncation_and_garbage() {
        let t = Tensor::<f32>::zeros(Shape::new(1, 1, 2, 2));
        let b = encode_tensor(&t);
        assert!(decode_tensor::<f32>(&b[..b.len() - 1]).is_err());
        assert!(decode_tensor::<f32>(b"PNT2\n1 1 1 1 f32\n\0\0\0\0").is_err());
        assert!(decode_tensor::<f32>(b"PNT1\n1 1 1 f32\n\0\0\0\0").is_err());
        assert!(decode_tensor::<f32>(b"PNT1\n1 1 1 1 f16\n\0\0").is_err());
    }
}
