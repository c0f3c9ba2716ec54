//! Binary PGM (`P5`) and PPM (`P6`) images with maxval 255.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Maps `[0, 1]` to a byte: scale by 255, clamp, round half away from zero.
pub fn quantize<T: Scalar>(v: T) -> u8 {
    let x = v.to_f64c() * 255.0;
    if x.is_nan() {
        return 0;
    }
    x.clamp(0.0, 255.0).round() as u8
}

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::data("not a binary PGM/PPM file (expected P5 or P6)")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::data("truncated netpbm header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are ascii");
        *field = text.parse().map_err(|_| Error::data("malformed netpbm header"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::data("malformed netpbm header")),
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::data(format!("only maxval 255 is supported, got {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::data("netpbm image has a zero dimension"));
    }
    Ok(Header { channels, width, height, data_start: pos })
}

/// Decodes to a `1 x c x h x w` tensor with values `byte / 255`.
pub fn decode_netpbm<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let h = parse_header(bytes)?;
    let plane = h.width * h.height;
    let need = plane * h.channels;
    let payload = &bytes[h.data_start..];
    if payload.len() < need {
        return Err(Error::data(format!("truncated netpbm payload: {} of {need} bytes", payload.len())));
    }
    let scale = T::from_f64c(255.0);
    let mut data = vec![T::zero(); need];
    for (i, &b) in payload[..need].iter().enumerate() {
        let (px, ch) = (i / h.channels, i % h.channels);
        data[ch * plane + px] = T::from_f64c(b as f64) / scale;
    }
    Tensor::from_vec(Shape::new(1, h.channels, h.height, h.width), data)
}

/// Encodes a single image with 1 (PGM) or 3 (PPM) channels.
pub fn encode_netpbm<T: Scalar>(img: &Tensor<T>) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.n != 1 || !(s.c == 1 || s.c == 3) {
        return Err(Error::data(format!("can only write 1x1xHxW or 1x3xHxW images, got {s}")));
    }
    let magic = if s.c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", s.w, s.h).into_bytes();
    let plane = s.plane();
    let d = img.data();
    for px in 0..plane {
        for ch in 0..s.c {
            out.push(quantize(d[ch * plane + px]));
        }
    }
    Ok(out)
}

pub fn read_image<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    decode_netpbm(&super::read_bytes(path)?).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_image<T: Scalar>(path: impl AsRef<Path>, img: &Tensor<T>) -> Result<()> {
    super::write_bytes(path.as_ref(), &encode_netpbm(img)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_gray_example() {
        let mut b = b"P5\n2 2\n255\n".to_vec();
        b.extend_from_slice(&[0, 128, 255, 64]);
        let t: Tensor<f64> = decode_netpbm(&b).unwrap();
        assert_eq!(t.shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(t.data(), &[0.0, 128.0 / 255.0, 1.0, 64.0 / 255.0]);
    }

    #[test]
    fn half_rounds_away_from_zero() {
        assert_eq!(quantize(0.5f64), 128);
        assert_eq!(quantize(-0.1f32), 0);
        assert_eq!(quantize(2.0f32), 255);
    }

    #[test]
    fn comments_and_color_interleaving() {
        let mut b = b"P6 # rgb\n1 1 # one pixel\n255\n".to_vec();
        b.extend_from_slice(&[10, 20, 30]);
        let t: Tensor<f32> = decode_netpbm(&b).unwrap();
        assert_eq!(t.shape(), Shape::new(1, 3, 1, 1));
        assert_eq!(encode_netpbm(&t).unwrap()[11..], [10, 20, 30]);
    }

    #[test]
    fn malformed_inputs() {
        assert!(decode_netpbm::<f32>(b"P3\n1 1\n255\n\0").is_err());
        assert!(decode_netpbm::<f32>(b"P5\n2 2\n255\n\0\0\0").is_err());
        assert!(decode_netpbm::<f32>(b"P5\n1 1\n65535\n\0\0").is_err());
        assert!(decode_netpbm::<f32>(b"P5\n1").is_err());
    }
}
