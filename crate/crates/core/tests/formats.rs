//! File formats round-trip bit-exactly.

use pnen::io::{decode_netpbm, decode_tensor, encode_netpbm, encode_tensor, quantize, read_image, write_image};
use pnen::{Shape, Tensor};
use proptest::prelude::*;

proptest! {
    #[test]
    fn tensors_round_trip(v in prop::collection::vec(any::<f64>(), 1..40), c in 1usize..3) {
        let n = v.len();
        let t = Tensor::from_vec(Shape::new(1, 1, 1, n), v).unwrap();
        let back: Tensor<f64> = decode_tensor(&encode_tensor(&t)).unwrap();
        prop_assert_eq!(
            back.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        let t32 = Tensor::from_fn(Shape::new(1, c, 2, 3), |_, c, y, x| (c + y * 3 + x) as f32 * 0.1);
        let b32: Tensor<f32> = decode_tensor(&encode_tensor(&t32)).unwrap();
        prop_assert_eq!(b32.data(), t32.data());
    }

    #[test]
    fn quantised_images_round_trip(bytes in prop::collection::vec(any::<u8>(), 12), color in any::<bool>()) {
        let (c, h, w) = if color { (3, 2, 2) } else { (1, 3, 4) };
        let t = Tensor::from_fn(Shape::new(1, c, h, w), |_, ch, y, x| {
            let i = if color { (y * w + x) * 3 + ch } else { y * w + x };
            bytes[i] as f32 / 255.0
        });
        let enc = encode_netpbm(&t).unwrap();
        let back: Tensor<f32> = decode_netpbm(&enc).unwrap();
        prop_assert_eq!(back.data(), t.data());
        prop_assert_eq!(encode_netpbm(&back).unwrap(), enc);
    }

    #[test]
    fn quantize_rounds_half_away(b in 0u8..255) {
        prop_assert_eq!(quantize((b as f64 + 0.5) / 255.0), b + 1);
        prop_assert_eq!(quantize(b as f64 / 255.0), b);
    }
}

#[test]
fn files_round_trip_and_report_paths() {
    let dir = std::env::temp_dir().join(format!("pnen-fmt-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let t = Tensor::from_fn(Shape::new(1, 3, 4, 5), |_, c, y, x| ((c * 20 + y * 5 + x) * 3) as f64 / 255.0);
    let p = dir.join("img.ppm");
    write_image(&p, &t).unwrap();
    let back: Tensor<f64> = read_image(&p).unwrap();
    assert_eq!(back.data(), t.data());
    std::fs::write(dir.join("bad.pgm"), b"P5\n4 4\n255\n\x00").unwrap();
    let err = read_image::<f32>(dir.join("bad.pgm")).unwrap_err().to_string();
    assert!(err.contains("bad.pgm") && err.contains("truncated"), "{err}");
    assert!(read_image::<f32>(dir.join("missing.pgm")).is_err());
    assert!(write_image(dir.join("x.pgm"), &Tensor::<f32>::zeros(Shape::new(1, 2, 2, 2))).is_err());
    std::fs::remove_dir_all(&dir).unwrap();
}
