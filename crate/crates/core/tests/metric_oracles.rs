//! PSNR, SSIM and the cost model against closed forms and direct loops.

mod common;

use common::ssim_oracle;
use pnen::metrics::{count_block_costs, count_costs, psnr, ssim, SsimParams};
use pnen::model::{NonLocalKind, PnenConfig};
use pnen::{Shape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(seed: u64, c: usize, h: usize, w: usize) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(Shape::new(1, c, h, w), |_, _, _, _| rng.gen_range(0.0..1.0))
}

#[test]
fn psnr_closed_forms() {
    let a = random_image(1, 3, 8, 8).map(|v| (v * 200.0).round());
    let b = a.map(|v| v + 1.0);
    assert!((psnr(&a, &b, 255.0).unwrap() - 48.130803608679).abs() < 1e-9);
    let c = a.map(|v| v - 1.0);
    assert!((psnr(&a, &c, 255.0).unwrap() - 48.130803608679).abs() < 1e-9);
    let z = Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2));
    let e = Tensor::full(Shape::new(1, 1, 2, 2), 0.1);
    assert!((psnr(&z, &e, 1.0).unwrap() - 20.0).abs() < 1e-12);
    assert_eq!(psnr(&a, &a, 255.0).unwrap(), f64::INFINITY);
}

#[test]
fn ssim_matches_window_loops() {
    for (seed, c) in [(2, 1), (3, 3)] {
        let a = random_image(seed, c, 19, 17);
        let b = random_image(seed + 10, c, 19, 17).map(|v| 0.3 * v).zip_map(&a, |n, x| 0.7 * x + n).unwrap();
        let got = ssim(&a, &b, SsimParams::default()).unwrap();
        assert!((got - ssim_oracle(&a, &b, 1.0)).abs() < 1e-8);
    }
}

#[test]
fn ssim_of_constants_is_the_luminance_term() {
    let (c1v, c2v, l) = (0.2, 0.7, 1.0);
    let a = Tensor::full(Shape::new(1, 1, 12, 12), c1v);
    let b = Tensor::full(Shape::new(1, 1, 12, 12), c2v);
    let k1 = (0.01f64 * l).powi(2);
    let want = (2.0 * c1v * c2v + k1) / (c1v * c1v + c2v * c2v + k1);
    assert!((ssim(&a, &b, SsimParams::default()).unwrap() - want).abs() < 1e-12);
}

#[test]
fn attention_ratio_is_twenty_one_sixty_fourths_whenever_eight_divides() {
    let cfg = PnenConfig::default();
    for (h, w) in [(8, 8), (16, 40), (96, 96), (64, 128)] {
        let s = Shape::new(1, 64, h, w);
        let nlb = count_block_costs(&cfg, NonLocalKind::Nlb, s, 4).unwrap().attention_elements();
        let pnb = count_block_costs(&cfg, NonLocalKind::Pnb, s, 4).unwrap().attention_elements();
        assert_eq!(pnb * 64, nlb * 21, "{h}x{w}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn psnr_and_ssim_are_symmetric(s1 in 0u64..500, s2 in 500u64..1000) {
        let a = random_image(s1, 1, 12, 12);
        let b = random_image(s2, 1, 12, 12);
        prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        let (x, y) = (ssim(&a, &b, SsimParams::default()).unwrap(), ssim(&b, &a, SsimParams::default()).unwrap());
        prop_assert!((x - y).abs() < 1e-14);
        prop_assert!(x.abs() <= 1.0);
    }

    #[test]
    fn pyramid_costs_less_than_full_attention(k in 2usize..8) {
        let side = 8 * k + 1;
        let cfg = PnenConfig { d: 8, m: 8, n: 4, ..PnenConfig::default() };
        let input = Shape::new(1, 3, side, side);
        let mut a = cfg.clone();
        a.nonlocal = NonLocalKind::Nlb;
        let nlb = count_costs(&a, input, 4).unwrap();
        let pnb = count_costs(&cfg, input, 4).unwrap();
        prop_assert!(pnb.total_macs() < nlb.total_macs());
        let mut none = cfg.clone();
        none.nonlocal = NonLocalKind::None;
        prop_assert!(count_costs(&none, input, 4).unwrap().total_macs() < pnb.total_macs());
    }
}
