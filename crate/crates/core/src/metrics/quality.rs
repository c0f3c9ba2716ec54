use crate::error::{Error, Result};
use crate::filters::gaussian_kernel;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Peak signal-to-noise ratio in dB over all elements. Identical inputs give
/// `f64::INFINITY`.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    b.expect_shape(a.shape(), "psnr")?;
    if a.numel() == 0 {
        return Err(Error::config("psnr of empty images"));
    }
    let se: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x.to_f64c() - y.to_f64c()).powi(2)).sum();
    if se == 0.0 {
        return Ok(f64::INFINITY);
    }
    let mse = se / a.numel() as f64;
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Text form used in CSV output: `inf` for the identical-image sentinel.
pub fn format_psnr(db: f64) -> String {
    if db.is_infinite() {
        "inf".to_string()
    } else {
        format!("{db:.6}")
    }
}

/// SSIM window and stabiliser constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window_sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of pixel values.
    pub range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams { window_sigma: 1.5, k1: 0.01, k2: 0.03, range: 1.0 }
    }
}

impl SsimParams {
    pub fn window(&self) -> usize {
        2 * (3.0 * self.window_sigma).ceil() as usize + 1
    }
}

/// Valid-mode separable weighted sum of `f(a, b)` over every window position.
fn window_sums(a: &[f64], b: &[f64], w: usize, h: usize, k: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let kw = k.len();
    let (ow, oh) = (w - kw + 1, h - kw + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = k.iter().enumerate().map(|(j, &kv)| kv * f(a[y * w + x + j], b[y * w + x + j])).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(j, &kv)| kv * rows[(y + j) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity over every valid window position, averaged
/// over channels and batch items.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, params: SsimParams) -> Result<f64> {
    b.expect_shape(a.shape(), "ssim")?;
    let s = a.shape();
    let win = params.window();
    if s.h < win || s.w < win {
        return Err(Error::config(format!("ssim needs images of at least {win}x{win}, got {}x{}", s.h, s.w)));
    }
    let k = gaussian_kernel(params.window_sigma);
    let c1 = (params.k1 * params.range).powi(2);
    let c2 = (params.k2 * params.range).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for (pa, pb) in a.data().chunks(s.plane()).zip(b.data().chunks(s.plane())) {
        let pa: Vec<f64> = pa.iter().map(|v| v.to_f64c()).collect();
        let pb: Vec<f64> = pb.iter().map(|v| v.to_f64c()).collect();
        let mu_a = window_sums(&pa, &pb, s.w, s.h, &k, |x, _| x);
        let mu_b = window_sums(&pa, &pb, s.w, s.h, &k, |_, y| y);
        let aa = window_sums(&pa, &pb, s.w, s.h, &k, |x, _| x * x);
        let bb = window_sums(&pa, &pb, s.w, s.h, &k, |_, y| y * y);
        let ab = window_sums(&pa, &pb, s.w, s.h, &k, |x, y| x * y);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn psnr_closed_forms() {
        let a = Tensor::full(Shape::new(1, 3, 4, 4), 100.0f64);
        let b = a.map(|v| v + 1.0);
        assert!((psnr(&a, &b, 255.0).unwrap() - 20.0 * 255f64.log10()).abs() < 1e-12);
        assert_eq!(psnr(&a, &a, 255.0).unwrap(), f64::INFINITY);
        assert_eq!(format_psnr(f64::INFINITY), "inf");
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Tensor::<f32>::zeros(Shape::new(1, 1, 10, 20));
        assert!(ssim(&a, &a, SsimParams::default()).is_err());
    }

    #[test]
    fn ssim_of_identical_images_is_exactly_one() {
        let a = Tensor::from_fn(Shape::new(1, 3, 16, 13), |_, c, y, x| ((c * 5 + y * 3 + x * 7) % 17) as f64 / 17.0);
        assert_eq!(ssim(&a, &a, SsimParams::default()).unwrap(), 1.0);
    }
}
