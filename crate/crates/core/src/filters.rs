//! Classical smoothing filters used as training and evaluation targets.
//!
//! All filters work per channel and per batch item, with replicate-edge
//! boundaries.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterKind {
    Gaussian,
    Median,
    WeightedMedian,
}

impl FilterKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gaussian" => Some(FilterKind::Gaussian),
            "median" => Some(FilterKind::Median),
            "weighted_median" => Some(FilterKind::WeightedMedian),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FilterKind::Gaussian => "gaussian",
            FilterKind::Median => "median",
            FilterKind::WeightedMedian => "weighted_median",
        }
    }
}

/// Filter selection and parameters.
///
/// The Gaussian blur uses `sigma_spatial` as its standard deviation and a
/// radius of `ceil(3 sigma)`; `radius` applies to the two median filters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterSpec {
    pub kind: FilterKind,
    pub radius: usize,
    pub sigma_spatial: f64,
    pub sigma_range: f64,
}

impl Default for FilterSpec {
    fn default() -> Self {
        FilterSpec::gaussian(1.5)
    }
}

impl FilterSpec {
    pub fn gaussian(sigma: f64) -> Self {
        FilterSpec { kind: FilterKind::Gaussian, radius: (3.0 * sigma).ceil().max(1.0) as usize, sigma_spatial: sigma, sigma_range: 1.0 }
    }

    pub fn median(radius: usize) -> Self {
        FilterSpec { kind: FilterKind::Median, radius, sigma_spatial: 1.0, sigma_range: 1.0 }
    }

    pub fn weighted_median(radius: usize, sigma_spatial: f64, sigma_range: f64) -> Self {
        FilterSpec { kind: FilterKind::WeightedMedian, radius, sigma_spatial, sigma_range }
    }

    pub fn validate(&self) -> Result<()> {
        if self.radius == 0 {
            return Err(Error::config("filter radius must be at least 1"));
        }
        // NaN fails both comparisons, infinity is allowed.
        if !(self.sigma_spatial > 0.0 && self.sigma_range > 0.0) {
            return Err(Error::config(format!(
                "filter sigmas must be positive, got {} and {}",
                self.sigma_spatial, self.sigma_range
            )));
        }
        Ok(())
    }

    pub fn apply<T: Scalar>(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        self.validate()?;
        Ok(match self.kind {
            FilterKind::Gaussian => gaussian_blur(img, self.sigma_spatial),
            FilterKind::Median => median_filter(img, self.radius),
            FilterKind::WeightedMedian => weighted_median(img, self.radius, self.sigma_spatial, self.sigma_range),
        })
    }
}

#[inline]
fn clamp_index(i: isize, len: usize) -> usize {
    i.clamp(0, len as isize - 1) as usize
}

/// Normalised 1-D Gaussian taps for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Separable Gaussian blur.
pub fn gaussian_blur<T: Scalar>(img: &Tensor<T>, sigma: f64) -> Tensor<T> {
    let s = img.shape();
    let k: Vec<T> = gaussian_kernel(sigma).into_iter().map(T::from_f64c).collect();
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![T::zero(); s.plane()];
    let mut out = img.clone();
    for (src, dst) in img.data().chunks(s.plane()).zip(out.data_mut().chunks_mut(s.plane())) {
        for y in 0..s.h {
            for x in 0..s.w {
                let mut acc = T::zero();
                for (j, &kv) in k.iter().enumerate() {
                    acc += kv * src[y * s.w + clamp_index(x as isize + j as isize - r, s.w)];
                }
                tmp[y * s.w + x] = acc;
            }
        }
        for y in 0..s.h {
            for x in 0..s.w {
                let mut acc = T::zero();
                for (j, &kv) in k.iter().enumerate() {
                    acc += kv * tmp[clamp_index(y as isize + j as isize - r, s.h) * s.w + x];
                }
                dst[y * s.w + x] = acc;
            }
        }
    }
    out
}

fn for_each_window<T: Scalar>(img: &Tensor<T>, r: usize, mut f: impl FnMut(&[T], usize, usize, &mut Vec<T>) -> T) -> Tensor<T> {
    let s = img.shape();
    let r = r as isize;
    let mut out = img.clone();
    let mut scratch = Vec::new();
    for (src, dst) in img.data().chunks(s.plane()).zip(out.data_mut().chunks_mut(s.plane())) {
        for y in 0..s.h {
            for x in 0..s.w {
                scratch.clear();
                for dy in -r..=r {
                    let yy = clamp_index(y as isize + dy, s.h);
                    for dx in -r..=r {
                        scratch.push(src[yy * s.w + clamp_index(x as isize + dx, s.w)]);
                    }
                }
                dst[y * s.w + x] = f(src, y, x, &mut scratch);
            }
        }
    }
    out
}

/// Median over the `(2r+1)^2` window; with an even count the lower median is used.
pub fn median_filter<T: Scalar>(img: &Tensor<T>, radius: usize) -> Tensor<T> {
    for_each_window(img, radius, |_, _, _, w| {
        let mid = (w.len() - 1) / 2;
        *w.select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).expect("finite image")).1
    })
}

/// Bilateral-weighted median: the smallest window value whose cumulative
/// weight reaches half the total.
pub fn weighted_median<T: Scalar>(img: &Tensor<T>, radius: usize, sigma_spatial: f64, sigma_range: f64) -> Tensor<T> {
    let r = radius as isize;
    let spatial: Vec<f64> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy * dy + dx * dx) as f64))
        .map(|d2| (-d2 / (2.0 * sigma_spatial * sigma_spatial)).exp())
        .collect();
    let w = img.shape().w;
    let mut pairs: Vec<(T, f64)> = Vec::new();
    for_each_window(img, radius, |src, y, x, window| {
        let center = src[y * w + x].to_f64c();
        pairs.clear();
        pairs.extend(window.iter().zip(&spatial).map(|(&v, &ws)| {
            let dv = v.to_f64c() - center;
            (v, ws * (-(dv * dv) / (2.0 * sigma_range * sigma_range)).exp())
        }));
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite image"));
        let half = pairs.iter().map(|p| p.1).sum::<f64>() / 2.0;
        let mut acc = 0.0;
        for &(v, wt) in &pairs {
            acc += wt;
            if acc >= half {
                return v;
            }
        }
        pairs.last().expect("window is never empty").0
    })
}
