//! Procedural training images: flat regions with sharp boundaries plus a
//! faint band-limited texture.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Channel-0 levels of the region palette; neighbouring levels differ by 0.2.
pub const PALETTE_LEVELS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

#[derive(Debug, Clone, PartialEq)]
pub struct TextureSpec {
    pub count: usize,
    pub size: usize,
    pub channels: usize,
    /// Voronoi sites per image.
    pub regions: usize,
    /// Standard deviation of the texture layer.
    pub amplitude: f64,
    pub seed: u64,
}

impl Default for TextureSpec {
    fn default() -> Self {
        TextureSpec { count: 16, size: 128, channels: 3, regions: 8, amplitude: 0.015, seed: 0 }
    }
}

/// One image split into its flat layer and its texture layer.
#[derive(Debug, Clone)]
pub struct TextureImage<T> {
    pub base: Tensor<T>,
    pub texture: Tensor<T>,
}

impl<T: Scalar> TextureImage<T> {
    pub fn image(&self) -> Tensor<T> {
        self.base.add(&self.texture).expect("layers share a shape")
    }
}

const WAVES: usize = 6;

fn generate<T: Scalar>(spec: &TextureSpec, index: usize) -> TextureImage<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let (s, c) = (spec.size, spec.channels);
    let palette: Vec<Vec<f64>> = PALETTE_LEVELS
        .iter()
        .map(|&l| std::iter::once(l).chain((1..c).map(|_| rng.gen_range(0.15..0.85))).collect())
        .collect();
    let sites: Vec<(f64, f64, usize)> = (0..spec.regions.max(1))
        .map(|_| (rng.gen_range(0.0..s as f64), rng.gen_range(0.0..s as f64), rng.gen_range(0..palette.len())))
        .collect();
    // Each channel's texture is a sum of plane waves with periods of 3 to 8 pixels.
    let per_wave = spec.amplitude / (WAVES as f64 / 2.0).sqrt();
    let waves: Vec<Vec<(f64, f64, f64)>> = (0..c)
        .map(|_| {
            (0..WAVES)
                .map(|_| {
                    let freq = 2.0 * PI / rng.gen_range(3.0..8.0);
                    let angle = rng.gen_range(0.0..PI);
                    (freq * angle.cos(), freq * angle.sin(), rng.gen_range(0.0..2.0 * PI))
                })
                .collect()
        })
        .collect();
    let shape = Shape::new(1, c, s, s);
    let base = Tensor::from_fn(shape, |_, ch, y, x| {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        let nearest = sites
            .iter()
            .min_by(|a, b| {
                let da = (a.0 - py).powi(2) + (a.1 - px).powi(2);
                let db = (b.0 - py).powi(2) + (b.1 - px).powi(2);
                da.total_cmp(&db)
            })
            .expect("at least one site");
        T::from_f64c(palette[nearest.2][ch])
    });
    let texture = Tensor::from_fn(shape, |_, ch, y, x| {
        let v: f64 = waves[ch].iter().map(|&(fy, fx, ph)| (fy * y as f64 + fx * x as f64 + ph).sin()).sum();
        T::from_f64c(per_wave * v)
    });
    TextureImage { base, texture }
}

/// Layers of every image in the set; deterministic per `spec.seed`.
pub fn synth_texture_layers<T: Scalar>(spec: &TextureSpec) -> Result<Vec<TextureImage<T>>> {
    if spec.size < 128 {
        return Err(Error::config(format!("synthetic images must be at least 128x128, got {}", spec.size)));
    }
    if spec.channels == 0 || spec.count == 0 {
        return Err(Error::config("synthetic texture set needs at least one image and one channel"));
    }
    if !(spec.amplitude >= 0.0 && spec.amplitude.is_finite()) {
        return Err(Error::config(format!("texture amplitude must be finite and non-negative, got {}", spec.amplitude)));
    }
    Ok((0..spec.count).map(|i| generate(spec, i)).collect())
}

/// Images of the set, each `1 x channels x size x size`.
pub fn synth_textures<T: Scalar>(spec: &TextureSpec) -> Result<Vec<Tensor<T>>> {
    Ok(synth_texture_layers(spec)?.iter().map(TextureImage::image).collect())
}
