//! Direct loop evaluations shared by several test targets.
#![allow(dead_code)]

use pnen::layers::{ConvLayer, Module};
use pnen::nonlocal::{Apnb, Nlb, Pnb};
use pnen::{Shape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Map = Vec<Vec<Vec<f64>>>; // [channel][y][x]

pub fn to_map(t: &Tensor<f64>) -> Map {
    let s = t.shape();
    (0..s.c).map(|c| (0..s.h).map(|y| (0..s.w).map(|x| t.at(0, c, y, x)).collect()).collect()).collect()
}

/// Convolution with square kernel `k`, stride `k` and symmetric zero padding
/// that makes the output `ceil(len / k)` long.
pub fn tiled_conv(x: &Map, layer: &ConvLayer<f64>, k: usize) -> Map {
    let (h, w) = (x[0].len(), x[0][0].len());
    let (oh, ow) = (h.div_ceil(k), w.div_ceil(k));
    let ph = (oh * k - h).div_ceil(2);
    let pw = (ow * k - w).div_ceil(2);
    let wt = &layer.weight.value;
    let bias = layer.bias.as_ref().map(|b| b.value.data().to_vec()).unwrap_or(vec![0.0; layer.out_channels]);
    (0..layer.out_channels)
        .map(|o| {
            (0..oh)
                .map(|i| {
                    (0..ow)
                        .map(|j| {
                            let mut acc = bias[o];
                            for (c, plane) in x.iter().enumerate() {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let y = (i * k + ky) as isize - ph as isize;
                                        let xx = (j * k + kx) as isize - pw as isize;
                                        if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                                            acc += wt.at(o, c, ky, kx) * plane[y as usize][xx as usize];
                                        }
                                    }
                                }
                            }
                            acc
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Flattens a map to `[position][channel]` tokens, positions row-major.
pub fn tokens(m: &Map) -> Vec<Vec<f64>> {
    let (h, w) = (m[0].len(), m[0][0].len());
    (0..h * w).map(|p| m.iter().map(|plane| plane[p / w][p % w]).collect()).collect()
}

/// For each query: softmax over references of `q . k`, then weighted sum of values.
pub fn attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>]) -> Vec<Vec<f64>> {
    q.iter()
        .map(|qi| {
            let logits: Vec<f64> = k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum()).collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..v[0].len()).map(|c| e.iter().zip(v).map(|(ej, vj)| ej / z * vj[c]).sum()).collect()
        })
        .collect()
}

/// `x + psi(concat(parts))`, parts given as per-position channel vectors.
pub fn fuse(x: &Tensor<f64>, parts: &[Vec<Vec<f64>>], psi: &ConvLayer<f64>) -> Tensor<f64> {
    let s = x.shape();
    let w = &psi.weight.value;
    let b = psi.bias.as_ref().unwrap().value.data();
    Tensor::from_fn(s, |_, o, y, xx| {
        let p = y * s.w + xx;
        let cat: Vec<f64> = parts.iter().flat_map(|part| part[p].iter().copied()).collect();
        let branch: f64 = b[o] + cat.iter().enumerate().map(|(c, v)| w.at(o, c, 0, 0) * v).sum::<f64>();
        branch + x.at(0, o, y, xx)
    })
}

pub fn pooled_tokens(m: &Map, sizes: &[usize]) -> Vec<Vec<f64>> {
    let (h, w) = (m[0].len(), m[0][0].len());
    let mut out = Vec::new();
    for &p in sizes {
        for i in 0..p {
            for j in 0..p {
                let (y0, y1) = (i * h / p, (i + 1) * h / p);
                let (x0, x1) = (j * w / p, (j + 1) * w / p);
                let cnt = ((y1 - y0) * (x1 - x0)) as f64;
                out.push(m.iter().map(|plane| (y0..y1).flat_map(|y| (x0..x1).map(move |x| plane[y][x])).sum::<f64>() / cnt).collect());
            }
        }
    }
    out
}

pub fn randomize<M: Module<f64>>(block: &mut M, rng: &mut ChaCha8Rng) {
    block.visit_params_mut("", &mut |_, p| p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5)));
}

pub fn random_input(rng: &mut ChaCha8Rng, d: usize, h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_fn(Shape::new(1, d, h, w), |_, _, _, _| rng.gen_range(-1.0..1.0))
}

pub fn nlb_oracle(x: &Tensor<f64>, b: &Nlb<f64>) -> Tensor<f64> {
    let m = to_map(x);
    let q = tokens(&tiled_conv(&m, &b.theta, 1));
    let k = tokens(&tiled_conv(&m, &b.phi, 1));
    let v = tokens(&tiled_conv(&m, &b.g, 1));
    fuse(x, &[attention(&q, &k, &v)], &b.psi)
}

pub fn pnb_oracle(x: &Tensor<f64>, b: &Pnb<f64>) -> Tensor<f64> {
    let m = to_map(x);
    let q = tokens(&tiled_conv(&m, &b.theta, 1));
    let parts: Vec<_> = b
        .scales
        .iter()
        .map(|sc| {
            let k = 1 << sc.scale;
            attention(&q, &tokens(&tiled_conv(&m, &sc.phi, k)), &tokens(&tiled_conv(&m, &sc.g, k)))
        })
        .collect();
    fuse(x, &parts, &b.psi)
}

pub fn apnb_oracle(x: &Tensor<f64>, b: &Apnb<f64>) -> Tensor<f64> {
    let m = to_map(x);
    let q = tokens(&tiled_conv(&m, &b.theta, 1));
    let k = pooled_tokens(&tiled_conv(&m, &b.phi, 1), &b.config.pool_sizes);
    let v = pooled_tokens(&tiled_conv(&m, &b.g, 1), &b.config.pool_sizes);
    fuse(x, &[attention(&q, &k, &v)], &b.psi)
}


/// Mean SSIM evaluated window by window with an explicit 2-D Gaussian.
pub fn ssim_oracle(a: &Tensor<f64>, b: &Tensor<f64>, range: f64) -> f64 {
    let s = a.shape();
    let (win, sigma) = (11usize, 1.5f64);
    let r = (win / 2) as f64;
    let mut wts = vec![vec![0.0; win]; win];
    let mut total = 0.0;
    for (i, row) in wts.iter_mut().enumerate() {
        for (j, w) in row.iter_mut().enumerate() {
            *w = (-((i as f64 - r).powi(2) + (j as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp();
            total += *w;
        }
    }
    let (c1, c2) = ((0.01 * range).powi(2), (0.03 * range).powi(2));
    let mut acc = 0.0;
    let mut count = 0.0;
    for c in 0..s.c {
        for y0 in 0..=s.h - win {
            for x0 in 0..=s.w - win {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..win {
                    for j in 0..win {
                        let w = wts[i][j] / total;
                        ma += w * a.at(0, c, y0 + i, x0 + j);
                        mb += w * b.at(0, c, y0 + i, x0 + j);
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..win {
                    for j in 0..win {
                        let w = wts[i][j] / total;
                        let (da, db) = (a.at(0, c, y0 + i, x0 + j) - ma, b.at(0, c, y0 + i, x0 + j) - mb);
                        va += w * da * da;
                        vb += w * db * db;
                        cov += w * da * db;
                    }
                }
                acc += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1.0;
            }
        }
    }
    acc / count
}

