//! Forward and backward kernels on plain tensors.
//!
//! These are the numeric building blocks behind the tape in [`crate::tape`].
//! Each forward kernel has a matching `*_backward` that maps an upstream
//! gradient to gradients of its inputs.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Spatial hyperparameters of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeom {
    /// Square kernel, stride 1, no dilation, "same" padding for odd kernels.
    pub fn same(k: usize) -> Self {
        ConvGeom { kernel: (k, k), stride: (1, 1), dilation: (1, 1), padding: (k / 2, k / 2) }
    }

    pub fn dilated(k: usize, d: usize) -> Self {
        ConvGeom { kernel: (k, k), stride: (1, 1), dilation: (d, d), padding: (d * (k / 2), d * (k / 2)) }
    }

    /// Non-overlapping tiles: kernel = stride = `k`, no padding.
    pub fn tiled(k: usize) -> Self {
        ConvGeom { kernel: (k, k), stride: (k, k), dilation: (1, 1), padding: (0, 0) }
    }

    pub fn pointwise() -> Self {
        ConvGeom::tiled(1)
    }

    fn axis(len: usize, k: usize, s: usize, d: usize, p: usize) -> Option<usize> {
        let span = d * (k - 1) + 1;
        let padded = len + 2 * p;
        if k == 0 || s == 0 || d == 0 || padded < span {
            return None;
        }
        Some((padded - span) / s + 1)
    }

    /// Output spatial size `floor((h + 2p - d(k-1) - 1)/s) + 1` per axis.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let oh = Self::axis(h, self.kernel.0, self.stride.0, self.dilation.0, self.padding.0);
        let ow = Self::axis(w, self.kernel.1, self.stride.1, self.dilation.1, self.padding.1);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(Error::config(format!("convolution {self:?} yields an empty output on a {h}x{w} map"))),
        }
    }

    fn is_pointwise(&self) -> bool {
        *self == ConvGeom::pointwise()
    }
}

fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, g: &ConvGeom, oh: usize, ow: usize, cols: &mut [T]) {
    let (kh, kw) = g.kernel;
    let p = oh * ow;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride.0 + ky * g.dilation.0) as isize - g.padding.0 as isize;
                    let out = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * g.stride.1 + kx * g.dilation.1) as isize - g.padding.1 as isize;
                        *o = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, g: &ConvGeom, oh: usize, ow: usize, x: &mut [T]) {
    let (kh, kw) = g.kernel;
    let p = oh * ow;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride.0 + ky * g.dilation.0) as isize - g.padding.0 as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride.1 + kx * g.dilation.1) as isize - g.padding.1 as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_conv_shapes<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&[T]>) -> Result<()> {
    let ws = weight.shape();
    if x.shape().c != ws.c {
        return Err(Error::config(format!(
            "conv2d: input has {} channels, kernel expects {}",
            x.shape().c,
            ws.c
        )));
    }
    if let Some(b) = bias {
        if b.len() != ws.n {
            return Err(Error::config(format!("conv2d: bias length {} != {} outputs", b.len(), ws.n)));
        }
    }
    Ok(())
}

/// Cross-correlation of `x` with `weight` laid out as `(out, in, kh, kw)`.
pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&[T]>, g: &ConvGeom) -> Result<Tensor<T>> {
    check_conv_shapes(x, weight, bias)?;
    let s = x.shape();
    let ws = weight.shape();
    if (ws.h, ws.w) != g.kernel {
        return Err(Error::config(format!("conv2d: kernel tensor {ws} does not match {:?}", g.kernel)));
    }
    let (oh, ow) = g.output_size(s.h, s.w)?;
    let ck = ws.c * ws.h * ws.w;
    let p = oh * ow;
    let mut out = Tensor::zeros(Shape::new(s.n, ws.n, oh, ow));
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); ck * p] };
    for n in 0..s.n {
        let rhs: &[T] = if g.is_pointwise() {
            x.item(n)
        } else {
            im2col(x.item(n), s.c, s.h, s.w, g, oh, ow, &mut cols);
            &cols
        };
        let dst = out.item_mut(n);
        T::gemm(ws.n, ck, p, T::one(), weight.data(), false, rhs, false, T::zero(), dst);
        if let Some(b) = bias {
            for (o, &bo) in b.iter().enumerate() {
                dst[o * p..(o + 1) * p].iter_mut().for_each(|v| *v += bo);
            }
        }
    }
    Ok(out)
}

/// Gradients of a convolution: `(d_input, d_weight, d_bias)`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    g: &ConvGeom,
) -> (Tensor<T>, Tensor<T>, Vec<T>) {
    let s = x.shape();
    let ws = weight.shape();
    let ds = dy.shape();
    let (oh, ow) = (ds.h, ds.w);
    let ck = ws.c * ws.h * ws.w;
    let p = oh * ow;
    let mut dx = Tensor::zeros(s);
    let mut dw = Tensor::zeros(ws);
    let mut db = vec![T::zero(); ws.n];
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); ck * p] };
    let mut dcols = if pointwise { Vec::new() } else { vec![T::zero(); ck * p] };
    for n in 0..s.n {
        let dyn_ = dy.item(n);
        for (o, b) in db.iter_mut().enumerate() {
            *b += dyn_[o * p..(o + 1) * p].iter().copied().sum::<T>();
        }
        if pointwise {
            T::gemm(ws.n, p, ck, T::one(), dyn_, false, x.item(n), true, T::one(), dw.data_mut());
            T::gemm(ck, ws.n, p, T::one(), weight.data(), true, dyn_, false, T::zero(), dx.item_mut(n));
        } else {
            im2col(x.item(n), s.c, s.h, s.w, g, oh, ow, &mut cols);
            T::gemm(ws.n, p, ck, T::one(), dyn_, false, &cols, true, T::one(), dw.data_mut());
            T::gemm(ck, ws.n, p, T::one(), weight.data(), true, dyn_, false, T::zero(), &mut dcols);
            col2im(&dcols, s.c, s.h, s.w, g, oh, ow, dx.item_mut(n));
        }
    }
    (dx, dw, db)
}

/// Per-channel statistics saved by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Biased per-channel mean and variance over `(n, h, w)`.
pub fn channel_stats<T: Scalar>(x: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
    let s = x.shape();
    let count = s.n * s.plane();
    if count == 0 {
        return Err(Error::config("batchnorm over zero elements per channel"));
    }
    let cnt = T::from_usize_c(count);
    let mut mean = vec![T::zero(); s.c];
    let mut var = vec![T::zero(); s.c];
    for c in 0..s.c {
        let mut acc = T::zero();
        for n in 0..s.n {
            acc += x.plane(n, c).iter().copied().sum::<T>();
        }
        let mu = acc / cnt;
        let mut sq = T::zero();
        for n in 0..s.n {
            sq += x.plane(n, c).iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
        }
        mean[c] = mu;
        var[c] = sq / cnt;
    }
    Ok((mean, var))
}

fn inv_std<T: Scalar>(var: T, eps: T) -> T {
    let d = var + eps;
    // a channel with zero spread normalises to zero
    if d > T::zero() {
        T::one() / d.sqrt()
    } else {
        T::zero()
    }
}

/// Normalises with the given statistics then applies `gamma * xhat + beta`.
pub fn batchnorm_apply<T: Scalar>(x: &Tensor<T>, mean: &[T], inv_std: &[T], gamma: &[T], beta: &[T]) -> Tensor<T> {
    let s = x.shape();
    let mut out = x.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let p = s.plane();
            let o = (n * s.c + c) * p;
            let (mu, is, g, b) = (mean[c], inv_std[c], gamma[c], beta[c]);
            for v in &mut out.data_mut()[o..o + p] {
                *v = g * ((*v - mu) * is) + b;
            }
        }
    }
    out
}

pub fn batchnorm_train_forward<T: Scalar>(x: &Tensor<T>, gamma: &[T], beta: &[T], eps: T) -> Result<(Tensor<T>, BatchStats<T>)> {
    let (mean, var) = channel_stats(x)?;
    let inv: Vec<T> = var.iter().map(|&v| inv_std(v, eps)).collect();
    let y = batchnorm_apply(x, &mean, &inv, gamma, beta);
    Ok((y, BatchStats { mean, var, inv_std: inv }))
}

pub fn batchnorm_eval_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: T,
) -> Tensor<T> {
    let inv: Vec<T> = running_var.iter().map(|&v| inv_std(v, eps)).collect();
    batchnorm_apply(x, running_mean, &inv, gamma, beta)
}

/// Gradients `(dx, dgamma, dbeta)`; `batch_stats` selects the training-mode formula.
pub fn batchnorm_backward<T: Scalar>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    gamma: &[T],
    mean: &[T],
    inv_std: &[T],
    batch_stats: bool,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let s = x.shape();
    let p = s.plane();
    let cnt = T::from_usize_c(s.n * p);
    let mut dx = Tensor::zeros(s);
    let mut dgamma = vec![T::zero(); s.c];
    let mut dbeta = vec![T::zero(); s.c];
    for c in 0..s.c {
        let (mu, is) = (mean[c], inv_std[c]);
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for n in 0..s.n {
            for (&xv, &g) in x.plane(n, c).iter().zip(dy.plane(n, c)) {
                sum_dy += g;
                sum_dy_xhat += g * (xv - mu) * is;
            }
        }
        dgamma[c] = sum_dy_xhat;
        dbeta[c] = sum_dy;
        let k = gamma[c] * is;
        for n in 0..s.n {
            let o = (n * s.c + c) * p;
            let xs = &x.data()[o..o + p];
            let gs = &dy.data()[o..o + p];
            let dst = &mut dx.data_mut()[o..o + p];
            if batch_stats {
                let mean_dy = sum_dy / cnt;
                let mean_dy_xhat = sum_dy_xhat / cnt;
                for i in 0..p {
                    let xhat = (xs[i] - mu) * is;
                    dst[i] = k * (gs[i] - mean_dy - xhat * mean_dy_xhat);
                }
            } else {
                for i in 0..p {
                    dst[i] = k * gs[i];
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Subgradient 0 at the kink.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= T::zero() {
            *d = T::zero();
        }
    }
    dx
}

/// Logical `(rows, cols)` of a batched matrix operand.
fn mat_dims(s: Shape, trans: bool) -> (usize, usize) {
    if trans {
        (s.w, s.h)
    } else {
        (s.h, s.w)
    }
}

/// Batched product of `(B, 1, r, k)` matrices; each operand may be used transposed.
pub fn matmul_forward<T: Scalar>(a: &Tensor<T>, trans_a: bool, b: &Tensor<T>, trans_b: bool) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.c != 1 || sb.c != 1 || sa.n != sb.n {
        return Err(Error::config(format!("matmul: operands {sa} and {sb} are not matching matrix batches")));
    }
    let (m, k) = mat_dims(sa, trans_a);
    let (k2, n) = mat_dims(sb, trans_b);
    if k != k2 {
        return Err(Error::config(format!("matmul: inner dimensions {k} and {k2} differ")));
    }
    let mut out = Tensor::zeros(Shape::new(sa.n, 1, m, n));
    for i in 0..sa.n {
        T::gemm(m, k, n, T::one(), a.item(i), trans_a, b.item(i), trans_b, T::zero(), out.item_mut(i));
    }
    Ok(out)
}

/// Gradients of [`matmul_forward`] with respect to both stored operands.
pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    trans_a: bool,
    b: &Tensor<T>,
    trans_b: bool,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (sa, sb) = (a.shape(), b.shape());
    let (m, k) = mat_dims(sa, trans_a);
    let n = dy.shape().w;
    let mut da = Tensor::zeros(sa);
    let mut db = Tensor::zeros(sb);
    for i in 0..sa.n {
        let g = dy.item(i);
        // dA_logical = dY * B_logical^T ; dB_logical = A_logical^T * dY
        if trans_a {
            // stored A is k x m: dA_stored = B_logical * dY^T
            T::gemm(k, n, m, T::one(), b.item(i), trans_b, g, true, T::zero(), da.item_mut(i));
        } else {
            T::gemm(m, n, k, T::one(), g, false, b.item(i), !trans_b, T::zero(), da.item_mut(i));
        }
        if trans_b {
            // stored B is n x k: dB_stored = dY^T * A_logical
            T::gemm(n, m, k, T::one(), g, true, a.item(i), trans_a, T::zero(), db.item_mut(i));
        } else {
            T::gemm(k, m, n, T::one(), a.item(i), !trans_a, g, false, T::zero(), db.item_mut(i));
        }
    }
    (da, db)
}

/// Softmax along the last axis, computed with row-max subtraction.
pub fn softmax_rows_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.check_finite("softmax_rows input")?;
    let w = x.shape().w;
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(w) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(out)
}

/// Backward of softmax given its output `p`.
pub fn softmax_rows_backward<T: Scalar>(p: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let w = p.shape().w;
    let mut dx = dy.clone();
    for (drow, prow) in dx.data_mut().chunks_mut(w).zip(p.data().chunks(w)) {
        let dot: T = drow.iter().zip(prow).map(|(&d, &q)| d * q).sum();
        for (d, &q) in drow.iter_mut().zip(prow) {
            *d = q * (*d - dot);
        }
    }
    dx
}

/// `(B, C, H, W)` to per-item token matrices `(B, 1, H*W, C)`.
pub fn to_tokens<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let p = s.plane();
    let mut out = Tensor::zeros(Shape::new(s.n, 1, p, s.c));
    for n in 0..s.n {
        let src = x.item(n);
        let dst = out.item_mut(n);
        for c in 0..s.c {
            for i in 0..p {
                dst[i * s.c + c] = src[c * p + i];
            }
        }
    }
    out
}

/// Inverse of [`to_tokens`] for a `h x w` grid.
pub fn from_tokens<T: Scalar>(t: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = t.shape();
    if s.c != 1 || s.h != h * w {
        return Err(Error::config(format!("from_tokens: {s} is not a token matrix for a {h}x{w} grid")));
    }
    let c = s.w;
    let p = h * w;
    let mut out = Tensor::zeros(Shape::new(s.n, c, h, w));
    for n in 0..s.n {
        let src = t.item(n);
        let dst = out.item_mut(n);
        for i in 0..p {
            for ch in 0..c {
                dst[ch * p + i] = src[i * c + ch];
            }
        }
    }
    Ok(out)
}

/// Interval `[floor(i*len/p), floor((i+1)*len/p))` of adaptive pooling cell `i`.
pub fn pool_interval(i: usize, len: usize, p: usize) -> (usize, usize) {
    (i * len / p, (i + 1) * len / p)
}

pub fn adaptive_avg_pool_forward<T: Scalar>(x: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if p == 0 || p > s.h || p > s.w {
        return Err(Error::config(format!("adaptive pool size {p} does not fit a {}x{} map", s.h, s.w)));
    }
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, p, p));
    for n in 0..s.n {
        for c in 0..s.c {
            for i in 0..p {
                let (y0, y1) = pool_interval(i, s.h, p);
                for j in 0..p {
                    let (x0, x1) = pool_interval(j, s.w, p);
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            acc += x.at(n, c, y, xx);
                        }
                    }
                    out.set(n, c, i, j, acc / T::from_usize_c((y1 - y0) * (x1 - x0)));
                }
            }
        }
    }
    Ok(out)
}

pub fn adaptive_avg_pool_backward<T: Scalar>(input_shape: Shape, dy: &Tensor<T>) -> Tensor<T> {
    let s = input_shape;
    let p = dy.shape().h;
    let mut dx = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            for i in 0..p {
                let (y0, y1) = pool_interval(i, s.h, p);
                for j in 0..p {
                    let (x0, x1) = pool_interval(j, s.w, p);
                    let g = dy.at(n, c, i, j) / T::from_usize_c((y1 - y0) * (x1 - x0));
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            let o = dx.offset(n, c, y, xx);
                            dx.data_mut()[o] += g;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Concatenation along axis 1 (channels) or 2 (rows).
pub fn concat_forward<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::config("concat of zero tensors"))?.shape();
    if axis != 1 && axis != 2 {
        return Err(Error::config(format!("concat along unsupported axis {axis}")));
    }
    let mut dims = first.dims();
    dims[axis] = 0;
    for t in parts {
        let d = t.shape().dims();
        for k in 0..4 {
            if k != axis && d[k] != first.dims()[k] {
                return Err(Error::config(format!("concat: {} vs {}", t.shape(), first)));
            }
        }
        dims[axis] += d[axis];
    }
    let shape = Shape::from_dims(dims);
    let mut data = Vec::with_capacity(shape.numel());
    // with axis 1 or 2 every part contributes one contiguous block per outer index
    let outer = if axis == 1 { first.n } else { first.n * first.c };
    for o in 0..outer {
        for t in parts {
            let block = t.numel() / outer;
            data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
        }
    }
    Tensor::from_vec(shape, data)
}

/// Splits an upstream gradient back into the concatenated parts' shapes.
pub fn concat_backward<T: Scalar>(shapes: &[Shape], axis: usize, dy: &Tensor<T>) -> Vec<Tensor<T>> {
    let first = shapes[0];
    let outer = if axis == 1 { first.n } else { first.n * first.c };
    let mut parts: Vec<Vec<T>> = shapes.iter().map(|s| Vec::with_capacity(s.numel())).collect();
    let mut pos = 0;
    for _ in 0..outer {
        for (k, s) in shapes.iter().enumerate() {
            let block = s.numel() / outer;
            parts[k].extend_from_slice(&dy.data()[pos..pos + block]);
            pos += block;
        }
    }
    parts
        .into_iter()
        .zip(shapes)
        .map(|(d, &s)| Tensor::from_vec(s, d).expect("split sizes add up"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: u64, len: usize) -> Vec<f64> {
        let mut s = seed;
        (0..len)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn output_size_formula() {
        let g = ConvGeom { kernel: (3, 3), stride: (2, 1), dilation: (2, 1), padding: (1, 0) };
        // h: floor((9 + 2 - 4 - 1)/2) + 1 = 4 ; w: floor((7 - 2 - 1)/1) + 1 = 5
        assert_eq!(g.output_size(9, 7).unwrap(), (4, 5));
        assert!(ConvGeom::tiled(8).output_size(4, 4).is_err());
    }

    #[test]
    fn tiled_conv_floors_partial_tiles() {
        let g = ConvGeom::tiled(4);
        assert_eq!(g.output_size(10, 13).unwrap(), (2, 3));
    }

    #[test]
    fn pointwise_fast_path_matches_general_path() {
        let x = Tensor::from_vec(Shape::new(2, 3, 4, 5), lcg(1, 120)).unwrap();
        let w = Tensor::from_vec(Shape::new(4, 3, 1, 1), lcg(2, 12)).unwrap();
        let b = lcg(3, 4);
        let fast = conv2d_forward(&x, &w, Some(&b), &ConvGeom::pointwise()).unwrap();
        // same product through the padded im2col route: 1x1 kernel, pad 0 but dilation 2 (irrelevant for k=1)
        let general = ConvGeom { kernel: (1, 1), stride: (1, 1), dilation: (2, 2), padding: (0, 0) };
        let slow = conv2d_forward(&x, &w, Some(&b), &general).unwrap();
        assert!(fast.max_abs_diff(&slow) < 1e-14);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 2, 4, 4));
        let w = Tensor::<f64>::zeros(Shape::new(1, 3, 3, 3));
        assert!(matches!(conv2d_forward(&x, &w, None, &ConvGeom::same(3)), Err(Error::Config(_))));
    }

    #[test]
    fn concat_round_trip_axis1_and_axis2() {
        let a = Tensor::from_vec(Shape::new(2, 1, 3, 2), lcg(4, 12)).unwrap();
        let b = Tensor::from_vec(Shape::new(2, 1, 1, 2), lcg(5, 4)).unwrap();
        let c = concat_forward(&[&a, &b], 2).unwrap();
        assert_eq!(c.shape(), Shape::new(2, 1, 4, 2));
        assert_eq!(c.at(1, 0, 3, 1), b.at(1, 0, 0, 1));
        let parts = concat_backward(&[a.shape(), b.shape()], 2, &c);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);

        let d = Tensor::from_vec(Shape::new(2, 2, 2, 2), lcg(6, 16)).unwrap();
        let e = Tensor::from_vec(Shape::new(2, 3, 2, 2), lcg(7, 24)).unwrap();
        let f = concat_forward(&[&d, &e], 1).unwrap();
        assert_eq!(f.at(1, 4, 1, 0), e.at(1, 2, 1, 0));
        assert_eq!(f.at(1, 1, 0, 1), d.at(1, 1, 0, 1));
    }

    #[test]
    fn tokens_round_trip() {
        let x = Tensor::from_vec(Shape::new(2, 3, 2, 4), lcg(8, 48)).unwrap();
        let t = to_tokens(&x);
        assert_eq!(t.at(1, 0, 5, 2), x.at(1, 2, 1, 1));
        assert_eq!(from_tokens(&t, 2, 4).unwrap(), x);
    }

    #[test]
    fn pool_intervals_partition_axis() {
        for len in 1..20 {
            for p in 1..=len {
                let mut next = 0;
                for i in 0..p {
                    let (a, b) = pool_interval(i, len, p);
                    assert_eq!(a, next);
                    assert!(b > a);
                    next = b;
                }
                assert_eq!(next, len);
            }
        }
    }
}
