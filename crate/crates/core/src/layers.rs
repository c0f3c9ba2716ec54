//! Learnable layers and their parameters.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Identity of a parameter inside a tape; unique per process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamKey(u64);

static NEXT_KEY: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone)]
pub struct Param<T> {
    key: ParamKey,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param { key: ParamKey(NEXT_KEY.fetch_add(1, Ordering::Relaxed)), value, grad }
    }

    pub fn key(&self) -> ParamKey {
        self.key
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// Read access to a module's parameters and persistent buffers, by hierarchical name.
pub trait Module<T: Scalar> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    /// Every batch-norm layer inside the module.
    fn visit_norms(&self, _prefix: &str, _f: &mut dyn FnMut(&str, &BatchNormLayer<T>)) {}

    fn visit_norms_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut BatchNormLayer<T>)) {}

    /// Folds batch statistics recorded on `tape` into the running estimates.
    fn absorb_batch_stats(&mut self, tape: &Tape<T>) {
        self.visit_norms_mut("", &mut |_, bn| bn.absorb(tape));
    }

    fn set_norm_mode(&mut self, mode: NormMode) {
        self.visit_norms_mut("", &mut |_, bn| bn.mode = mode);
    }

    fn param_count(&self) -> usize {
        let mut total = 0;
        self.visit_params("", &mut |_, p| total += p.numel());
        total
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Deterministic parameter initialiser: every named tensor draws from its own
/// stream derived from `(seed, name)`, so adding a layer never perturbs the
/// initial values of the others.
#[derive(Debug, Clone, Copy)]
pub struct Init {
    pub seed: u64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { seed }
    }

    pub fn rng(&self, name: &str) -> ChaCha8Rng {
        // FNV-1a over the name, mixed with the seed
        let mut h: u64 = 0xcbf29ce484222325;
        for b in name.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        ChaCha8Rng::seed_from_u64(h ^ self.seed.wrapping_mul(0x9e3779b97f4a7c15))
    }

    pub fn uniform<T: Scalar>(&self, name: &str, shape: Shape, bound: f64) -> Tensor<T> {
        let mut rng = self.rng(name);
        let data = (0..shape.numel()).map(|_| T::from_f64c(rng.gen_range(-bound..=bound))).collect();
        Tensor::from_vec(shape, data).expect("shape and data agree")
    }
}

/// How a convolution's weights start out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConvInit {
    /// Uniform in `±1/sqrt(fan_in)` for weights and bias.
    FanIn,
    Zero,
}

/// 2-D convolution with optional bias.
#[derive(Debug, Clone)]
pub struct ConvLayer<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub geom: ConvGeom,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn new(name: &str, in_channels: usize, out_channels: usize, geom: ConvGeom, bias: bool, init: ConvInit, seed: Init) -> Self {
        let (kh, kw) = geom.kernel;
        let wshape = Shape::new(out_channels, in_channels, kh, kw);
        let fan_in = (in_channels * kh * kw).max(1) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let (weight, b) = match init {
            ConvInit::FanIn => (
                seed.uniform(&join(name, "weight"), wshape, bound),
                seed.uniform(&join(name, "bias"), Shape::new(1, 1, 1, out_channels), bound),
            ),
            ConvInit::Zero => (Tensor::zeros(wshape), Tensor::zeros(Shape::new(1, 1, 1, out_channels))),
        };
        ConvLayer {
            in_channels,
            out_channels,
            geom,
            weight: Param::new(weight),
            bias: bias.then(|| Param::new(b)),
        }
    }

    /// Layer from explicit weights `(out, in, kh, kw)` and optional bias values.
    pub fn from_weights(weight: Tensor<T>, bias: Option<Vec<T>>, geom: ConvGeom) -> Result<Self> {
        let s = weight.shape();
        if (s.h, s.w) != geom.kernel {
            return Err(Error::config(format!("kernel tensor {s} does not match {:?}", geom.kernel)));
        }
        let bias = match bias {
            Some(b) if b.len() != s.n => {
                return Err(Error::config(format!("bias length {} != {} outputs", b.len(), s.n)))
            }
            Some(b) => Some(Param::new(Tensor::from_vec(Shape::new(1, 1, 1, s.n), b)?)),
            None => None,
        };
        Ok(ConvLayer { in_channels: s.c, out_channels: s.n, geom, weight: Param::new(weight), bias })
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.c != self.in_channels {
            return Err(Error::config(format!(
                "conv2d: input has {} channels, layer expects {}",
                input.c, self.in_channels
            )));
        }
        let (oh, ow) = self.geom.output_size(input.h, input.w)?;
        Ok(Shape::new(input.n, self.out_channels, oh, ow))
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        self.output_shape(tape.shape(x))?;
        let w = tape.param(&self.weight)?;
        let b = match &self.bias {
            Some(b) => Some(tape.param(b)?),
            None => None,
        };
        tape.conv2d(x, w, b, self.geom)
    }

    pub fn macs(&self, input: Shape) -> Result<u64> {
        let out = self.output_shape(input)?;
        let (kh, kw) = self.geom.kernel;
        Ok((out.numel() * self.in_channels * kh * kw) as u64)
    }
}

impl<T: Scalar> Module<T> for ConvLayer<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Eager convolution without recording gradients.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, layer: &ConvLayer<T>) -> Result<Tensor<T>> {
    layer.output_shape(input.shape())?;
    let bias = layer.bias.as_ref().map(|b| b.value.data().to_vec());
    let y = ops::conv2d_forward(input, &layer.weight.value, bias.as_deref(), &layer.geom)?;
    y.check_finite("conv2d")?;
    Ok(y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct BatchNormLayer<T> {
    pub channels: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub epsilon: T,
    pub mode: NormMode,
}

impl<T: Scalar> BatchNormLayer<T> {
    /// Identity-initialised batch norm: gamma 1, beta 0, running stats (0, 1), momentum 0.1, eps 1e-5.
    pub fn new(channels: usize) -> Self {
        let s = Shape::new(1, 1, 1, channels);
        BatchNormLayer {
            channels,
            gamma: Param::new(Tensor::full(s, T::one())),
            beta: Param::new(Tensor::zeros(s)),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::from_f64c(0.1),
            epsilon: T::from_f64c(1e-5),
            mode: NormMode::Train,
        }
    }

    fn check(&self, input: Shape) -> Result<()> {
        if input.c != self.channels {
            return Err(Error::config(format!(
                "batchnorm: input has {} channels, layer expects {}",
                input.c, self.channels
            )));
        }
        if input.n * input.plane() == 0 {
            return Err(Error::config("batchnorm over zero elements per channel"));
        }
        Ok(())
    }

    /// Applies every batch-statistics record this layer left on `tape`, in order.
    pub fn absorb(&mut self, tape: &Tape<T>) {
        for stats in tape.batch_stats_for(self.gamma.key()) {
            self.update_running(stats);
        }
    }

    fn update_running(&mut self, stats: &ops::BatchStats<T>) {
        let m = self.momentum;
        for c in 0..self.channels {
            self.running_mean[c] = (T::one() - m) * self.running_mean[c] + m * stats.mean[c];
            self.running_var[c] = (T::one() - m) * self.running_var[c] + m * stats.var[c];
        }
    }

    /// Records the layer on the tape. In training mode the batch statistics are
    /// left on the tape; [`BatchNormLayer::absorb`] moves them into the running
    /// estimates.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        self.check(tape.shape(x))?;
        let g = tape.param(&self.gamma)?;
        let b = tape.param(&self.beta)?;
        match self.mode {
            NormMode::Train => {
                let (y, stats) = tape.batchnorm_train(x, g, b, self.epsilon)?;
                tape.note_batch_stats(self.gamma.key(), stats);
                Ok(y)
            }
            NormMode::Eval => tape.batchnorm_eval(x, g, b, &self.running_mean, &self.running_var, self.epsilon),
        }
    }
}

impl<T: Scalar> Module<T> for BatchNormLayer<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }

    fn visit_norms(&self, prefix: &str, f: &mut dyn FnMut(&str, &BatchNormLayer<T>)) {
        f(prefix, self);
    }

    fn visit_norms_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut BatchNormLayer<T>)) {
        f(prefix, self);
    }
}

/// Eager batch norm; in training mode it normalises by batch statistics and updates the running ones.
pub fn batchnorm<T: Scalar>(input: &Tensor<T>, layer: &mut BatchNormLayer<T>) -> Result<Tensor<T>> {
    layer.check(input.shape())?;
    let y = match layer.mode {
        NormMode::Train => {
            let (y, stats) =
                ops::batchnorm_train_forward(input, layer.gamma.value.data(), layer.beta.value.data(), layer.epsilon)?;
            layer.update_running(&stats);
            y
        }
        NormMode::Eval => ops::batchnorm_eval_forward(
            input,
            layer.gamma.value.data(),
            layer.beta.value.data(),
            &layer.running_mean,
            &layer.running_var,
            layer.epsilon,
        ),
    };
    y.check_finite("batchnorm")?;
    Ok(y)
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    ops::relu_forward(input)
}

/// Product of two `(B, 1, r, k)` matrix batches.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let y = ops::matmul_forward(a, false, b, false)?;
    y.check_finite("matmul")?;
    Ok(y)
}

/// Row-wise softmax over the last axis.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    ops::softmax_rows_forward(logits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape {
        Shape::new(n, c, h, w)
    }

    #[test]
    fn identity_kernel_leaves_ones() {
        let layer = ConvLayer::from_weights(Tensor::full(shape(1, 1, 1, 1), 1.0f64), Some(vec![0.0]), ConvGeom::pointwise())
            .unwrap();
        let x = Tensor::full(shape(1, 1, 3, 3), 1.0);
        assert_eq!(conv2d(&x, &layer).unwrap(), x);
    }

    #[test]
    fn quarter_kernel_stride_two_gives_block_means() {
        let layer = ConvLayer::from_weights(Tensor::full(shape(1, 1, 2, 2), 0.25f64), Some(vec![0.0]), ConvGeom::tiled(2))
            .unwrap();
        let x = Tensor::from_vec(shape(1, 1, 4, 4), (1..=16).map(|v| v as f64).collect()).unwrap();
        let y = conv2d(&x, &layer).unwrap();
        assert_eq!(y.shape(), shape(1, 1, 2, 2));
        // blocks {1,2,5,6}, {3,4,7,8}, {9,10,13,14}, {11,12,15,16}
        assert_eq!(y.data(), &[3.5, 5.5, 11.5, 13.5]);
    }

    #[test]
    fn channel_mismatch_is_config_error() {
        let layer = ConvLayer::<f64>::new("c", 3, 2, ConvGeom::same(3), true, ConvInit::FanIn, Init::new(0));
        let x = Tensor::zeros(shape(1, 2, 4, 4));
        assert!(matches!(conv2d(&x, &layer), Err(Error::Config(_))));
    }

    #[test]
    fn batchnorm_eval_identity() {
        let mut bn = BatchNormLayer::<f64>::new(2);
        bn.mode = NormMode::Eval;
        let x = Tensor::from_fn(shape(2, 2, 3, 3), |n, c, y, x| (n as f64 - c as f64) * 0.3 + (y * x) as f64);
        let y = batchnorm(&x, &mut bn).unwrap();
        let k = 1.0 / (1.0 + 1e-5f64).sqrt();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b * k).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_train_constant_input_collapses_to_beta() {
        let mut bn = BatchNormLayer::<f64>::new(1);
        bn.beta.value = Tensor::full(shape(1, 1, 1, 1), 0.7);
        let y = batchnorm(&Tensor::full(shape(2, 1, 3, 3), 4.0), &mut bn).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn batchnorm_train_hand_example() {
        let mut bn = BatchNormLayer::<f64>::new(1);
        bn.epsilon = 0.0;
        bn.gamma.value = Tensor::full(shape(1, 1, 1, 1), 2.0);
        bn.beta.value = Tensor::full(shape(1, 1, 1, 1), 1.0);
        let y = batchnorm(&Tensor::from_vec(shape(1, 1, 1, 2), vec![1.0, 3.0]).unwrap(), &mut bn).unwrap();
        assert_eq!(y.data(), &[-1.0, 3.0]);
        // running stats moved 10% toward (mean 2, biased var 1)
        assert!((bn.running_mean[0] - 0.2).abs() < 1e-15);
        assert!((bn.running_var[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn batchnorm_rejects_channel_mismatch() {
        let mut bn = BatchNormLayer::<f64>::new(3);
        assert!(batchnorm(&Tensor::zeros(shape(1, 2, 2, 2)), &mut bn).is_err());
    }

    #[test]
    fn relu_cases() {
        let x = Tensor::matrix(1, 3, vec![-1.0f64, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let pos = Tensor::matrix(1, 2, vec![0.5f64, 3.0]).unwrap();
        assert_eq!(relu(&pos), pos);
        let neg = Tensor::matrix(1, 2, vec![-0.5f64, -3.0]).unwrap();
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_small_cases() {
        let a = Tensor::matrix(1, 2, vec![1.0f64, 2.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(matmul(&eye, &m).unwrap(), m);
        assert!(matmul(&m, &m).is_err());
    }

    #[test]
    fn softmax_cases() {
        let u = softmax_rows(&Tensor::matrix(1, 4, vec![0.3f64; 4]).unwrap()).unwrap();
        assert!(u.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let p = softmax_rows(&Tensor::matrix(1, 2, vec![0.0f64, 3f64.ln()]).unwrap()).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-15 && (p.data()[1] - 0.75).abs() < 1e-15);
        let big = softmax_rows(&Tensor::matrix(1, 3, vec![1000.0f64, 1000.0, 999.0]).unwrap()).unwrap();
        assert!(big.is_finite());
        assert!((big.sum() - 1.0).abs() < 1e-12);
        assert!(softmax_rows(&Tensor::matrix(1, 2, vec![f64::NAN, 0.0]).unwrap()).is_err());
    }

    #[test]
    fn init_streams_are_independent_of_other_names() {
        let init = Init::new(9);
        let a: Tensor<f64> = init.uniform("block.a", shape(1, 1, 2, 2), 1.0);
        let _b: Tensor<f64> = init.uniform("block.b", shape(1, 1, 2, 2), 1.0);
        let a2: Tensor<f64> = init.uniform("block.a", shape(1, 1, 2, 2), 1.0);
        assert_eq!(a, a2);
        assert_ne!(a, init.uniform("block.b", shape(1, 1, 2, 2), 1.0));
    }
}
