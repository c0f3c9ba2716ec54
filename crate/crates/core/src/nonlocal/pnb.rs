use crate::error::{Error, Result};
use crate::layers::{join, ConvInit, ConvLayer, Init, Module, Param};
use crate::ops::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

use super::{attend, eager, AttentionDump};

/// Pyramid non-local block hyperparameters.
///
/// Scale `s` embeds references and values with a convolution whose kernel and
/// stride are both `2^s`. Scale 0 (kernel = stride = 1) is accepted and turns
/// the block into a plain non-local block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PnbConfig {
    pub d: usize,
    pub m: usize,
    pub n: usize,
    pub scales: Vec<u32>,
}

impl PnbConfig {
    pub const DEFAULT_SCALES: [u32; 3] = [1, 2, 3];

    pub fn new(d: usize, m: usize, n: usize) -> Self {
        PnbConfig { d, m, n, scales: Self::DEFAULT_SCALES.to_vec() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.m == 0 || self.n == 0 {
            return Err(Error::config(format!("pnb dims must be positive, got {self:?}")));
        }
        if self.scales.is_empty() {
            return Err(Error::config("pnb needs at least one scale"));
        }
        if self.scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!("pnb scales must be strictly increasing, got {:?}", self.scales)));
        }
        if self.scales.iter().any(|&s| s > 16) {
            return Err(Error::config(format!("pnb scale out of range: {:?}", self.scales)));
        }
        Ok(())
    }

    pub fn max_stride(&self) -> usize {
        self.scales.iter().map(|&s| 1usize << s).max().unwrap_or(1)
    }
}

/// Kernel = stride = `k`, zero-padded symmetrically so partial tiles at the border still count.
pub fn pyramid_geom(k: usize, h: usize, w: usize) -> ConvGeom {
    let pad = |len: usize| {
        let total = len.div_ceil(k) * k - len;
        total.div_ceil(2)
    };
    ConvGeom { kernel: (k, k), stride: (k, k), dilation: (1, 1), padding: (pad(h), pad(w)) }
}

/// Strided reference/value embeddings of one pyramid scale.
#[derive(Debug, Clone)]
pub struct PyramidScale<T> {
    pub scale: u32,
    pub phi: ConvLayer<T>,
    pub g: ConvLayer<T>,
}

impl<T: Scalar> PyramidScale<T> {
    pub fn stride(&self) -> usize {
        1 << self.scale
    }

    fn embed(&self, tape: &mut Tape<T>, layer: &ConvLayer<T>, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        let k = self.stride();
        if k > s.h && k > s.w {
            return Err(Error::config(format!(
                "pyramid stride {k} exceeds both spatial dims of a {}x{} map",
                s.h, s.w
            )));
        }
        let w = tape.param(&layer.weight)?;
        let b = match &layer.bias {
            Some(b) => Some(tape.param(b)?),
            None => None,
        };
        tape.conv2d(x, w, b, pyramid_geom(k, s.h, s.w))
    }
}

#[derive(Debug, Clone)]
pub struct Pnb<T> {
    pub config: PnbConfig,
    pub theta: ConvLayer<T>,
    pub scales: Vec<PyramidScale<T>>,
    pub psi: ConvLayer<T>,
}

impl<T: Scalar> Pnb<T> {
    pub fn new(name: &str, config: PnbConfig, init: Init) -> Result<Self> {
        config.validate()?;
        let PnbConfig { d, m, n, .. } = config;
        let scales = config
            .scales
            .iter()
            .map(|&s| {
                let k = 1usize << s;
                let geom = ConvGeom::tiled(k);
                let base = join(name, &format!("scale{s}"));
                PyramidScale {
                    scale: s,
                    phi: ConvLayer::new(&join(&base, "phi"), d, m, geom, true, ConvInit::FanIn, init),
                    g: ConvLayer::new(&join(&base, "g"), d, n, geom, true, ConvInit::FanIn, init),
                }
            })
            .collect();
        let pw = ConvGeom::pointwise();
        let fused = n * config.scales.len();
        Ok(Pnb {
            theta: ConvLayer::new(&join(name, "theta"), d, m, pw, true, ConvInit::FanIn, init),
            scales,
            psi: ConvLayer::new(&join(name, "psi"), fused, d, pw, true, ConvInit::Zero, init),
            config,
        })
    }

    fn check_input(&self, s: Shape) -> Result<()> {
        if s.c != self.config.d {
            return Err(Error::config(format!("pnb: input has {} channels, block expects {}", s.c, self.config.d)));
        }
        Ok(())
    }

    /// Returns `(output, psi_branch)`.
    pub fn forward_parts(&self, tape: &mut Tape<T>, x: Var) -> Result<(Var, Var)> {
        let s = tape.shape(x);
        self.check_input(s)?;
        let q = self.theta.forward(tape, x)?;
        let q = tape.to_tokens(q)?;
        let mut enhanced = Vec::with_capacity(self.scales.len());
        for sc in &self.scales {
            let k = sc.embed(tape, &sc.phi, x)?;
            let k = tape.to_tokens(k)?;
            let v = sc.embed(tape, &sc.g, x)?;
            let v = tape.to_tokens(v)?;
            let e = attend(tape, q, k, v)?;
            enhanced.push(tape.from_tokens(e, s.h, s.w)?);
        }
        let fused = if enhanced.len() == 1 { enhanced[0] } else { tape.concat(&enhanced, 1)? };
        let branch = self.psi.forward(tape, fused)?;
        let out = tape.add(branch, x)?;
        Ok((out, branch))
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        Ok(self.forward_parts(tape, x)?.0)
    }

    /// Per-scale softmax rows of the query at `pixel`, one dump per scale.
    pub fn dump_attention(&self, f: &Tensor<T>, pixel: (usize, usize)) -> Result<Vec<AttentionDump<T>>> {
        let s = f.shape();
        self.check_input(s)?;
        let (py, px) = pixel;
        if py >= s.h || px >= s.w {
            return Err(Error::config(format!("pixel ({py}, {px}) outside a {}x{} map", s.h, s.w)));
        }
        if s.n != 1 {
            return Err(Error::config("attention dumps take a single image"));
        }
        let mut tape = Tape::new();
        let x = tape.input(f.clone())?;
        let q = self.theta.forward(&mut tape, x)?;
        let q = tape.value(q);
        let query: Vec<T> = (0..self.config.m).map(|c| q.at(0, c, py, px)).collect();
        let qrow = Tensor::matrix(1, self.config.m, query)?;
        let mut dumps = Vec::with_capacity(self.scales.len());
        for sc in &self.scales {
            let kv = sc.embed(&mut tape, &sc.phi, x)?;
            let keys = tape.value(kv);
            let ks = keys.shape();
            let tokens = ops::to_tokens(keys);
            let logits = ops::matmul_forward(&qrow, false, &tokens, true)?;
            let weights = ops::softmax_rows_forward(&logits)?;
            dumps.push(AttentionDump {
                scale: sc.scale,
                stride: sc.stride(),
                pixel,
                height: ks.h,
                width: ks.w,
                weights: weights.into_vec(),
            });
        }
        Ok(dumps)
    }
}

impl<T: Scalar> Module<T> for Pnb<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.theta.visit_params(&join(prefix, "theta"), f);
        for sc in &self.scales {
            let base = join(prefix, &format!("scale{}", sc.scale));
            sc.phi.visit_params(&join(&base, "phi"), f);
            sc.g.visit_params(&join(&base, "g"), f);
        }
        self.psi.visit_params(&join(prefix, "psi"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.theta.visit_params_mut(&join(prefix, "theta"), f);
        for sc in &mut self.scales {
            let base = join(prefix, &format!("scale{}", sc.scale));
            sc.phi.visit_params_mut(&join(&base, "phi"), f);
            sc.g.visit_params_mut(&join(&base, "g"), f);
        }
        self.psi.visit_params_mut(&join(prefix, "psi"), f);
    }
}

pub fn pnb_forward<T: Scalar>(f: &Tensor<T>, block: &Pnb<T>) -> Result<Tensor<T>> {
    eager(f, |tape, x| block.forward(tape, x))
}

pub fn dump_attention<T: Scalar>(f: &Tensor<T>, block: &Pnb<T>, pixel: (usize, usize)) -> Result<Vec<AttentionDump<T>>> {
    block.dump_attention(f, pixel)
}
