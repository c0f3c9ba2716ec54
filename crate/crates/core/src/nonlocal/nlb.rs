use crate::error::{Error, Result};
use crate::layers::{join, ConvInit, ConvLayer, Init, Module, Param};
use crate::ops::ConvGeom;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::{attend, eager};

/// Channel sizes of a non-local block: input `d`, query/reference `m`, value `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NlbConfig {
    pub d: usize,
    pub m: usize,
    pub n: usize,
}

impl NlbConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.m == 0 || self.n == 0 {
            return Err(Error::config(format!("non-local dims must be positive, got {self:?}")));
        }
        Ok(())
    }
}

/// Embedded-Gaussian non-local block with full pixel-to-pixel attention.
#[derive(Debug, Clone)]
pub struct Nlb<T> {
    pub config: NlbConfig,
    pub theta: ConvLayer<T>,
    pub phi: ConvLayer<T>,
    pub g: ConvLayer<T>,
    pub psi: ConvLayer<T>,
}

impl<T: Scalar> Nlb<T> {
    pub fn new(name: &str, config: NlbConfig, init: Init) -> Result<Self> {
        config.validate()?;
        let NlbConfig { d, m, n } = config;
        let pw = ConvGeom::pointwise();
        Ok(Nlb {
            config,
            theta: ConvLayer::new(&join(name, "theta"), d, m, pw, true, ConvInit::FanIn, init),
            phi: ConvLayer::new(&join(name, "phi"), d, m, pw, true, ConvInit::FanIn, init),
            g: ConvLayer::new(&join(name, "g"), d, n, pw, true, ConvInit::FanIn, init),
            psi: ConvLayer::new(&join(name, "psi"), n, d, pw, true, ConvInit::Zero, init),
        })
    }

    /// Returns `(output, psi_branch)` so callers can inspect the residual split.
    pub fn forward_parts(&self, tape: &mut Tape<T>, x: Var) -> Result<(Var, Var)> {
        let s = tape.shape(x);
        if s.c != self.config.d {
            return Err(Error::config(format!("nlb: input has {} channels, block expects {}", s.c, self.config.d)));
        }
        let q = self.theta.forward(tape, x)?;
        let q = tape.to_tokens(q)?;
        let k = self.phi.forward(tape, x)?;
        let k = tape.to_tokens(k)?;
        let v = self.g.forward(tape, x)?;
        let v = tape.to_tokens(v)?;
        let e = attend(tape, q, k, v)?;
        let e = tape.from_tokens(e, s.h, s.w)?;
        let branch = self.psi.forward(tape, e)?;
        let out = tape.add(branch, x)?;
        Ok((out, branch))
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        Ok(self.forward_parts(tape, x)?.0)
    }
}

impl<T: Scalar> Module<T> for Nlb<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.theta.visit_params(&join(prefix, "theta"), f);
        self.phi.visit_params(&join(prefix, "phi"), f);
        self.g.visit_params(&join(prefix, "g"), f);
        self.psi.visit_params(&join(prefix, "psi"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.theta.visit_params_mut(&join(prefix, "theta"), f);
        self.phi.visit_params_mut(&join(prefix, "phi"), f);
        self.g.visit_params_mut(&join(prefix, "g"), f);
        self.psi.visit_params_mut(&join(prefix, "psi"), f);
    }
}

pub fn nlb_forward<T: Scalar>(f: &Tensor<T>, block: &Nlb<T>) -> Result<Tensor<T>> {
    eager(f, |tape, x| block.forward(tape, x))
}
