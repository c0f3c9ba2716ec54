use crate::error::{Error, Result};
use crate::layers::{join, ConvInit, ConvLayer, Init, Module, Param};
use crate::ops::ConvGeom;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::{attend, eager};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApnbConfig {
    pub d: usize,
    pub m: usize,
    pub n: usize,
    pub pool_sizes: Vec<usize>,
}

impl ApnbConfig {
    pub const DEFAULT_POOLS: [usize; 4] = [1, 3, 6, 8];

    pub fn new(d: usize, m: usize, n: usize) -> Self {
        ApnbConfig { d, m, n, pool_sizes: Self::DEFAULT_POOLS.to_vec() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.m == 0 || self.n == 0 {
            return Err(Error::config(format!("apnb dims must be positive, got {self:?}")));
        }
        if self.pool_sizes.is_empty() || self.pool_sizes.contains(&0) {
            return Err(Error::config(format!("apnb pool sizes must be positive, got {:?}", self.pool_sizes)));
        }
        Ok(())
    }

    /// Total number of pooled key/value tokens.
    pub fn tokens(&self) -> usize {
        self.pool_sizes.iter().map(|p| p * p).sum()
    }
}

/// Non-local block whose keys and values are multi-size adaptive-average-pooled
/// embeddings sharing one softmax.
#[derive(Debug, Clone)]
pub struct Apnb<T> {
    pub config: ApnbConfig,
    pub theta: ConvLayer<T>,
    pub phi: ConvLayer<T>,
    pub g: ConvLayer<T>,
    pub psi: ConvLayer<T>,
}

impl<T: Scalar> Apnb<T> {
    pub fn new(name: &str, config: ApnbConfig, init: Init) -> Result<Self> {
        config.validate()?;
        let ApnbConfig { d, m, n, .. } = config;
        let pw = ConvGeom::pointwise();
        Ok(Apnb {
            theta: ConvLayer::new(&join(name, "theta"), d, m, pw, true, ConvInit::FanIn, init),
            phi: ConvLayer::new(&join(name, "phi"), d, m, pw, true, ConvInit::FanIn, init),
            g: ConvLayer::new(&join(name, "g"), d, n, pw, true, ConvInit::FanIn, init),
            psi: ConvLayer::new(&join(name, "psi"), n, d, pw, true, ConvInit::Zero, init),
            config,
        })
    }

    fn pooled_tokens(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let mut parts = Vec::with_capacity(self.config.pool_sizes.len());
        for &p in &self.config.pool_sizes {
            let pooled = tape.adaptive_avg_pool(x, p)?;
            parts.push(tape.to_tokens(pooled)?);
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            tape.concat(&parts, 2)
        }
    }

    /// Returns `(output, psi_branch)`.
    pub fn forward_parts(&self, tape: &mut Tape<T>, x: Var) -> Result<(Var, Var)> {
        let s = tape.shape(x);
        if s.c != self.config.d {
            return Err(Error::config(format!("apnb: input has {} channels, block expects {}", s.c, self.config.d)));
        }
        if let Some(&p) = self.config.pool_sizes.iter().find(|&&p| p > s.h || p > s.w) {
            return Err(Error::config(format!("apnb pool size {p} exceeds the {}x{} map", s.h, s.w)));
        }
        let q = self.theta.forward(tape, x)?;
        let q = tape.to_tokens(q)?;
        let k = self.phi.forward(tape, x)?;
        let k = self.pooled_tokens(tape, k)?;
        let v = self.g.forward(tape, x)?;
        let v = self.pooled_tokens(tape, v)?;
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

impl<T: Scalar> Module<T> for Apnb<T> {
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

pub fn apnb_forward<T: Scalar>(f: &Tensor<T>, block: &Apnb<T>) -> Result<Tensor<T>> {
    eager(f, |tape, x| block.forward(tape, x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn default_pools_give_110_tokens() {
        assert_eq!(ApnbConfig::new(64, 64, 32).tokens(), 110);
    }

    #[test]
    fn oversized_pool_is_rejected() {
        let block = Apnb::<f64>::new("a", ApnbConfig::new(2, 2, 2), Init::new(0)).unwrap();
        let f = Tensor::zeros(Shape::new(1, 2, 6, 6));
        assert!(matches!(apnb_forward(&f, &block), Err(Error::Config(_))));
    }
}
