use crate::error::{Error, Result};
use crate::layers::{join, BatchNormLayer, ConvInit, ConvLayer, Init, Module, Param};
use crate::ops::ConvGeom;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Dilation factor of each residual group in a dilated residual block.
pub const DRB_DILATIONS: [usize; 5] = [1, 2, 4, 2, 1];

/// `x + Conv2(ReLU(BN(Conv1(x))))`, both convolutions sharing one dilation.
#[derive(Debug, Clone)]
pub struct DrbGroup<T> {
    pub dilation: usize,
    pub conv1: ConvLayer<T>,
    pub norm: BatchNormLayer<T>,
    pub conv2: ConvLayer<T>,
}

impl<T: Scalar> DrbGroup<T> {
    pub fn new(name: &str, channels: usize, dilation: usize, init: Init) -> Self {
        let geom = ConvGeom::dilated(3, dilation);
        DrbGroup {
            dilation,
            conv1: ConvLayer::new(&join(name, "conv1"), channels, channels, geom, true, ConvInit::FanIn, init),
            norm: BatchNormLayer::new(channels),
            conv2: ConvLayer::new(&join(name, "conv2"), channels, channels, geom, true, ConvInit::FanIn, init),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, x)?;
        let h = self.norm.forward(tape, h)?;
        let h = tape.relu(h)?;
        let h = self.conv2.forward(tape, h)?;
        tape.add(x, h)
    }
}

impl<T: Scalar> Module<T> for DrbGroup<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.norm.visit_params(&join(prefix, "bn"), f);
        self.conv2.visit_params(&join(prefix, "conv2"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv1.visit_params_mut(&join(prefix, "conv1"), f);
        self.norm.visit_params_mut(&join(prefix, "bn"), f);
        self.conv2.visit_params_mut(&join(prefix, "conv2"), f);
    }

    fn visit_norms(&self, prefix: &str, f: &mut dyn FnMut(&str, &BatchNormLayer<T>)) {
        f(&join(prefix, "bn"), &self.norm);
    }

    fn visit_norms_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut BatchNormLayer<T>)) {
        f(&join(prefix, "bn"), &mut self.norm);
    }
}

/// Five cascaded dilated residual groups.
#[derive(Debug, Clone)]
pub struct DrbBlock<T> {
    pub channels: usize,
    pub groups: Vec<DrbGroup<T>>,
}

impl<T: Scalar> DrbBlock<T> {
    pub fn new(name: &str, channels: usize, init: Init) -> Self {
        let groups = DRB_DILATIONS
            .iter()
            .enumerate()
            .map(|(i, &d)| DrbGroup::new(&join(name, &format!("group{i}")), channels, d, init))
            .collect();
        DrbBlock { channels, groups }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if s.c != self.channels {
            return Err(Error::config(format!("drb: input has {} channels, block expects {}", s.c, self.channels)));
        }
        self.groups.iter().try_fold(x, |h, g| g.forward(tape, h))
    }

    pub fn conv_layers(&self) -> usize {
        self.groups.len() * 2
    }
}

impl<T: Scalar> Module<T> for DrbBlock<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, g) in self.groups.iter().enumerate() {
            g.visit_params(&join(prefix, &format!("group{i}")), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, g) in self.groups.iter_mut().enumerate() {
            g.visit_params_mut(&join(prefix, &format!("group{i}")), f);
        }
    }

    fn visit_norms(&self, prefix: &str, f: &mut dyn FnMut(&str, &BatchNormLayer<T>)) {
        for (i, g) in self.groups.iter().enumerate() {
            g.visit_norms(&join(prefix, &format!("group{i}")), f);
        }
    }

    fn visit_norms_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut BatchNormLayer<T>)) {
        for (i, g) in self.groups.iter_mut().enumerate() {
            g.visit_norms_mut(&join(prefix, &format!("group{i}")), f);
        }
    }
}

/// Eager DRB forward. Training-mode batch statistics are absorbed into the block.
pub fn drb_forward<T: Scalar>(f: &Tensor<T>, block: &mut DrbBlock<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.input(f.clone())?;
    let y = block.forward(&mut tape, x)?;
    block.absorb_batch_stats(&tape);
    Ok(tape.value(y).clone())
}
