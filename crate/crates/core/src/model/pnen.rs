use crate::error::{Error, Result};
use crate::layers::{join, BatchNormLayer, ConvInit, ConvLayer, Init, Module, Param};
use crate::nonlocal::{Apnb, ApnbConfig, Nlb, NlbConfig, NonLocal, Pnb, PnbConfig};
use crate::ops::ConvGeom;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

use super::drb::DrbBlock;

/// Which attention block follows each dilated residual block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NonLocalKind {
    None,
    Nlb,
    Apnb,
    Pnb,
}

impl NonLocalKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(NonLocalKind::None),
            "nlb" => Some(NonLocalKind::Nlb),
            "apnb" => Some(NonLocalKind::Apnb),
            "pnb" => Some(NonLocalKind::Pnb),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NonLocalKind::None => "none",
            NonLocalKind::Nlb => "nlb",
            NonLocalKind::Apnb => "apnb",
            NonLocalKind::Pnb => "pnb",
        }
    }

    pub const ALL: [NonLocalKind; 4] = [NonLocalKind::None, NonLocalKind::Nlb, NonLocalKind::Apnb, NonLocalKind::Pnb];
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PnenConfig {
    /// Image channels.
    pub c: usize,
    /// Feature channels.
    pub d: usize,
    /// Query/reference embedding width.
    pub m: usize,
    /// Value embedding width.
    pub n: usize,
    pub scales: Vec<u32>,
    /// Number of DRB + attention groups.
    pub groups: usize,
    pub nonlocal: NonLocalKind,
    pub pool_sizes: Vec<usize>,
}

impl Default for PnenConfig {
    fn default() -> Self {
        PnenConfig {
            c: 3,
            d: 64,
            m: 64,
            n: 32,
            scales: PnbConfig::DEFAULT_SCALES.to_vec(),
            groups: 3,
            nonlocal: NonLocalKind::Pnb,
            pool_sizes: ApnbConfig::DEFAULT_POOLS.to_vec(),
        }
    }
}

impl PnenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c == 0 || self.d == 0 || self.groups == 0 {
            return Err(Error::config(format!("c, d and groups must be positive: {self:?}")));
        }
        match self.nonlocal {
            NonLocalKind::None => Ok(()),
            NonLocalKind::Nlb => NlbConfig { d: self.d, m: self.m, n: self.n }.validate(),
            NonLocalKind::Apnb => self.apnb().validate(),
            NonLocalKind::Pnb => self.pnb().validate(),
        }
    }

    pub fn pnb(&self) -> PnbConfig {
        PnbConfig { d: self.d, m: self.m, n: self.n, scales: self.scales.clone() }
    }

    pub fn apnb(&self) -> ApnbConfig {
        ApnbConfig { d: self.d, m: self.m, n: self.n, pool_sizes: self.pool_sizes.clone() }
    }

    /// `(key, value)` text pairs, the form used in checkpoint manifests and run configs.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        vec![
            ("c", self.c.to_string()),
            ("d", self.d.to_string()),
            ("m", self.m.to_string()),
            ("n", self.n.to_string()),
            ("scales", list(&self.scales.iter().map(|&s| s as usize).collect::<Vec<_>>())),
            ("groups", self.groups.to_string()),
            ("nonlocal", self.nonlocal.name().to_string()),
            ("pools", list(&self.pool_sizes)),
        ]
    }

    /// Overrides the field named `key`; returns `Ok(false)` for keys this type does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num(key: &str, v: &str) -> Result<usize> {
            v.trim().parse().map_err(|_| Error::config(format!("{key}: expected a non-negative integer, got `{v}`")))
        }
        fn list(key: &str, v: &str) -> Result<Vec<usize>> {
            v.split(',').filter(|s| !s.trim().is_empty()).map(|s| num(key, s)).collect()
        }
        match key {
            "c" => self.c = num(key, value)?,
            "d" => self.d = num(key, value)?,
            "m" => self.m = num(key, value)?,
            "n" => self.n = num(key, value)?,
            "groups" => self.groups = num(key, value)?,
            "scales" => {
                self.scales = list(key, value)?
                    .into_iter()
                    .map(|s| u32::try_from(s).map_err(|_| Error::config(format!("scale {s} is too large"))))
                    .collect::<Result<_>>()?
            }
            "pools" => self.pool_sizes = list(key, value)?,
            "nonlocal" => {
                self.nonlocal = NonLocalKind::parse(value.trim())
                    .ok_or_else(|| Error::config(format!("nonlocal: expected none|nlb|apnb|pnb, got `{value}`")))?
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Smallest legal image side for this configuration.
    pub fn min_side(&self) -> usize {
        match self.nonlocal {
            NonLocalKind::Pnb => self.pnb().max_stride(),
            NonLocalKind::Apnb => self.pool_sizes.iter().copied().max().unwrap_or(1),
            _ => 1,
        }
    }
}

/// Three 3x3 convolutions `d -> d -> d -> c` with ReLU after the first two.
#[derive(Debug, Clone)]
pub struct ExitNet<T> {
    pub convs: [ConvLayer<T>; 3],
}

impl<T: Scalar> ExitNet<T> {
    fn new(name: &str, d: usize, c: usize, init: Init) -> Self {
        let g = ConvGeom::same(3);
        ExitNet {
            convs: [
                ConvLayer::new(&join(name, "conv0"), d, d, g, true, ConvInit::FanIn, init),
                ConvLayer::new(&join(name, "conv1"), d, d, g, true, ConvInit::FanIn, init),
                ConvLayer::new(&join(name, "conv2"), d, c, g, true, ConvInit::FanIn, init),
            ],
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let h = self.convs[0].forward(tape, x)?;
        let h = tape.relu(h)?;
        let h = self.convs[1].forward(tape, h)?;
        let h = tape.relu(h)?;
        self.convs[2].forward(tape, h)
    }
}

impl<T: Scalar> Module<T> for ExitNet<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit_params(&join(prefix, &format!("conv{i}")), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_params_mut(&join(prefix, &format!("conv{i}")), f);
        }
    }
}

/// One DRB followed by its attention block.
#[derive(Debug, Clone)]
pub struct PnenGroup<T> {
    pub drb: DrbBlock<T>,
    pub attention: NonLocal<T>,
}

/// The full smoothing network.
#[derive(Debug, Clone)]
pub struct PnenModel<T> {
    pub config: PnenConfig,
    pub entry: ConvLayer<T>,
    pub groups: Vec<PnenGroup<T>>,
    pub exits: Vec<ExitNet<T>>,
    /// One scalar fusion weight per group.
    pub fusion: Vec<Param<T>>,
}

/// Recorded outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct PnenOutput {
    /// Fused prediction.
    pub y: Var,
    /// Per-group predictions `X + R_m`.
    pub ys: Vec<Var>,
    /// Group features `F_m` after each attention block.
    pub features: Vec<Var>,
}

impl<T: Scalar> PnenModel<T> {
    pub fn new(config: PnenConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let init = Init::new(seed);
        let PnenConfig { c, d, .. } = config;
        let entry = ConvLayer::new("entry", c, d, ConvGeom::same(3), true, ConvInit::FanIn, init);
        let mut groups = Vec::with_capacity(config.groups);
        for g in 0..config.groups {
            let name = format!("group{g}");
            let attn_name = join(&name, "attn");
            let attention = match config.nonlocal {
                NonLocalKind::None => NonLocal::Identity,
                NonLocalKind::Nlb => NonLocal::Nlb(Nlb::new(&attn_name, NlbConfig { d, m: config.m, n: config.n }, init)?),
                NonLocalKind::Apnb => NonLocal::Apnb(Apnb::new(&attn_name, config.apnb(), init)?),
                NonLocalKind::Pnb => NonLocal::Pnb(Pnb::new(&attn_name, config.pnb(), init)?),
            };
            groups.push(PnenGroup { drb: DrbBlock::new(&join(&name, "drb"), d, init), attention });
        }
        let exits = (0..config.groups).map(|g| ExitNet::new(&format!("exit{g}"), d, c, init)).collect();
        let w0 = T::one() / T::from_usize_c(config.groups);
        let fusion = (0..config.groups).map(|_| Param::new(Tensor::scalar(w0))).collect();
        Ok(PnenModel { config, entry, groups, exits, fusion })
    }

    pub fn check_input(&self, s: Shape) -> Result<()> {
        if s.c != self.config.c {
            return Err(Error::config(format!("model expects {} image channels, got {}", self.config.c, s.c)));
        }
        let side = self.config.min_side();
        if s.h < side && s.w < side || s.h.min(s.w) < self.min_apnb_side() {
            return Err(Error::config(format!(
                "a {}x{} image is too small for this model (needs a side of at least {side})",
                s.h, s.w
            )));
        }
        Ok(())
    }

    fn min_apnb_side(&self) -> usize {
        match self.config.nonlocal {
            NonLocalKind::Apnb => self.config.min_side(),
            _ => 1,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<PnenOutput> {
        self.check_input(tape.shape(x))?;
        let mut f = self.entry.forward(tape, x)?;
        let mut features = Vec::with_capacity(self.groups.len());
        let mut ys = Vec::with_capacity(self.groups.len());
        for (group, exit) in self.groups.iter().zip(&self.exits) {
            f = group.drb.forward(tape, f)?;
            f = group.attention.forward(tape, f)?;
            features.push(f);
            let r = exit.forward(tape, f)?;
            ys.push(tape.add(x, r)?);
        }
        let mut y: Option<Var> = None;
        for (&ym, w) in ys.iter().zip(&self.fusion) {
            let wv = tape.param(w)?;
            let term = tape.scale_by(ym, wv)?;
            y = Some(match y {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        let y = y.expect("at least one group");
        Ok(PnenOutput { y, ys, features })
    }

    /// Features entering group `g`'s attention block (the DRB output), for attention dumps.
    pub fn attention_input(&self, x: &Tensor<T>, group: usize) -> Result<Tensor<T>> {
        if group >= self.groups.len() {
            return Err(Error::config(format!("group {group} out of range (model has {})", self.groups.len())));
        }
        self.check_input(x.shape())?;
        let mut tape = Tape::new();
        let xv = tape.input(x.clone())?;
        let mut f = self.entry.forward(&mut tape, xv)?;
        for (i, gr) in self.groups.iter().enumerate() {
            f = gr.drb.forward(&mut tape, f)?;
            if i == group {
                return Ok(tape.value(f).clone());
            }
            f = gr.attention.forward(&mut tape, f)?;
        }
        unreachable!("group index checked above")
    }

    /// Conv layers on the deepest path: entry, each group's DRB plus attention
    /// output transform, then one exit net.
    pub fn longest_conv_path(&self) -> usize {
        1 + self.groups.iter().map(|g| g.drb.conv_layers() + g.attention.depth()).sum::<usize>() + 3
    }

    /// Zeroes every attention output transform and every exit net's last
    /// convolution; afterwards each `Y_m` equals the input.
    pub fn zero_residual_outputs(&mut self) {
        for g in &mut self.groups {
            g.attention.zero_output();
        }
        for e in &mut self.exits {
            e.convs[2].weight.value.fill(T::zero());
            if let Some(b) = &mut e.convs[2].bias {
                b.value.fill(T::zero());
            }
        }
    }

    pub fn fusion_weights(&self) -> Vec<T> {
        self.fusion.iter().map(|p| p.value.data()[0]).collect()
    }

    pub fn set_fusion_weights(&mut self, w: &[T]) -> Result<()> {
        if w.len() != self.fusion.len() {
            return Err(Error::config(format!("expected {} fusion weights, got {}", self.fusion.len(), w.len())));
        }
        for (p, &v) in self.fusion.iter_mut().zip(w) {
            p.value = Tensor::scalar(v);
        }
        Ok(())
    }
}

impl<T: Scalar> Module<T> for PnenModel<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.entry.visit_params(&join(prefix, "entry"), f);
        for (i, g) in self.groups.iter().enumerate() {
            let base = join(prefix, &format!("group{i}"));
            g.drb.visit_params(&join(&base, "drb"), f);
            g.attention.visit_params(&join(&base, "attn"), f);
        }
        for (i, e) in self.exits.iter().enumerate() {
            e.visit_params(&join(prefix, &format!("exit{i}")), f);
        }
        for (i, w) in self.fusion.iter().enumerate() {
            f(&join(prefix, &format!("fusion{i}")), w);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.entry.visit_params_mut(&join(prefix, "entry"), f);
        for (i, g) in self.groups.iter_mut().enumerate() {
            let base = join(prefix, &format!("group{i}"));
            g.drb.visit_params_mut(&join(&base, "drb"), f);
            g.attention.visit_params_mut(&join(&base, "attn"), f);
        }
        for (i, e) in self.exits.iter_mut().enumerate() {
            e.visit_params_mut(&join(prefix, &format!("exit{i}")), f);
        }
        for (i, w) in self.fusion.iter_mut().enumerate() {
            f(&join(prefix, &format!("fusion{i}")), w);
        }
    }

    fn visit_norms(&self, prefix: &str, f: &mut dyn FnMut(&str, &BatchNormLayer<T>)) {
        for (i, g) in self.groups.iter().enumerate() {
            g.drb.visit_norms(&join(prefix, &format!("group{i}.drb")), f);
        }
    }

    fn visit_norms_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut BatchNormLayer<T>)) {
        for (i, g) in self.groups.iter_mut().enumerate() {
            g.drb.visit_norms_mut(&join(prefix, &format!("group{i}.drb")), f);
        }
    }
}

/// Records the deep-supervision loss
/// `(|G - Y|^2 + sum_m |G - Y_m|^2) / (h w c)`, averaged over the batch.
pub fn loss_on_tape<T: Scalar>(tape: &mut Tape<T>, out: &PnenOutput, target: &Tensor<T>) -> Result<Var> {
    let s = target.shape();
    let mut total = tape.squared_error(out.y, target)?;
    for &ym in &out.ys {
        let e = tape.squared_error(ym, target)?;
        total = tape.add(total, e)?;
    }
    tape.scale(total, T::one() / T::from_usize_c(s.numel()))
}

/// Eager forward: `(Y, [Y_1 .. Y_M])`.
pub fn pnen_forward<T: Scalar>(x: &Tensor<T>, model: &PnenModel<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone())?;
    let out = model.forward(&mut tape, xv)?;
    let y = tape.value(out.y).clone();
    let ys = out.ys.iter().map(|&v| tape.value(v).clone()).collect();
    Ok((y, ys))
}

/// Deep-supervision loss on plain tensors.
pub fn pnen_loss<T: Scalar>(y: &Tensor<T>, ys: &[Tensor<T>], target: &Tensor<T>) -> Result<T> {
    let se = |a: &Tensor<T>| -> Result<T> {
        a.expect_shape(target.shape(), "pnen_loss")?;
        Ok(a.data().iter().zip(target.data()).map(|(&p, &g)| (p - g) * (p - g)).sum())
    };
    let mut total = se(y)?;
    for ym in ys {
        total += se(ym)?;
    }
    Ok(total / T::from_usize_c(target.numel()))
}
