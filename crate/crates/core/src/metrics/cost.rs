//! Analytic operation and memory counts for the backbone and its attention
//! variants.
//!
//! Counting rules: a convolution costs `out_elems * in_c * kh * kw` MACs;
//! attention costs `q * r * m` for the logits plus `q * r * n` for the
//! aggregation; softmax is charged 5 operations per element, batch norm 2,
//! ReLU, residual adds and pooling 1 per element read. One MAC is two FLOPs.

use std::fmt::Write as _;

use crate::error::Result;
use crate::model::{NonLocalKind, PnenConfig, DRB_DILATIONS};
use crate::nonlocal::pyramid_geom;
use crate::ops::ConvGeom;
use crate::tensor::Shape;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Backbone,
    Attention,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostRow {
    pub name: String,
    pub op: &'static str,
    pub component: Component,
    pub macs: u64,
    pub params: u64,
    /// Elements of the layer's output tensor.
    pub activations: u64,
}

/// Whether the peak-memory estimate keeps every activation for a backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemoryMode {
    /// Sequential execution, intermediate tensors freed once consumed.
    Inference,
    /// All activations retained plus one gradient buffer of the same size each.
    Training,
}

#[derive(Debug, Clone)]
pub struct CostReport {
    pub title: String,
    pub input: Shape,
    pub dtype_width: usize,
    pub rows: Vec<CostRow>,
    /// `(name, elements)` of every attention matrix.
    pub attention_matrices: Vec<(String, u64)>,
    /// Peak concurrently-live elements under sequential inference.
    pub inference_peak: u64,
}

impl CostReport {
    pub fn total_macs(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }

    pub fn total_flops(&self) -> u64 {
        2 * self.total_macs()
    }

    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_activations(&self) -> u64 {
        self.rows.iter().map(|r| r.activations).sum()
    }

    pub fn attention_elements(&self) -> u64 {
        self.attention_matrices.iter().map(|a| a.1).sum()
    }

    pub fn attention_macs(&self) -> u64 {
        self.rows.iter().filter(|r| r.component == Component::Attention).map(|r| r.macs).sum()
    }

    /// Activation elements produced inside attention blocks; all are retained for training.
    pub fn attention_memory(&self) -> u64 {
        self.rows.iter().filter(|r| r.component == Component::Attention).map(|r| r.activations).sum()
    }

    pub fn peak_elements(&self, mode: MemoryMode) -> u64 {
        match mode {
            MemoryMode::Inference => self.inference_peak,
            MemoryMode::Training => 2 * (self.input.numel() as u64 + self.total_activations()),
        }
    }

    pub fn peak_bytes(&self, mode: MemoryMode) -> u64 {
        self.peak_elements(mode) * self.dtype_width as u64
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {} on input {} ({}-byte elements)", self.title, self.input, self.dtype_width);
        let _ = writeln!(s, "# MAC = multiply-accumulate, FLOPs = 2 x MACs");
        let name_w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(5);
        let _ = writeln!(s, "{:<name_w$}  {:<10}  {:>16}  {:>12}  {:>14}", "layer", "op", "macs", "params", "activations");
        for r in &self.rows {
            let _ = writeln!(s, "{:<name_w$}  {:<10}  {:>16}  {:>12}  {:>14}", r.name, r.op, r.macs, r.params, r.activations);
        }
        let _ = writeln!(
            s,
            "{:<name_w$}  {:<10}  {:>16}  {:>12}  {:>14}",
            "total",
            "",
            self.total_macs(),
            self.total_params(),
            self.total_activations()
        );
        let _ = writeln!(s, "flops {}", self.total_flops());
        let _ = writeln!(s, "attention_macs {}", self.attention_macs());
        let _ = writeln!(s, "attention_elements {}", self.attention_elements());
        let _ = writeln!(s, "attention_memory_elements {}", self.attention_memory());
        for (mode, label) in [(MemoryMode::Inference, "inference (gradients excluded)"), (MemoryMode::Training, "training (gradients 1:1)")] {
            let _ = writeln!(s, "peak_bytes {} # {label}", self.peak_bytes(mode));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,op,component,macs,params,activations\n");
        for r in &self.rows {
            let comp = match r.component {
                Component::Backbone => "backbone",
                Component::Attention => "attention",
            };
            let _ = writeln!(s, "{},{},{comp},{},{},{}", r.name, r.op, r.macs, r.params, r.activations);
        }
        let _ = writeln!(s, "total,,,{},{},{}", self.total_macs(), self.total_params(), self.total_activations());
        s
    }
}

struct Builder {
    rows: Vec<CostRow>,
    attention: Vec<(String, u64)>,
    component: Component,
    batch: u64,
    /// Elements kept alive for later residual connections.
    held: u64,
    peak: u64,
}

impl Builder {
    fn row(&mut self, name: String, op: &'static str, macs: u64, params: u64, out: u64, inputs: u64) {
        self.peak = self.peak.max(self.held + inputs + out);
        self.rows.push(CostRow { name, op, component: self.component, macs, params, activations: out });
    }

    /// Returns the output shape.
    fn conv(&mut self, name: String, input: Shape, out_c: usize, geom: ConvGeom, bias: bool) -> Result<Shape> {
        let (oh, ow) = geom.output_size(input.h, input.w)?;
        let out = Shape::new(input.n, out_c, oh, ow);
        let (kh, kw) = geom.kernel;
        let k = (input.c * kh * kw) as u64;
        let params = out_c as u64 * k + if bias { out_c as u64 } else { 0 };
        self.row(name, "conv", out.numel() as u64 * k, params, out.numel() as u64, input.numel() as u64);
        Ok(out)
    }

    fn elementwise(&mut self, name: String, op: &'static str, shape: Shape, cost: u64, params: u64, inputs: u64) {
        let e = shape.numel() as u64;
        self.row(name, op, e * cost, params, e, inputs);
    }

    /// Logits, softmax and aggregation for `q` queries against `r` references.
    fn attention(&mut self, name: &str, q: u64, r: u64, m: u64, n: u64, live: u64) {
        let b = self.batch;
        let e = b * q * r;
        self.attention.push((name.to_string(), e));
        self.row(format!("{name}.logits"), "matmul", e * m, 0, e, live);
        self.row(format!("{name}.softmax"), "softmax", 5 * e, 0, e, live + e);
        self.row(format!("{name}.aggregate"), "matmul", e * n, 0, b * q * n, live + e);
    }
}

fn attention_block(b: &mut Builder, name: &str, cfg: &PnenConfig, kind: NonLocalKind, x: Shape) -> Result<Shape> {
    let prev = b.component;
    b.component = Component::Attention;
    let (d, m, n) = (cfg.d, cfg.m, cfg.n);
    let q = x.plane() as u64;
    let xe = x.numel() as u64;
    let pw = ConvGeom::pointwise();
    b.held += xe;
    let fused_channels = match kind {
        NonLocalKind::None => unreachable!("identity has no attention block"),
        NonLocalKind::Nlb => {
            let theta = b.conv(format!("{name}.theta"), x, m, pw, true)?;
            b.held += theta.numel() as u64;
            let phi = b.conv(format!("{name}.phi"), x, m, pw, true)?;
            let g = b.conv(format!("{name}.g"), x, n, pw, true)?;
            let live = (phi.numel() + g.numel()) as u64;
            b.attention(&format!("{name}.attn"), q, q, m as u64, n as u64, live);
            b.held -= theta.numel() as u64;
            n
        }
        NonLocalKind::Pnb => {
            let theta = b.conv(format!("{name}.theta"), x, m, pw, true)?;
            b.held += theta.numel() as u64;
            let mut outs = 0u64;
            for &s in &cfg.scales {
                let k = 1usize << s;
                let geom = pyramid_geom(k, x.h, x.w);
                let phi = b.conv(format!("{name}.scale{s}.phi"), x, m, geom, true)?;
                let g = b.conv(format!("{name}.scale{s}.g"), x, n, geom, true)?;
                let live = (phi.numel() + g.numel()) as u64;
                b.attention(&format!("{name}.scale{s}"), q, phi.plane() as u64, m as u64, n as u64, live);
                let o = b.batch * q * n as u64;
                outs += o;
                b.held += o;
            }
            b.held -= outs;
            b.held -= theta.numel() as u64;
            let fused = Shape::new(x.n, n * cfg.scales.len(), x.h, x.w);
            b.elementwise(format!("{name}.concat"), "concat", fused, 0, 0, outs);
            n * cfg.scales.len()
        }
        NonLocalKind::Apnb => {
            let theta = b.conv(format!("{name}.theta"), x, m, pw, true)?;
            b.held += theta.numel() as u64;
            let phi = b.conv(format!("{name}.phi"), x, m, pw, true)?;
            b.held += phi.numel() as u64;
            let g = b.conv(format!("{name}.g"), x, n, pw, true)?;
            b.held += g.numel() as u64;
            let tokens: usize = cfg.pool_sizes.iter().map(|p| p * p).sum();
            for &p in &cfg.pool_sizes {
                let (pe, ge) = (phi.numel() as u64, g.numel() as u64);
                b.row(format!("{name}.pool{p}.phi"), "avgpool", pe, 0, (x.n * m * p * p) as u64, pe);
                b.row(format!("{name}.pool{p}.g"), "avgpool", ge, 0, (x.n * n * p * p) as u64, ge);
            }
            b.held -= (phi.numel() + g.numel()) as u64;
            let live = (x.n * (m + n) * tokens) as u64;
            b.attention(&format!("{name}.attn"), q, tokens as u64, m as u64, n as u64, live);
            b.held -= theta.numel() as u64;
            n
        }
    };
    let branch = Shape::new(x.n, fused_channels, x.h, x.w);
    let out = b.conv(format!("{name}.psi"), branch, d, pw, true)?;
    b.held -= xe;
    b.elementwise(format!("{name}.residual"), "add", out, 1, 0, xe + out.numel() as u64);
    b.component = prev;
    Ok(out)
}

fn drb(b: &mut Builder, name: &str, x: Shape) -> Result<Shape> {
    let mut cur = x;
    for (i, &dil) in DRB_DILATIONS.iter().enumerate() {
        let base = format!("{name}.group{i}");
        let xe = cur.numel() as u64;
        b.held += xe;
        let geom = ConvGeom::dilated(3, dil);
        let h = b.conv(format!("{base}.conv1"), cur, x.c, geom, true)?;
        b.elementwise(format!("{base}.bn"), "batchnorm", h, 2, 2 * h.c as u64, h.numel() as u64);
        b.elementwise(format!("{base}.relu"), "relu", h, 1, 0, h.numel() as u64);
        let h = b.conv(format!("{base}.conv2"), h, x.c, geom, true)?;
        b.held -= xe;
        b.elementwise(format!("{base}.residual"), "add", h, 1, 0, xe + h.numel() as u64);
        cur = h;
    }
    Ok(cur)
}

fn builder(input: Shape) -> Builder {
    Builder { rows: Vec::new(), attention: Vec::new(), component: Component::Backbone, batch: input.n as u64, held: 0, peak: 0 }
}

fn finish(b: Builder, title: String, input: Shape, dtype_width: usize) -> CostReport {
    CostReport { title, input, dtype_width, rows: b.rows, attention_matrices: b.attention, inference_peak: b.peak }
}

/// Costs of one attention block of `kind` on a `d`-channel feature map.
pub fn count_block_costs(cfg: &PnenConfig, kind: NonLocalKind, features: Shape, dtype_width: usize) -> Result<CostReport> {
    let mut cfg = cfg.clone();
    cfg.nonlocal = kind;
    cfg.validate()?;
    let mut b = builder(features);
    if kind != NonLocalKind::None {
        attention_block(&mut b, kind.name(), &cfg, kind, features)?;
    }
    Ok(finish(b, format!("{} block", kind.name()), features, dtype_width))
}

/// Costs of the full network described by `cfg` on images of shape `input`.
pub fn count_costs(cfg: &PnenConfig, input: Shape, dtype_width: usize) -> Result<CostReport> {
    cfg.validate()?;
    let mut b = builder(input);
    let xe = input.numel() as u64;
    b.held += xe;
    let mut f = b.conv("entry".into(), input, cfg.d, ConvGeom::same(3), true)?;
    for gi in 0..cfg.groups {
        let name = format!("group{gi}");
        f = drb(&mut b, &format!("{name}.drb"), f)?;
        if cfg.nonlocal != NonLocalKind::None {
            f = attention_block(&mut b, &format!("{name}.attn"), cfg, cfg.nonlocal, f)?;
        }
        let fe = f.numel() as u64;
        b.held += fe;
        let e = format!("exit{gi}");
        let h = b.conv(format!("{e}.conv0"), f, cfg.d, ConvGeom::same(3), true)?;
        b.elementwise(format!("{e}.relu0"), "relu", h, 1, 0, h.numel() as u64);
        let h = b.conv(format!("{e}.conv1"), h, cfg.d, ConvGeom::same(3), true)?;
        b.elementwise(format!("{e}.relu1"), "relu", h, 1, 0, h.numel() as u64);
        let r = b.conv(format!("{e}.conv2"), h, cfg.c, ConvGeom::same(3), true)?;
        b.held -= fe;
        b.elementwise(format!("{e}.residual"), "add", r, 1, 0, xe + r.numel() as u64);
        b.elementwise(format!("fusion{gi}"), "scale_add", r, 2, 1, 2 * r.numel() as u64);
        b.held += if gi == 0 { r.numel() as u64 } else { 0 };
    }
    Ok(finish(b, format!("pnen ({})", cfg.nonlocal.name()), input, dtype_width))
}

/// Reports for the network with each attention variant, in the order none, nlb, apnb, pnb.
pub fn bench_variants(cfg: &PnenConfig, input: Shape, dtype_width: usize) -> Result<Vec<CostReport>> {
    NonLocalKind::ALL
        .iter()
        .map(|&kind| {
            let mut c = cfg.clone();
            c.nonlocal = kind;
            count_costs(&c, input, dtype_width)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Module;
    use crate::model::PnenModel;

    fn small() -> PnenConfig {
        PnenConfig { c: 3, d: 8, m: 4, n: 2, scales: vec![1, 2], groups: 2, nonlocal: NonLocalKind::Pnb, pool_sizes: vec![1, 2] }
    }

    #[test]
    fn single_pointwise_conv_is_one_mac_per_output() {
        let mut b = builder(Shape::new(1, 1, 4, 4));
        b.conv("c".into(), Shape::new(1, 1, 4, 4), 1, ConvGeom::pointwise(), false).unwrap();
        assert_eq!(b.rows[0].macs, 16);
    }

    #[test]
    fn parameter_totals_match_the_model() {
        for kind in NonLocalKind::ALL {
            let mut cfg = small();
            cfg.nonlocal = kind;
            let model = PnenModel::<f32>::new(cfg.clone(), 0).unwrap();
            let r = count_costs(&cfg, Shape::new(1, 3, 16, 16), 4).unwrap();
            assert_eq!(r.total_params(), model.param_count() as u64, "{kind:?}");
        }
    }

    #[test]
    fn attention_ratio_on_divisible_input() {
        let cfg = PnenConfig::default();
        let s = Shape::new(1, 64, 96, 96);
        let nlb = count_block_costs(&cfg, NonLocalKind::Nlb, s, 4).unwrap();
        let pnb = count_block_costs(&cfg, NonLocalKind::Pnb, s, 4).unwrap();
        assert_eq!(pnb.attention_elements() * 64, nlb.attention_elements() * 21);
    }

    #[test]
    fn csv_has_total_line() {
        let r = count_costs(&small(), Shape::new(1, 3, 8, 8), 4).unwrap();
        let csv = r.to_csv();
        assert!(csv.lines().last().unwrap().starts_with("total,,,"));
        assert!(r.to_text().contains("attention_elements"));
        assert!(r.peak_elements(MemoryMode::Training) > r.peak_elements(MemoryMode::Inference));
    }
}
