//! Central finite-difference checks of the tape's gradients.
//!
//! Each check builds a scalar loss (the recorded output itself if it has one
//! element, otherwise its squared error against a fixed random target),
//! perturbs sampled entries of every parameter and input by `±step`, and
//! compares `(L(+) - L(-)) / 2 step` with the backward pass using
//! `|a - n| / max(|a|, |n|, floor * max(1, |L|))`. Scaling the floor by the
//! loss keeps round-off in `L(+) - L(-)` from dominating gradients that are
//! exactly zero, such as a bias feeding a training-mode batch norm. Samples whose perturbation flips any
//! ReLU are skipped, since the loss is not differentiable there.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::layers::{ConvInit, ConvLayer, Init, Module, Param};
use crate::model::{loss_on_tape, DrbBlock, NonLocalKind, PnenConfig, PnenModel};
use crate::nonlocal::{Apnb, ApnbConfig, Nlb, NlbConfig, Pnb, PnbConfig};
use crate::ops::ConvGeom;
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub step: f64,
    /// Lower bound of the relative-error denominator, per unit of loss.
    pub floor: f64,
    /// Entries sampled per tensor.
    pub samples: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl GradcheckOptions {
    pub const PER_OP_TOLERANCE: f64 = 1e-4;
    pub const END_TO_END_TOLERANCE: f64 = 1e-3;

    pub fn per_op(seed: u64) -> Self {
        GradcheckOptions { step: 1e-5, floor: 1e-6, samples: 6, tolerance: Self::PER_OP_TOLERANCE, seed }
    }

    pub fn end_to_end(seed: u64) -> Self {
        GradcheckOptions { samples: 2, tolerance: Self::END_TO_END_TOLERANCE, ..Self::per_op(seed) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
    pub tolerance: f64,
}

impl GradcheckResult {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err < self.tolerance
    }

    pub fn line(&self) -> String {
        format!(
            "{:<24} {} max_rel_err={:.3e} tol={:.0e} checked={} skipped={}",
            self.name,
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_rel_err,
            self.tolerance,
            self.checked,
            self.skipped
        )
    }
}

/// A bare list of tensors acting as a module.
#[derive(Debug, Clone, Default)]
pub struct ParamList(pub Vec<Param<f64>>);

impl Module<f64> for ParamList {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<f64>)) {
        for (i, p) in self.0.iter().enumerate() {
            f(&format!("{prefix}{i}"), p);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
        for (i, p) in self.0.iter_mut().enumerate() {
            f(&format!("{prefix}{i}"), p);
        }
    }
}

type Build<'a, M> = dyn Fn(&M, &mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

struct Harness<'a, M> {
    module: M,
    inputs: Vec<Tensor<f64>>,
    build: &'a Build<'a, M>,
    target: Option<Tensor<f64>>,
}

impl<M: Module<f64>> Harness<'_, M> {
    fn run(&self) -> Result<(Tape<f64>, Var, Vec<Var>)> {
        let mut tape = Tape::new();
        let vars = self.inputs.iter().map(|t| tape.input(t.clone())).collect::<Result<Vec<_>>>()?;
        let out = (self.build)(&self.module, &mut tape, &vars)?;
        let loss = match &self.target {
            Some(t) => tape.squared_error(out, t)?,
            None => out,
        };
        Ok((tape, loss, vars))
    }

    fn loss(&self) -> Result<(f64, Vec<bool>)> {
        let (tape, loss, _) = self.run()?;
        Ok((tape.value(loss).data()[0], tape.relu_pattern()))
    }

    /// Value of scalar `index` in tensor `slot` (parameters first, then inputs).
    fn get(&mut self, slot: usize, index: usize) -> f64 {
        let mut v = 0.0;
        self.update(slot, index, |x| v = *x);
        v
    }

    fn set(&mut self, slot: usize, index: usize, value: f64) {
        self.update(slot, index, |x| *x = value);
    }

    fn update(&mut self, slot: usize, index: usize, f: impl FnOnce(&mut f64)) {
        let mut n = 0;
        let mut f = Some(f);
        self.module.visit_params_mut("", &mut |_, p| {
            if n == slot {
                if let Some(f) = f.take() {
                    f(&mut p.value.data_mut()[index]);
                }
            }
            n += 1;
        });
        if let Some(f) = f {
            f(&mut self.inputs[slot - n].data_mut()[index]);
        }
    }
}

/// Checks every parameter of `module` and every input tensor.
pub fn check_module<M: Module<f64>>(
    name: &str,
    module: M,
    inputs: Vec<Tensor<f64>>,
    build: &Build<'_, M>,
    opts: GradcheckOptions,
) -> Result<GradcheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x6c0d);
    let mut h = Harness { module, inputs, build, target: None };
    let (tape, out, _) = h.run()?;
    if tape.value(out).numel() != 1 {
        let s = tape.shape(out);
        h.target = Some(Tensor::from_fn(s, |_, _, _, _| rng.gen_range(-1.0..1.0)));
    }
    let (mut tape, loss, vars) = h.run()?;
    let base_pattern = tape.relu_pattern();
    let floor = opts.floor * tape.value(loss).data()[0].abs().max(1.0);
    let grads = tape.backward(loss)?;

    let mut analytic: Vec<Tensor<f64>> = Vec::new();
    h.module.visit_params("", &mut |_, p| analytic.push(grads.param(p)));
    analytic.extend(vars.iter().map(|&v| grads.wrt(v)));

    let mut result = GradcheckResult { name: name.to_string(), max_rel_err: 0.0, checked: 0, skipped: 0, tolerance: opts.tolerance };
    for (slot, a) in analytic.iter().enumerate() {
        let n = a.numel();
        for index in sample(&mut rng, n, opts.samples.min(n)).into_iter() {
            let orig = h.get(slot, index);
            h.set(slot, index, orig + opts.step);
            let (lp, pp) = h.loss()?;
            h.set(slot, index, orig - opts.step);
            let (lm, pm) = h.loss()?;
            h.set(slot, index, orig);
            if pp != base_pattern || pm != base_pattern {
                result.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * opts.step);
            let av = a.data()[index];
            let err = (av - numeric).abs() / av.abs().max(numeric.abs()).max(floor);
            result.max_rel_err = result.max_rel_err.max(err);
            result.checked += 1;
        }
    }
    Ok(result)
}

fn random(rng: &mut ChaCha8Rng, s: Shape, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(s, |_, _, _, _| rng.gen_range(-scale..scale))
}

/// Entries bounded away from zero, for inputs that feed a ReLU directly.
fn away_from_zero(rng: &mut ChaCha8Rng, s: Shape) -> Tensor<f64> {
    Tensor::from_fn(s, |_, _, _, _| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn params(ts: Vec<Tensor<f64>>) -> ParamList {
    ParamList(ts.into_iter().map(Param::new).collect())
}

/// Checks for every primitive operation and layer class.
pub fn per_op_suite(seed: u64) -> Result<Vec<GradcheckResult>> {
    let opts = GradcheckOptions::per_op(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let init = Init::new(seed);

    let convs = [
        ("conv2d/3x3", ConvGeom::same(3)),
        ("conv2d/dilated", ConvGeom::dilated(3, 2)),
        ("conv2d/strided", ConvGeom::tiled(2)),
        ("conv2d/pointwise", ConvGeom::pointwise()),
    ];
    for (name, geom) in convs {
        let layer = ConvLayer::<f64>::new(name, 3, 4, geom, true, ConvInit::FanIn, init);
        let x = random(&mut rng, Shape::new(2, 3, 6, 6), 1.0);
        out.push(check_module(name, layer, vec![x], &|l, t, v| l.forward(t, v[0]), opts)?);
    }

    let bn = crate::layers::BatchNormLayer::<f64>::new(3);
    let mut bn_eval = bn.clone();
    bn_eval.mode = crate::layers::NormMode::Eval;
    bn_eval.running_mean = vec![0.1, -0.2, 0.3];
    bn_eval.running_var = vec![0.5, 1.5, 2.0];
    let x = random(&mut rng, Shape::new(2, 3, 4, 4), 1.0);
    out.push(check_module("batchnorm/train", bn, vec![x.clone()], &|l, t, v| l.forward(t, v[0]), opts)?);
    out.push(check_module("batchnorm/eval", bn_eval, vec![x], &|l, t, v| l.forward(t, v[0]), opts)?);

    let x = away_from_zero(&mut rng, Shape::new(1, 2, 4, 4));
    out.push(check_module("relu", ParamList::default(), vec![x], &|_, t, v| t.relu(v[0]), opts)?);

    let a = random(&mut rng, Shape::new(1, 2, 3, 3), 1.0);
    let b = random(&mut rng, Shape::new(1, 2, 3, 3), 1.0);
    out.push(check_module("add", ParamList::default(), vec![a.clone(), b], &|_, t, v| t.add(v[0], v[1]), opts)?);
    let s = params(vec![Tensor::scalar(0.7)]);
    out.push(check_module("scale_by", s, vec![a.clone()], &|p, t, v| {
        let s = t.param(&p.0[0])?;
        t.scale_by(v[0], s)
    }, opts)?);
    out.push(check_module("scale", ParamList::default(), vec![a], &|_, t, v| t.scale(v[0], -1.3), opts)?);

    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let (m, k, n) = (3, 4, 5);
        let sa = if ta { Shape::new(2, 1, k, m) } else { Shape::new(2, 1, m, k) };
        let sb = if tb { Shape::new(2, 1, n, k) } else { Shape::new(2, 1, k, n) };
        let a = random(&mut rng, sa, 1.0);
        let b = random(&mut rng, sb, 1.0);
        let name = format!("matmul/{}{}", if ta { "T" } else { "N" }, if tb { "T" } else { "N" });
        out.push(check_module(&name, ParamList::default(), vec![a, b], &move |_, t, v| t.matmul(v[0], ta, v[1], tb), opts)?);
    }

    let x = random(&mut rng, Shape::new(1, 1, 4, 6), 2.0);
    out.push(check_module("softmax_rows", ParamList::default(), vec![x], &|_, t, v| t.softmax_rows(v[0]), opts)?);

    let x = random(&mut rng, Shape::new(2, 3, 3, 4), 1.0);
    out.push(check_module("to_tokens", ParamList::default(), vec![x], &|_, t, v| t.to_tokens(v[0]), opts)?);
    let tok = random(&mut rng, Shape::new(2, 1, 12, 3), 1.0);
    out.push(check_module("from_tokens", ParamList::default(), vec![tok], &|_, t, v| t.from_tokens(v[0], 3, 4), opts)?);

    let x = random(&mut rng, Shape::new(1, 2, 7, 5), 1.0);
    out.push(check_module("adaptive_avg_pool", ParamList::default(), vec![x], &|_, t, v| t.adaptive_avg_pool(v[0], 3), opts)?);

    let a = random(&mut rng, Shape::new(1, 2, 3, 3), 1.0);
    let b = random(&mut rng, Shape::new(1, 1, 3, 3), 1.0);
    out.push(check_module("concat/channels", ParamList::default(), vec![a, b], &|_, t, v| t.concat(&[v[0], v[1]], 1), opts)?);
    let a = random(&mut rng, Shape::new(1, 1, 2, 3), 1.0);
    let b = random(&mut rng, Shape::new(1, 1, 4, 3), 1.0);
    out.push(check_module("concat/rows", ParamList::default(), vec![a, b], &|_, t, v| t.concat(&[v[0], v[1]], 2), opts)?);

    let x = random(&mut rng, Shape::new(1, 2, 3, 3), 1.0);
    let g = random(&mut rng, Shape::new(1, 2, 3, 3), 1.0);
    out.push(check_module("squared_error", ParamList::default(), vec![x], &move |_, t, v| t.squared_error(v[0], &g), opts)?);

    let (d, m, n) = (4, 3, 2);
    let f = random(&mut rng, Shape::new(1, d, 4, 4), 1.0);
    let mut nlb = Nlb::<f64>::new("nlb", NlbConfig { d, m, n }, init)?;
    nlb.psi.weight.value = random(&mut rng, nlb.psi.weight.value.shape(), 0.5);
    out.push(check_module("nlb", nlb, vec![f.clone()], &|b, t, v| b.forward(t, v[0]), opts)?);
    let mut pnb = Pnb::<f64>::new("pnb", PnbConfig { d, m, n, scales: vec![0, 1, 2] }, init)?;
    pnb.psi.weight.value = random(&mut rng, pnb.psi.weight.value.shape(), 0.5);
    out.push(check_module("pnb", pnb, vec![f.clone()], &|b, t, v| b.forward(t, v[0]), opts)?);
    let mut apnb = Apnb::<f64>::new("apnb", ApnbConfig { d, m, n, pool_sizes: vec![1, 2, 3] }, init)?;
    apnb.psi.weight.value = random(&mut rng, apnb.psi.weight.value.shape(), 0.5);
    out.push(check_module("apnb", apnb, vec![f], &|b, t, v| b.forward(t, v[0]), opts)?);

    let drb = DrbBlock::<f64>::new("drb", 3, init);
    let x = random(&mut rng, Shape::new(2, 3, 6, 6), 1.0);
    out.push(check_module("drb", drb, vec![x], &|b, t, v| b.forward(t, v[0]), opts)?);
    Ok(out)
}

/// Network used by the end-to-end check: the default structure (S=3, M=3)
/// at reduced widths.
pub fn end_to_end_config() -> PnenConfig {
    PnenConfig { c: 3, d: 16, m: 16, n: 8, scales: vec![1, 2, 3], groups: 3, nonlocal: NonLocalKind::Pnb, pool_sizes: vec![1, 3, 6, 8] }
}

/// Deep-supervision loss of the whole network on a `1 x 3 x 16 x 16` input,
/// with the zero-initialised attention outputs replaced by random weights.
pub fn end_to_end(config: PnenConfig, seed: u64) -> Result<GradcheckResult> {
    let opts = GradcheckOptions::end_to_end(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe2e);
    let mut model = PnenModel::<f64>::new(config, seed)?;
    for g in &mut model.groups {
        g.attention.visit_params_mut("", &mut |name, p| {
            if name.contains("psi") {
                p.value = random(&mut rng, p.value.shape(), 0.2);
            }
        });
    }
    let x = Tensor::from_fn(Shape::new(1, 3, 16, 16), |_, _, _, _| rng.gen_range(0.0..1.0));
    let g = x.map(|v| 0.8 * v + 0.1);
    let name = format!("pnen/{}", model.config.nonlocal.name());
    check_module(&name, model, vec![x], &move |m, t, v| {
        let out = m.forward(t, v[0])?;
        loss_on_tape(t, &out, &g)
    }, opts)
}
