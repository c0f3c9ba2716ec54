use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::filters::FilterSpec;
use crate::io;
use crate::layers::{Module, NormMode};
use crate::metrics::psnr;
use crate::model::{loss_on_tape, pnen_forward, NonLocalKind, PnenConfig, PnenModel};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::{Shape, Tensor};

use super::adam::Adam;
use super::augment::augment;
use super::schedule::PlateauScheduler;
use super::synth::TextureSpec;

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(TextureSpec),
    /// Every `.pgm` / `.ppm` file in the directory, in name order.
    Directory(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: PnenConfig,
    pub patch_size: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_floor: f64,
    /// Epochs without improvement before the rate is halved.
    pub plateau_patience: usize,
    pub seed: u64,
    /// Total optimiser steps.
    pub steps: usize,
    pub steps_per_epoch: usize,
    pub filter: FilterSpec,
    pub data: DataSource,
    /// Global gradient-norm limit; `None` disables clipping.
    pub clip_grad_norm: Option<f64>,
    /// Checkpoint interval in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: PnenConfig::default(),
            patch_size: 96,
            batch_size: 8,
            lr_init: 5e-4,
            lr_floor: 1e-4,
            plateau_patience: 5,
            seed: 0,
            steps: 1000,
            steps_per_epoch: 100,
            filter: FilterSpec::default(),
            data: DataSource::Synthetic(TextureSpec::default()),
            clip_grad_norm: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.filter.validate()?;
        if self.patch_size == 0 || self.batch_size == 0 || self.steps_per_epoch == 0 {
            return Err(Error::config("patch_size, batch_size and steps_per_epoch must be positive"));
        }
        if self.model.nonlocal == NonLocalKind::Pnb && self.patch_size < 2 * self.model.pnb().max_stride() {
            return Err(Error::config(format!(
                "patch_size {} leaves fewer than 2 reference positions at stride {}",
                self.patch_size,
                self.model.pnb().max_stride()
            )));
        }
        if self.patch_size < self.model.min_side() {
            return Err(Error::config(format!("patch_size {} is below the model minimum {}", self.patch_size, self.model.min_side())));
        }
        if !(self.lr_init >= 0.0 && self.lr_floor >= 0.0 && self.lr_floor <= self.lr_init) {
            return Err(Error::config(format!("need 0 <= lr_floor <= lr_init, got {} and {}", self.lr_floor, self.lr_init)));
        }
        if matches!(self.clip_grad_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::config("clip_grad_norm must be positive when set"));
        }
        Ok(())
    }
}

/// One line of the loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

pub fn loss_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("step,epoch,lr,loss\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.step, r.epoch, r.lr, r.loss);
    }
    s
}

/// Where training writes its artifacts. With no directory nothing touches the disk.
#[derive(Debug, Clone, Default)]
pub struct Artifacts {
    pub dir: Option<PathBuf>,
}

impl Artifacts {
    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        Artifacts { dir: Some(dir.into()) }
    }

    fn path(&self, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(name))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: PnenModel<T>,
    pub log: Vec<LogRow>,
}

/// Input images and their filtered targets.
#[derive(Debug, Clone)]
pub struct PairSet<T> {
    pub inputs: Vec<Tensor<T>>,
    pub targets: Vec<Tensor<T>>,
}

impl<T: Scalar> PairSet<T> {
    pub fn new(inputs: Vec<Tensor<T>>, filter: &FilterSpec) -> Result<Self> {
        let targets = inputs.iter().map(|x| filter.apply(x)).collect::<Result<_>>()?;
        Ok(PairSet { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Loads or generates the images named by `source`.
pub fn load_images<T: Scalar>(source: &DataSource) -> Result<Vec<Tensor<T>>> {
    match source {
        DataSource::Synthetic(spec) => super::synth::synth_textures(spec),
        DataSource::Directory(dir) => {
            let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
                .map_err(|e| Error::io(dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm")))
                .collect();
            paths.sort();
            if paths.is_empty() {
                return Err(Error::data(format!("no .pgm or .ppm images in {}", dir.display())));
            }
            paths.iter().map(io::read_image).collect()
        }
    }
}

fn sample_batch<T: Scalar>(pairs: &PairSet<T>, patch: usize, batch: usize, rng: &mut ChaCha8Rng) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut xs = Vec::with_capacity(batch);
    let mut gs = Vec::with_capacity(batch);
    for _ in 0..batch {
        let i = rng.gen_range(0..pairs.len());
        let s = pairs.inputs[i].shape();
        if s.h < patch || s.w < patch {
            return Err(Error::data(format!("image {i} ({}x{}) is smaller than the {patch}px patch", s.h, s.w)));
        }
        let y = rng.gen_range(0..=s.h - patch);
        let x = rng.gen_range(0..=s.w - patch);
        let xp = pairs.inputs[i].crop(y, x, patch, patch)?;
        let gp = pairs.targets[i].crop(y, x, patch, patch)?;
        let (xa, ga) = augment(&xp, &gp, rng);
        xs.push(xa);
        gs.push(ga);
    }
    Ok((Tensor::stack(&xs)?, Tensor::stack(&gs)?))
}

fn clip_gradients<T: Scalar>(model: &mut PnenModel<T>, limit: f64) {
    let mut sq = 0.0;
    model.visit_params("", &mut |_, p| sq += p.grad.data().iter().map(|g| g.to_f64c().powi(2)).sum::<f64>());
    let norm = sq.sqrt();
    if norm > limit {
        let k = T::from_f64c(limit / norm);
        model.visit_params_mut("", &mut |_, p| p.grad.data_mut().iter_mut().for_each(|g| *g *= k));
    }
}

fn dump_batch<T: Scalar>(artifacts: &Artifacts, step: usize, x: &Tensor<T>, g: &Tensor<T>) -> String {
    let dir = artifacts.dir.clone().unwrap_or_else(std::env::temp_dir);
    let xp = dir.join(format!("bad-batch-{step:06}-input.pnt"));
    let gp = dir.join(format!("bad-batch-{step:06}-target.pnt"));
    match io::write_tensor(&xp, x).and_then(|_| io::write_tensor(&gp, g)) {
        Ok(()) => format!("batch saved to {} and {}", xp.display(), gp.display()),
        Err(e) => format!("saving the batch failed: {e}"),
    }
}

/// Runs the full training loop on prepared pairs, starting from `model`.
pub fn train_model<T: Scalar>(
    config: &TrainConfig,
    mut model: PnenModel<T>,
    pairs: &PairSet<T>,
    artifacts: &Artifacts,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::data("training set is empty"));
    }
    if let Some(dir) = &artifacts.dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    model.set_norm_mode(NormMode::Train);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut adam = Adam::new(config.lr_init);
    let mut sched = PlateauScheduler::new(config.lr_init, config.lr_floor, config.plateau_patience);
    let mut log = Vec::with_capacity(config.steps);
    let mut epoch_sum = 0.0;
    let mut tape = Tape::new();
    for step in 0..config.steps {
        let epoch = step / config.steps_per_epoch;
        let (xb, gb) = sample_batch(pairs, config.patch_size, config.batch_size, &mut rng)?;
        tape.reset();
        let result = (|| {
            let xv = tape.input(xb.clone())?;
            let out = model.forward(&mut tape, xv)?;
            let loss = loss_on_tape(&mut tape, &out, &gb)?;
            let value = tape.value(loss).data()[0].to_f64c();
            let grads = tape.backward(loss)?;
            Ok((value, grads))
        })();
        let (loss, grads) = match result {
            Ok(v) => v,
            Err(Error::Numeric(msg)) => {
                let saved = dump_batch(artifacts, step + 1, &xb, &gb);
                return Err(Error::Numeric(format!("step {}: {msg}; {saved}", step + 1)));
            }
            Err(e) => return Err(e),
        };
        model.visit_params_mut("", &mut |_, p| grads.store(p));
        if let Some(limit) = config.clip_grad_norm {
            clip_gradients(&mut model, limit);
        }
        adam.lr = sched.lr();
        adam.step(&mut model)?;
        model.absorb_batch_stats(&tape);
        log.push(LogRow { step: step + 1, epoch, lr: sched.lr(), loss });
        epoch_sum += loss;
        if (step + 1) % config.steps_per_epoch == 0 {
            sched.observe(epoch_sum / config.steps_per_epoch as f64);
            epoch_sum = 0.0;
        }
        if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 {
            if let Some(p) = artifacts.path(&format!("ckpt-{:06}.txt", step + 1)) {
                io::save_checkpoint(p, &model)?;
            }
        }
    }
    if let Some(p) = artifacts.path("loss.csv") {
        io::write_bytes(&p, loss_csv(&log).as_bytes())?;
    }
    if let Some(p) = artifacts.path("final.txt") {
        io::save_checkpoint(p, &model)?;
    }
    Ok(TrainOutcome { model, log })
}

/// Builds the data and a freshly initialised model from `config`, then trains.
pub fn train<T: Scalar>(config: &TrainConfig, artifacts: &Artifacts) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let pairs = PairSet::new(load_images(&config.data)?, &config.filter)?;
    let model = PnenModel::new(config.model.clone(), config.seed)?;
    train_model(config, model, &pairs, artifacts)
}

/// Mean PSNR over the pairs for the model (batch norm in eval mode) and for
/// the identity map, as `(model, identity)`.
pub fn validation_psnr<T: Scalar>(model: &PnenModel<T>, pairs: &PairSet<T>) -> Result<(f64, f64)> {
    let mut frozen = model.clone();
    frozen.set_norm_mode(NormMode::Eval);
    let mut m = 0.0;
    let mut id = 0.0;
    for (x, g) in pairs.inputs.iter().zip(&pairs.targets) {
        let (y, _) = pnen_forward(x, &frozen)?;
        m += psnr(&y, g, 1.0)?;
        id += psnr(x, g, 1.0)?;
    }
    let n = pairs.len() as f64;
    Ok((m / n, id / n))
}

/// Center crops of `side x side` from every image.
pub fn center_crops<T: Scalar>(images: &[Tensor<T>], side: usize) -> Result<Vec<Tensor<T>>> {
    images
        .iter()
        .map(|img| {
            let s: Shape = img.shape();
            if s.h < side || s.w < side {
                return Err(Error::data(format!("cannot take a {side}px crop of a {}x{} image", s.h, s.w)));
            }
            img.crop((s.h - side) / 2, (s.w - side) / 2, side, side)
        })
        .collect()
}

pub fn write_loss_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    io::write_bytes(path, loss_csv(rows).as_bytes())
}
