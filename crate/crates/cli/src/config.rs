//! Flat `key = value` run configuration.
//!
//! [`SCHEMA`] is the only list of keys. Defaults, validation of unknown keys
//! and the help text all come from it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use pnen::filters::{FilterKind, FilterSpec};
use pnen::model::PnenConfig;
use pnen::train::{DataSource, TextureSpec, TrainConfig};

use crate::error::CliError;

pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key { name, default, help }
}

pub const SCHEMA: &[Key] = &[
    key("c", "3", "image channels"),
    key("d", "64", "feature channels in the backbone"),
    key("m", "64", "query/key embedding width"),
    key("n", "32", "value embedding width"),
    key("scales", "1,2,3", "pyramid scale indices s; each reference conv has kernel = stride = 2^s"),
    key("groups", "3", "residual + attention groups (M)"),
    key("nonlocal", "pnb", "attention block: none | nlb | apnb | pnb"),
    key("pools", "1,3,6,8", "pooled grid sizes for apnb"),
    key("patch_size", "96", "training patch side in pixels"),
    key("batch_size", "8", "patches per step"),
    key("lr_init", "5e-4", "initial Adam learning rate"),
    key("lr_floor", "1e-4", "learning rate never drops below this"),
    key("plateau_patience", "5", "epochs without improvement before halving the rate"),
    key("seed", "0", "seed for initialisation and batch sampling"),
    key("steps", "1000", "optimiser steps"),
    key("steps_per_epoch", "100", "steps per epoch for the plateau schedule"),
    key("clip_grad_norm", "off", "global gradient-norm limit, or off"),
    key("checkpoint_every", "0", "checkpoint interval in steps; 0 writes only the final one"),
    key("filter", "gaussian", "target filter: gaussian | median | weighted_median"),
    key("filter_radius", "5", "window radius of the median filters (gaussian uses ceil(3 sigma))"),
    key("filter_sigma_spatial", "1.5", "gaussian sigma, or spatial sigma of the weighted median"),
    key("filter_sigma_range", "1", "range sigma of the weighted median"),
    key("data_dir", "", "directory of .pgm/.ppm training images; empty means synthetic textures"),
    key("synth_count", "16", "synthetic images"),
    key("synth_size", "128", "synthetic image side"),
    key("synth_regions", "8", "flat regions per synthetic image"),
    key("synth_amplitude", "0.015", "texture standard deviation"),
    key("synth_seed", "0", "seed of the synthetic corpus"),
    key("out_dir", "runs/pnen", "where train writes loss.csv and checkpoints"),
];

/// Help text listing every key with its default.
pub fn help_text() -> String {
    let width = SCHEMA.iter().map(|k| k.name.len()).max().unwrap_or(0);
    let mut s = String::from("Config keys (file lines `key = value`, `#` starts a comment):\n");
    for k in SCHEMA {
        let default = if k.default.is_empty() { "\"\"" } else { k.default };
        let _ = writeln!(s, "  {:<width$}  {}  [default: {}]", k.name, k.help, default);
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub out_dir: PathBuf,
}

/// Raw key/value pairs, always holding every schema key.
#[derive(Debug, Clone)]
pub struct Pairs(BTreeMap<&'static str, String>);

impl Default for Pairs {
    fn default() -> Self {
        Pairs(SCHEMA.iter().map(|k| (k.name, k.default.to_string())).collect())
    }
}

impl Pairs {
    pub fn set(&mut self, name: &str, value: &str) -> Result<(), CliError> {
        let k = SCHEMA
            .iter()
            .find(|k| k.name == name)
            .ok_or_else(|| CliError::Usage(format!("unknown config key `{name}`")))?;
        self.0.insert(k.name, value.trim().to_string());
        Ok(())
    }

    /// Applies a config file's text; a key may appear only once per file.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        let mut seen = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{origin}:{}: expected `key = value`", no + 1)))?;
            let k = k.trim();
            if seen.contains(&k) {
                return Err(CliError::Usage(format!("{origin}:{}: `{k}` set twice", no + 1)));
            }
            seen.push(k);
            self.set(k, v).map_err(|e| CliError::Usage(format!("{origin}:{}: {e}", no + 1)))?;
        }
        Ok(())
    }

    /// Applies a command-line `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), CliError> {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{kv}`")))?;
        self.set(k.trim(), v)
    }

    pub fn get(&self, name: &str) -> &str {
        self.0.get(name).map(String::as_str).expect("schema key")
    }

    pub fn to_text(&self) -> String {
        SCHEMA.iter().map(|k| format!("{} = {}\n", k.name, self.get(k.name))).collect()
    }

    pub fn build(&self) -> Result<RunConfig, CliError> {
        let mut model = PnenConfig::default();
        for (k, _) in PnenConfig::default().to_pairs() {
            model.set(k, self.get(k)).map_err(usage)?;
        }
        let kind = FilterKind::parse(self.get("filter"))
            .ok_or_else(|| CliError::Usage(format!("filter: unknown kind `{}`", self.get("filter"))))?;
        let sigma_spatial = self.num("filter_sigma_spatial")?;
        let filter = match kind {
            FilterKind::Gaussian => FilterSpec::gaussian(sigma_spatial),
            FilterKind::Median => FilterSpec::median(self.num("filter_radius")?),
            FilterKind::WeightedMedian => {
                FilterSpec::weighted_median(self.num("filter_radius")?, sigma_spatial, self.num("filter_sigma_range")?)
            }
        };
        let data = match self.get("data_dir") {
            "" => DataSource::Synthetic(TextureSpec {
                count: self.num("synth_count")?,
                size: self.num("synth_size")?,
                channels: model.c,
                regions: self.num("synth_regions")?,
                amplitude: self.num("synth_amplitude")?,
                seed: self.num("synth_seed")?,
            }),
            dir => DataSource::Directory(PathBuf::from(dir)),
        };
        let clip_grad_norm = match self.get("clip_grad_norm") {
            "off" | "none" | "" => None,
            _ => Some(self.num("clip_grad_norm")?),
        };
        let train = TrainConfig {
            model,
            patch_size: self.num("patch_size")?,
            batch_size: self.num("batch_size")?,
            lr_init: self.num("lr_init")?,
            lr_floor: self.num("lr_floor")?,
            plateau_patience: self.num("plateau_patience")?,
            seed: self.num("seed")?,
            steps: self.num("steps")?,
            steps_per_epoch: self.num("steps_per_epoch")?,
            filter,
            data,
            clip_grad_norm,
            checkpoint_every: self.num("checkpoint_every")?,
        };
        train.validate().map_err(usage)?;
        Ok(RunConfig { train, out_dir: PathBuf::from(self.get("out_dir")) })
    }

    fn num<N: std::str::FromStr>(&self, name: &str) -> Result<N, CliError> {
        let v = self.get(name);
        v.parse().map_err(|_| CliError::Usage(format!("{name}: cannot parse `{v}`")))
    }
}

fn usage(e: pnen::Error) -> CliError {
    match e {
        pnen::Error::Config(m) => CliError::Usage(m),
        other => CliError::Core(other),
    }
}

/// Reads an optional config file and applies `--set` overrides on top.
pub fn load(file: Option<&std::path::Path>, overrides: &[String]) -> Result<(Pairs, RunConfig), CliError> {
    let mut pairs = Pairs::default();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Core(pnen::Error::Io { path: path.display().to_string(), source: e }))?;
        pairs.apply_text(&text, &path.display().to_string())?;
    }
    for kv in overrides {
        pairs.apply_override(kv)?;
    }
    let cfg = pairs.build()?;
    Ok((pairs, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_defaults_match_library_defaults() {
        let cfg = Pairs::default().build().unwrap();
        assert_eq!(cfg.train, TrainConfig::default());
    }

    #[test]
    fn schema_covers_every_model_key() {
        for (k, v) in PnenConfig::default().to_pairs() {
            let entry = SCHEMA.iter().find(|s| s.name == k).unwrap();
            assert_eq!(entry.default, v);
        }
    }

    #[test]
    fn file_text_with_comments_and_overrides() {
        let mut p = Pairs::default();
        p.apply_text("# tiny\nd = 16 # features\n\nscales=1,2\nnonlocal = apnb\n", "t").unwrap();
        p.apply_override("steps=20").unwrap();
        let cfg = p.build().unwrap();
        assert_eq!(cfg.train.model.d, 16);
        assert_eq!(cfg.train.model.scales, vec![1, 2]);
        assert_eq!(cfg.train.steps, 20);
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        assert!(Pairs::default().apply_text("depth = 3\n", "t").is_err());
        assert!(Pairs::default().apply_text("d = 3\nd = 4\n", "t").is_err());
        assert!(Pairs::default().apply_text("just words\n", "t").is_err());
        let mut p = Pairs::default();
        p.set("lr_init", "fast").unwrap();
        assert!(matches!(p.build(), Err(CliError::Usage(_))));
    }

    #[test]
    fn to_text_round_trips() {
        let mut p = Pairs::default();
        p.set("filter", "weighted_median").unwrap();
        p.set("clip_grad_norm", "2.5").unwrap();
        let mut q = Pairs::default();
        q.apply_text(&p.to_text(), "t").unwrap();
        assert_eq!(p.build().unwrap(), q.build().unwrap());
    }

    #[test]
    fn help_lists_every_key_with_default() {
        let h = help_text();
        for k in SCHEMA {
            assert!(h.contains(k.name));
        }
        assert!(h.contains("[default: 5e-4]"));
    }
}
