//! Model checkpoints: a text manifest plus one `PNT1` blob holding every
//! parameter and batch-norm buffer back to back.
//!
//! ```text
//! pnen-checkpoint 1
//! dtype f32
//! config d 64
//! blob weights.pnt
//! tensor entry.weight 64x3x3x3 0
//! ```
//! Offsets are in bytes from the start of the blob payload.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::layers::Module;
use crate::model::{PnenConfig, PnenModel};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::{Shape, Tensor};

pub const CHECKPOINT_FORMAT: u32 = 1;

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("pnt")
}

fn named_tensors<T: Scalar>(model: &PnenModel<T>) -> Vec<(String, Tensor<T>)> {
    let mut out = Vec::new();
    model.visit_params("", &mut |name, p| out.push((name.to_string(), p.value.clone())));
    model.visit_norms("", &mut |name, bn| {
        let s = Shape::new(1, 1, 1, bn.channels);
        for (suffix, v) in [("running_mean", &bn.running_mean), ("running_var", &bn.running_var)] {
            let t = Tensor::from_vec(s, v.clone()).expect("buffer length is the channel count");
            out.push((format!("{name}.{suffix}"), t));
        }
    });
    out
}

/// Writes `manifest` and its sibling blob (`manifest` with extension `pnt`).
pub fn save_checkpoint<T: Scalar>(manifest: impl AsRef<Path>, model: &PnenModel<T>) -> Result<()> {
    let manifest = manifest.as_ref();
    let blob = blob_path(manifest);
    let tensors = named_tensors(model);
    let mut text = format!("pnen-checkpoint {CHECKPOINT_FORMAT}\ndtype {}\n", T::DTYPE.name());
    for (k, v) in model.config.to_pairs() {
        text.push_str(&format!("config {k} {v}\n"));
    }
    let blob_name = blob.file_name().expect("manifest has a file name").to_string_lossy();
    text.push_str(&format!("blob {blob_name}\n"));
    let mut flat = Vec::new();
    let mut offset = 0;
    for (name, t) in &tensors {
        text.push_str(&format!("tensor {name} {} {offset}\n", t.shape()));
        offset += t.numel() * T::DTYPE.width();
        flat.extend_from_slice(t.data());
    }
    let n = flat.len();
    let all = Tensor::from_vec(Shape::new(1, 1, 1, n), flat)?;
    super::write_tensor(&blob, &all)?;
    super::write_bytes(manifest, text.as_bytes())
}

fn parse_shape(s: &str) -> Result<Shape> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|d| d.parse().map_err(|_| Error::data(format!("bad shape `{s}` in checkpoint"))))
        .collect::<Result<_>>()?;
    let dims: [usize; 4] = dims.try_into().map_err(|_| Error::data(format!("shape `{s}` is not 4-D")))?;
    Ok(Shape::from_dims(dims))
}

/// Rebuilds a model from a manifest written by [`save_checkpoint`]. Every
/// parameter and buffer must be present with its expected shape.
pub fn load_checkpoint<T: Scalar>(manifest: impl AsRef<Path>) -> Result<PnenModel<T>> {
    let manifest = manifest.as_ref();
    let bytes = super::read_bytes(manifest)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::data("checkpoint manifest is not UTF-8"))?;
    let mut lines = text.lines();
    match lines.next().and_then(|l| l.strip_prefix("pnen-checkpoint ")) {
        Some(v) if v.trim() == CHECKPOINT_FORMAT.to_string() => {}
        Some(v) => return Err(Error::data(format!("unsupported checkpoint format `{v}`"))),
        None => return Err(Error::data(format!("{} is not a checkpoint manifest", manifest.display()))),
    }
    let mut config = PnenConfig::default();
    let mut blob = None;
    let mut stored = None;
    let mut entries: Vec<(String, Shape, usize)> = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split_ascii_whitespace().collect();
        match fields.as_slice() {
            [] => {}
            ["dtype", d] => {
                stored = Some(Dtype::parse(d).ok_or_else(|| Error::data(format!("unknown checkpoint dtype `{d}`")))?);
            }
            ["config", k, v] => {
                if !config.set(k, v).map_err(|e| Error::data(e.to_string()))? {
                    return Err(Error::data(format!("unknown config key `{k}` in checkpoint")));
                }
            }
            ["blob", name] => blob = Some(manifest.with_file_name(name)),
            ["tensor", name, shape, offset] => {
                let off = offset.parse().map_err(|_| Error::data(format!("bad offset `{offset}`")))?;
                entries.push((name.to_string(), parse_shape(shape)?, off));
            }
            _ => return Err(Error::data(format!("unrecognised manifest line `{line}`"))),
        }
    }
    let blob = blob.ok_or_else(|| Error::data("manifest names no blob"))?;
    let bytes = super::read_bytes(&blob)?;
    let stored_width = stored.ok_or_else(|| Error::data("manifest names no dtype"))?.width();
    let all: Tensor<T> = super::decode_tensor(&bytes)?;

    let mut by_name: HashMap<String, Tensor<T>> = HashMap::new();
    for (name, shape, off) in entries {
        if off % stored_width != 0 {
            return Err(Error::data(format!("{name}: misaligned offset {off}")));
        }
        let start = off / stored_width;
        let end = start + shape.numel();
        if end > all.numel() {
            return Err(Error::data(format!("{name}: extends past the end of the blob")));
        }
        by_name.insert(name, Tensor::from_vec(shape, all.data()[start..end].to_vec())?);
    }

    let mut model = PnenModel::new(config, 0).map_err(|e| Error::data(format!("checkpoint config: {e}")))?;
    let mut take = |name: &str, want: Shape| -> Result<Tensor<T>> {
        let t = by_name.remove(name).ok_or_else(|| Error::data(format!("checkpoint lacks `{name}`")))?;
        if t.shape() != want {
            return Err(Error::data(format!("`{name}` is {} in the checkpoint, model needs {want}", t.shape())));
        }
        Ok(t)
    };
    let mut failure = None;
    model.visit_params_mut("", &mut |name, p| match take(name, p.value.shape()) {
        Ok(t) => p.value = t,
        Err(e) => failure = failure.take().or(Some(e)),
    });
    model.visit_norms_mut("", &mut |name, bn| {
        let s = Shape::new(1, 1, 1, bn.channels);
        match (take(&format!("{name}.running_mean"), s), take(&format!("{name}.running_var"), s)) {
            (Ok(m), Ok(v)) => {
                bn.running_mean = m.into_vec();
                bn.running_var = v.into_vec();
            }
            (Err(e), _) | (_, Err(e)) => failure = failure.take().or(Some(e)),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::data(format!("checkpoint has unexpected tensor `{extra}`")));
    }
    Ok(model)
}
