//! On-disk formats: raw tensors, 8-bit netpbm images and model checkpoints.

mod checkpoint;
mod netpbm;
mod pnt;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT};
pub use netpbm::{decode_netpbm, encode_netpbm, quantize, read_image, write_image};
pub use pnt::{decode_tensor, encode_tensor, read_tensor, write_tensor};

use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
