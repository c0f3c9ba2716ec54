//! The PNEN backbone: entry convolution, interleaved dilated residual and
//! attention groups, per-group exit nets and weighted fusion.

mod drb;
mod pnen;

pub use drb::{drb_forward, DrbBlock, DrbGroup, DRB_DILATIONS};
pub use pnen::{
    loss_on_tape, pnen_forward, pnen_loss, ExitNet, NonLocalKind, PnenConfig, PnenGroup, PnenModel, PnenOutput,
};
