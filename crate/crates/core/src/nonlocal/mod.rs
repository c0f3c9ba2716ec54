//! Non-local attention blocks over feature maps.
//!
//! All three variants share the same skeleton: a full-resolution query
//! embedding, a set of reference (key) and value tokens, softmax attention of
//! every query pixel over the references, a 1x1 output transform and an
//! additive residual. They differ only in how the reference tokens are made:
//!
//! * [`Nlb`] uses every pixel of a 1x1 embedding.
//! * [`Pnb`] uses one strided convolution per pyramid scale (kernel = stride =
//!   2^s) and attends to each scale separately before fusing.
//! * [`Apnb`] adaptive-average-pools 1x1 embeddings to a few fixed grids and
//!   attends once over all pooled tokens.

mod apnb;
mod nlb;
mod pnb;

pub use apnb::{apnb_forward, Apnb, ApnbConfig};
pub use nlb::{nlb_forward, Nlb, NlbConfig};
pub use pnb::{dump_attention, pnb_forward, pyramid_geom, Pnb, PnbConfig, PyramidScale};

use crate::error::Result;
use crate::layers::{Module, Param};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Softmax attention of query tokens over reference/value tokens.
///
/// `q` is `(B, 1, P, m)`, `k` is `(B, 1, R, m)`, `v` is `(B, 1, R, n)`; the
/// result is `(B, 1, P, n)`.
pub(crate) fn attend<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, v: Var) -> Result<Var> {
    let logits = tape.matmul(q, false, k, true)?;
    let weights = tape.softmax_rows(logits)?;
    tape.matmul(weights, false, v, false)
}

/// One scale's correlation row for one query pixel, laid out on the reference grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDump<T> {
    /// Pyramid scale index `s` (stride `2^s`).
    pub scale: u32,
    pub stride: usize,
    /// Query pixel as `(y, x)`.
    pub pixel: (usize, usize),
    pub height: usize,
    pub width: usize,
    /// Row-major `height x width` softmax weights.
    pub weights: Vec<T>,
}

impl<T: Scalar> AttentionDump<T> {
    pub fn as_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(Shape::new(1, 1, self.height, self.width), self.weights.clone()).expect("dump dimensions")
    }
}

/// Interchangeable non-local layer; `Identity` stands for "no attention".
#[derive(Debug, Clone)]
pub enum NonLocal<T> {
    Identity,
    Nlb(Nlb<T>),
    Pnb(Pnb<T>),
    Apnb(Apnb<T>),
}

impl<T: Scalar> NonLocal<T> {
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        match self {
            NonLocal::Identity => Ok(x),
            NonLocal::Nlb(b) => b.forward(tape, x),
            NonLocal::Pnb(b) => b.forward(tape, x),
            NonLocal::Apnb(b) => b.forward(tape, x),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            NonLocal::Identity => "none",
            NonLocal::Nlb(_) => "nlb",
            NonLocal::Pnb(_) => "pnb",
            NonLocal::Apnb(_) => "apnb",
        }
    }

    /// Conv layers a signal traverses on the block's longest path (the output transform).
    pub fn depth(&self) -> usize {
        match self {
            NonLocal::Identity => 0,
            _ => 1,
        }
    }

    /// Sets the output transform to zero so the block is an exact identity.
    pub fn zero_output(&mut self) {
        let psi = match self {
            NonLocal::Identity => return,
            NonLocal::Nlb(b) => &mut b.psi,
            NonLocal::Pnb(b) => &mut b.psi,
            NonLocal::Apnb(b) => &mut b.psi,
        };
        psi.weight.value.fill(T::zero());
        if let Some(bias) = &mut psi.bias {
            bias.value.fill(T::zero());
        }
    }
}

impl<T: Scalar> Module<T> for NonLocal<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        match self {
            NonLocal::Identity => {}
            NonLocal::Nlb(b) => b.visit_params(prefix, f),
            NonLocal::Pnb(b) => b.visit_params(prefix, f),
            NonLocal::Apnb(b) => b.visit_params(prefix, f),
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        match self {
            NonLocal::Identity => {}
            NonLocal::Nlb(b) => b.visit_params_mut(prefix, f),
            NonLocal::Pnb(b) => b.visit_params_mut(prefix, f),
            NonLocal::Apnb(b) => b.visit_params_mut(prefix, f),
        }
    }
}

/// Runs a tape-recorded forward function once and returns its output value.
pub(crate) fn eager<T: Scalar>(input: &Tensor<T>, f: impl FnOnce(&mut Tape<T>, Var) -> Result<Var>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.input(input.clone())?;
    let y = f(&mut tape, x)?;
    Ok(tape.value(y).clone())
}
