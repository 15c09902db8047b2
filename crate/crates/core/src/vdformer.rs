//! View-disentangled transformer: three cascaded 2-D windowed attention
//! passes over the (W,T), (H,T) and (H,W) planes of a `C×H×W×T` slice stack.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{init_pair_params, swin_pair_pass, AttentionConfig};
use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `T` consecutive per-slice feature maps `C×H×W` stacked on a last axis.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceStack {
    pub data: Tensor,
    /// Index of the center slice in the source volume.
    pub center: usize,
}

impl SliceStack {
    pub fn depth(&self) -> usize {
        *self.data.shape().last().unwrap()
    }
}

/// Stacks slices `t - T/2 ..= t + T/2`; indices outside the sequence
/// contribute zero maps.
pub fn extract_slice_window(features: &[Tensor], t: usize, depth: usize) -> Result<SliceStack> {
    if t >= features.len() {
        return Err(Error::Index {
            index: t,
            len: features.len(),
        });
    }
    if depth % 2 == 0 {
        return Err(Error::Config(format!("slice window T must be odd, got {depth}")));
    }
    let shape = features[t].shape();
    if let Some(f) = features.iter().find(|f| f.shape() != shape) {
        return Err(Error::shape(
            "extract_slice_window",
            format!("slice features disagree: {:?} vs {:?}", f.shape(), shape),
        ));
    }
    let half = depth / 2;
    let parts: Vec<Tensor> = (0..depth)
        .map(|k| match (t + k).checked_sub(half) {
            Some(i) if i < features.len() => features[i].clone(),
            _ => Tensor::zeros(shape),
        })
        .collect();
    Ok(SliceStack {
        data: Tensor::stack_last(&parts)?,
        center: t,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ViewAxes {
    WT,
    HT,
    HW,
}

impl ViewAxes {
    /// Cascade order.
    pub const ALL: [ViewAxes; 3] = [ViewAxes::WT, ViewAxes::HT, ViewAxes::HW];

    /// Permutation of `[C, H, W, T]` into `[planes, rows, cols, C]`.
    pub fn permutation(self) -> [usize; 4] {
        match self {
            ViewAxes::WT => [1, 2, 3, 0],
            ViewAxes::HT => [2, 1, 3, 0],
            ViewAxes::HW => [3, 1, 2, 0],
        }
    }

    pub fn inverse_permutation(self) -> [usize; 4] {
        let p = self.permutation();
        let mut inv = [0; 4];
        for (i, &a) in p.iter().enumerate() {
            inv[a] = i;
        }
        inv
    }

    pub fn tag(self) -> &'static str {
        match self {
            ViewAxes::WT => "view_wt",
            ViewAxes::HT => "view_ht",
            ViewAxes::HW => "view_hw",
        }
    }
}

/// One view pass over `x: [C, H, W, T]`; output has the same shape.
pub fn view_pass(
    tape: &mut Tape,
    x: Var,
    view: ViewAxes,
    store: &ParamStore,
    prefix: &str,
    cfg: &AttentionConfig,
) -> Result<Var> {
    if tape.shape(x).len() != 4 {
        return Err(Error::shape(
            "view_pass",
            format!("expected [C, H, W, T], got {:?}", tape.shape(x)),
        ));
    }
    let planes = tape.permute(x, &view.permutation())?;
    let y = swin_pair_pass(tape, planes, store, prefix, cfg)?;
    tape.permute(y, &view.inverse_permutation())
}

/// Cascade WT → HT → HW over `x: [C, H, W, T]`, returning the center slice
/// `[C, H, W]`. Parameters live under `{prefix}.view_{wt,ht,hw}`.
pub fn vd_former(
    tape: &mut Tape,
    x: Var,
    store: &ParamStore,
    prefix: &str,
    cfg: &AttentionConfig,
) -> Result<Var> {
    let depth = tape.shape(x).last().copied().unwrap_or(0);
    if depth % 2 == 0 {
        return Err(Error::Config(format!("slice window T must be odd, got {depth}")));
    }
    let mut y = x;
    for view in ViewAxes::ALL {
        y = view_pass(tape, y, view, store, &format!("{prefix}.{}", view.tag()), cfg)?;
    }
    tape.select_last(y, depth / 2)
}

/// [`vd_former`] on a slice stack without gradient tracking.
pub fn vd_former_stack(
    stack: &SliceStack,
    store: &ParamStore,
    prefix: &str,
    cfg: &AttentionConfig,
) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let x = tape.constant(stack.data.clone());
    let y = vd_former(&mut tape, x, store, prefix, cfg)?;
    Ok(tape.value(y).clone())
}

pub fn init_vdformer_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &AttentionConfig,
    rng: &mut R,
) -> Result<()> {
    for view in ViewAxes::ALL {
        init_pair_params(store, &format!("{prefix}.{}", view.tag()), cfg, rng)?;
    }
    Ok(())
}
