//! Parameterized layers shared by the fusion blocks.

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::ConvGeometry;

pub(crate) const LN_EPS: f64 = 1e-5;

/// Convolution with `{prefix}.weight` and `{prefix}.bias`.
pub fn conv(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var, geom: ConvGeometry) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.weight"))?;
    let b = tape.param(store, &format!("{prefix}.bias"))?;
    tape.conv2d(x, w, Some(b), geom)
}

pub fn conv1x1(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    conv(tape, store, prefix, x, ConvGeometry::same(1))
}

pub fn conv3x3(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    conv(tape, store, prefix, x, ConvGeometry::same(3))
}

/// Affine map on the last axis with `{prefix}.weight` `[Cin, Cout]` and `{prefix}.bias`.
pub fn linear(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.weight"))?;
    let b = tape.param(store, &format!("{prefix}.bias"))?;
    tape.linear(x, w, Some(b))
}

/// Layer norm over `axis` with `{prefix}.gain` / `{prefix}.shift`.
pub fn layer_norm(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var, axis: usize) -> Result<Var> {
    let g = tape.param(store, &format!("{prefix}.gain"))?;
    let s = tape.param(store, &format!("{prefix}.shift"))?;
    tape.layer_norm(x, axis, g, s, LN_EPS)
}

/// Layer norm over the last axis (token features).
pub fn layer_norm_last(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let axis = tape.shape(x).len() - 1;
    layer_norm(tape, store, prefix, x, axis)
}

/// Layer norm over channels at every spatial location of a `[B, C, H, W]` map.
pub fn layer_norm_channels(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    layer_norm(tape, store, prefix, x, 1)
}
