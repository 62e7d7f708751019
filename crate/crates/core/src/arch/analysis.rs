use serde::Serialize;

use super::{ArchSpec, LayerOp, Post};
use crate::error::{Error, Result};
use crate::kernels::{conv_out_size, conv_transpose_out_size, effective_kernel};
use crate::spap::AtrousSpec;

fn spatial(op: &'static str, size: Option<usize>, input: [usize; 3]) -> Result<usize> {
    size.ok_or_else(|| Error::InvalidShape { shape: input.to_vec(), reason: format!("{op} output would be empty") })
}

/// Output `(h, w)` of an atrous layer, checking that every branch lines up with the base.
fn atrous_hw(a: &AtrousSpec, input: [usize; 3]) -> Result<(usize, usize)> {
    let h = spatial("atrous_disc", conv_out_size(input[1], a.kernel, a.stride, a.pad, 1), input)?;
    let w = spatial("atrous_disc", conv_out_size(input[2], a.kernel, a.stride, a.pad, 1), input)?;
    for geom in a.branch_geoms(input[1])? {
        if conv_out_size(input[2], a.branch_kernel, geom.stride, geom.pad, geom.dilation) != Some(w) {
            return Err(Error::InvalidShape { shape: input.to_vec(), reason: format!("atrous rate {} does not align on both axes", geom.dilation) });
        }
    }
    Ok((h, w))
}

pub(super) fn output_shape(op: &LayerOp, input: [usize; 3]) -> Result<[usize; 3]> {
    let [c, h, w] = input;
    Ok(match op {
        LayerOp::Conv(s) => [
            s.out,
            spatial("conv", conv_out_size(h, s.k, s.stride, s.pad, s.dilation), input)?,
            spatial("conv", conv_out_size(w, s.k, s.stride, s.pad, s.dilation), input)?,
        ],
        LayerOp::Deconv(s) => [
            s.out,
            spatial("deconv", conv_transpose_out_size(h, s.k, s.stride, s.pad, 1), input)?,
            spatial("deconv", conv_transpose_out_size(w, s.k, s.stride, s.pad, 1), input)?,
        ],
        LayerOp::Linear { out, .. } => [*out, 1, 1],
        LayerOp::Norm(_) | LayerOp::Activation(_) => input,
        LayerOp::Spap(cfg) => {
            if cfg.channels != c {
                return Err(Error::InvalidShape { shape: input.to_vec(), reason: format!("spap built for {} channels", cfg.channels) });
            }
            input
        }
        LayerOp::AtrousDisc { atrous, out, .. } => {
            let (oh, ow) = atrous_hw(atrous, input)?;
            [*out, oh, ow]
        }
        LayerOp::Reshape { c: rc, h: rh, w: rw } => {
            if rc * rh * rw != c * h * w {
                return Err(Error::InvalidShape { shape: input.to_vec(), reason: format!("cannot reshape to ({rc}, {rh}, {rw})") });
            }
            [*rc, *rh, *rw]
        }
        LayerOp::ResBlock { .. } => input,
    })
}

fn norm_params(post: &Post, channels: usize) -> usize {
    if post.norm.is_some() {
        2 * channels
    } else {
        0
    }
}

fn conv_params(k: usize, c_in: usize, c_out: usize) -> usize {
    k * k * c_in * c_out + c_out
}

/// Exact parameter count of one layer given its input shape.
pub(super) fn layer_params(op: &LayerOp, input: [usize; 3]) -> usize {
    let c = input[0];
    match op {
        LayerOp::Conv(s) | LayerOp::Deconv(s) => conv_params(s.k, c, s.out) + norm_params(&s.post, s.out),
        LayerOp::Linear { out, post, .. } => input.iter().product::<usize>() * out + out + norm_params(post, *out),
        LayerOp::Norm(_) => 2 * c,
        LayerOp::Activation(_) | LayerOp::Reshape { .. } => 0,
        LayerOp::Spap(cfg) => cfg.param_count(),
        LayerOp::AtrousDisc { atrous, out, post, .. } => {
            conv_params(atrous.kernel, c, *out) + atrous.rates.len() * conv_params(atrous.branch_kernel, c, *out) + norm_params(post, *out)
        }
        LayerOp::ResBlock { k, norm, .. } => 2 * conv_params(*k, c, c) + if norm.is_some() { 4 * c } else { 0 },
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerParams {
    pub label: String,
    pub kind: &'static str,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamReport {
    pub layers: Vec<LayerParams>,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RfRow {
    pub label: String,
    pub kind: &'static str,
    pub receptive_field: usize,
    pub jump: usize,
    pub output_shape: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RfReport {
    pub rows: Vec<RfRow>,
    pub final_rf: usize,
    /// First fully connected layer, where the analysis stops.
    pub stopped_at: Option<String>,
}

/// Receptive field of a cascade of pyramid branches joined by attention gates.
fn spap_extent(cfg: &crate::spap::SpapConfig) -> usize {
    let branches = cfg.branches();
    let mut acc = effective_kernel(branches[0].kernel, branches[0].dilation);
    for b in &branches[1..] {
        acc = acc.max(effective_kernel(b.kernel, b.dilation)) + cfg.gate.kernel - 1;
    }
    acc
}

impl ArchSpec {
    pub fn param_count(&self) -> Result<ParamReport> {
        let mut shape = self.input;
        let mut layers = Vec::new();
        for l in &self.layers {
            layers.push(LayerParams { label: l.label.clone(), kind: l.op.kind(), count: layer_params(&l.op, shape) });
            shape = output_shape(&l.op, shape)?;
        }
        let total = layers.iter().map(|l| l.count).sum();
        Ok(ParamReport { layers, total })
    }

    /// `r ← r + (k_eff − 1)·j`, `j ← j·s` from `r = j = 1`; parallel paths take their maximum.
    ///
    /// Normalization and activations are transparent. The analysis stops at the first
    /// linear layer and rejects transposed convolutions and non-trivial reshapes.
    pub fn receptive_field(&self) -> Result<RfReport> {
        let (mut r, mut j) = (1usize, 1usize);
        let mut shape = self.input;
        let mut rows = Vec::new();
        let mut stopped_at = None;
        for l in &self.layers {
            let next = output_shape(&l.op, shape)?;
            match &l.op {
                LayerOp::Conv(s) => {
                    r += (effective_kernel(s.k, s.dilation) - 1) * j;
                    j *= s.stride;
                }
                LayerOp::AtrousDisc { atrous, .. } => {
                    let widest = atrous.rates.iter().map(|&d| effective_kernel(atrous.branch_kernel, d)).fold(atrous.kernel, usize::max);
                    r += (widest - 1) * j;
                    j *= atrous.stride;
                }
                LayerOp::Spap(cfg) => r += (spap_extent(cfg) - 1) * j,
                LayerOp::ResBlock { k, .. } => r += 2 * (k - 1) * j,
                LayerOp::Norm(_) | LayerOp::Activation(_) => {}
                LayerOp::Reshape { .. } if next == shape => {}
                LayerOp::Linear { .. } => {
                    stopped_at = Some(l.label.clone());
                    break;
                }
                LayerOp::Deconv(_) | LayerOp::Reshape { .. } => {
                    return Err(Error::invalid(format!(
                        "receptive field is defined for downsampling stacks; `{}` is a {}",
                        l.label,
                        l.op.kind()
                    )))
                }
            }
            rows.push(RfRow { label: l.label.clone(), kind: l.op.kind(), receptive_field: r, jump: j, output_shape: next });
            shape = next;
        }
        Ok(RfReport { rows, final_rf: r, stopped_at })
    }
}
