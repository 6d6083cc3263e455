//! Shared-weight CNN streams over the wavelet pyramid.
//!
//! One CNN parameter set runs on every pyramid level (sharing is structural:
//! each level binds the same graph leaves, so gradients from all levels sum
//! into one buffer). Each layer is a same-padded stride-1 convolution,
//! non-overlapping max pooling, then ReLU. The standalone baseline fuses the
//! per-level outputs by nearest-neighbor upsampling and arithmetic mean.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Padding};
use crate::tensor::Tensor;
use crate::wavelet::Pyramid;
use rand::Rng;

/// One `kernel:features:pool` block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvLayerSpec {
    pub kernel: usize,
    pub features: usize,
    pub pool: usize,
}

/// The core stack used by every model kind, `features` wide.
pub fn core_arch(features: usize) -> Vec<ConvLayerSpec> {
    vec![
        ConvLayerSpec { kernel: 9, features, pool: 4 },
        ConvLayerSpec { kernel: 5, features, pool: 2 },
        ConvLayerSpec { kernel: 5, features, pool: 2 },
    ]
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    /// `[kernel x c_in x c_out]`.
    pub weight: Tensor,
    /// `[c_out]`.
    pub bias: Tensor,
    pub pool: usize,
}

/// Parameters of the shared CNN; one set regardless of pyramid depth.
#[derive(Debug, Clone)]
pub struct CnnParams {
    pub layers: Vec<ConvLayer>,
}

impl CnnParams {
    /// Uniform fan-in initialization, zero biases.
    pub fn init(in_channels: usize, specs: &[ConvLayerSpec], rng: &mut impl Rng) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Config("CNN needs at least one layer".into()));
        }
        let mut layers = Vec::with_capacity(specs.len());
        let mut c_in = in_channels;
        for s in specs {
            if s.kernel < 1 || s.features < 1 || s.pool < 1 {
                return Err(Error::Config(format!("bad CNN layer spec {s:?}")));
            }
            let scale = 1.0 / ((s.kernel * c_in) as f64).sqrt();
            layers.push(ConvLayer {
                weight: Tensor::uniform(vec![s.kernel, c_in, s.features], scale, rng).with_grad(),
                bias: Tensor::zeros(vec![s.features]).with_grad(),
                pool: s.pool,
            });
            c_in = s.features;
        }
        Ok(CnnParams { layers })
    }

    /// Total downsampling P (product of pooling strides).
    pub fn total_pool(&self) -> usize {
        self.layers.iter().map(|l| l.pool).product()
    }

    pub fn out_features(&self) -> usize {
        self.layers.last().map(|l| l.weight.shape()[2]).unwrap_or(0)
    }
}

pub struct CnnNodes {
    layers: Vec<(NodeId, NodeId, usize)>, // weight, bias, pool
}

pub fn bind_cnn(g: &mut Graph, params: &CnnParams) -> Result<CnnNodes> {
    let mut layers = Vec::with_capacity(params.layers.len());
    for l in &params.layers {
        layers.push((g.leaf(&l.weight)?, g.leaf(&l.bias)?, l.pool));
    }
    Ok(CnnNodes { layers })
}

impl CnnNodes {
    pub fn param_ids(&self) -> Vec<NodeId> {
        self.layers.iter().flat_map(|&(w, b, _)| [w, b]).collect()
    }
}

/// One CNN stream over a single pyramid level: length shrinks by the total
/// pooling factor P. The level must be at least P long.
pub fn cnn_stream(g: &mut Graph, x: NodeId, params: &CnnParams, bound: &CnnNodes) -> Result<NodeId> {
    let t_in = g.value(x).shape()[0];
    let p = params.total_pool();
    if t_in < p {
        return Err(Error::Dimension(format!(
            "pyramid level of length {t_in} is shorter than the CNN downsampling factor {p}"
        )));
    }
    let mut cur = x;
    for &(w, b, pool) in &bound.layers {
        let conv = g.conv1d(cur, w, 1, Padding::Same)?;
        let conv = g.add_bias(conv, b)?;
        let pooled = g.max_pool1d(conv, pool)?;
        cur = g.relu(pooled)?;
    }
    Ok(cur)
}

/// Shared CNN over every pyramid level. Levels shorter than the total
/// pooling factor are dropped (padding them would fabricate coarse-scale
/// evidence); errors if nothing survives.
pub fn dwn_forward(
    g: &mut Graph,
    pyramid: &Pyramid,
    params: &CnnParams,
    bound: &CnnNodes,
) -> Result<Pyramid> {
    let p = params.total_pool();
    let mut out = Vec::with_capacity(pyramid.len());
    for &level in &pyramid.levels {
        if g.value(level).shape()[0] < p {
            continue;
        }
        out.push(cnn_stream(g, level, params, bound)?);
    }
    if out.is_empty() {
        return Err(Error::Degenerate(format!(
            "no pyramid level is at least {p} steps long"
        )));
    }
    Ok(Pyramid { levels: out })
}

/// Mean fusion for the standalone wavelet-CNN baseline: every level is
/// upsampled by nearest-neighbor repetition to the length of the finest
/// level (short levels repeat their last frame to align) and averaged.
pub fn dwn_fuse(g: &mut Graph, pyramid: &Pyramid, ratio: usize) -> Result<NodeId> {
    if pyramid.is_empty() {
        return Err(Error::Degenerate("cannot fuse an empty pyramid".into()));
    }
    let out_len = g.value(pyramid.levels[0]).shape()[0];
    let mut acc = pyramid.levels[0];
    let mut factor = 1usize;
    for &level in &pyramid.levels[1..] {
        factor *= ratio;
        let up = g.repeat_to(level, out_len, factor)?;
        acc = g.add(acc, up)?;
    }
    g.scale(acc, 1.0 / pyramid.len() as f64)
}
