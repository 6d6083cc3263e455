//! Trainable wavelet filter bank.
//!
//! One lowpass and one highpass kernel per input variable. Each iteration
//! convolves the running lowpass signal with both kernels (same padding,
//! per channel), emits the highpass response as a pyramid level, and
//! decimates the lowpass response for the next iteration. Level i therefore
//! has length `ceil(T / d^(i-1))`: the first level is full resolution and the
//! lowpass branch alone is downsampled. The final lowpass residue is
//! discarded.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Padding};
use crate::rng::rng_from_seed;
use crate::tensor::Tensor;

/// Trainable filter-bank parameters.
#[derive(Debug, Clone)]
pub struct NwlParams {
    /// Lowpass kernels, one column per variable: `[tau x c]`.
    pub lowpass: Tensor,
    /// Highpass kernels: `[tau x c]`.
    pub highpass: Tensor,
    /// Pyramid depth k.
    pub depth: usize,
    /// Per-level downsampling ratio d.
    pub ratio: usize,
    /// Levels shorter than this are not produced.
    pub min_length: usize,
}

pub const DEFAULT_MIN_LENGTH: usize = 4;

impl NwlParams {
    /// Random initialization: both kernels i.i.d. uniform in
    /// `[-1/sqrt(tau), 1/sqrt(tau)]`, reproducible from the seed.
    pub fn init(channels: usize, tau: usize, depth: usize, seed: u64) -> Result<Self> {
        Self::init_with_rng(channels, tau, depth, &mut rng_from_seed(seed))
    }

    pub fn init_with_rng(
        channels: usize,
        tau: usize,
        depth: usize,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        if channels < 1 || tau < 2 || depth < 1 {
            return Err(Error::Argument(format!(
                "wavelet init: need channels >= 1, tau >= 2, depth >= 1, got c={channels}, tau={tau}, k={depth}"
            )));
        }
        let scale = 1.0 / (tau as f64).sqrt();
        let lowpass = Tensor::uniform(vec![tau, channels], scale, rng).with_grad();
        let highpass = Tensor::uniform(vec![tau, channels], scale, rng).with_grad();
        Ok(NwlParams {
            lowpass,
            highpass,
            depth,
            ratio: 2,
            min_length: DEFAULT_MIN_LENGTH,
        })
    }

    /// Unit-impulse kernels (identity convolution); handy for shape and
    /// covariance tests where the transform must reduce to pure decimation.
    pub fn impulse(channels: usize, tau: usize, depth: usize) -> Result<Self> {
        if channels < 1 || tau < 2 || depth < 1 {
            return Err(Error::Argument("wavelet impulse: bad dimensions".into()));
        }
        let center = tau / 2;
        let mut data = vec![0.0; tau * channels];
        for v in 0..channels {
            data[center * channels + v] = 1.0;
        }
        let kernels = Tensor::new(vec![tau, channels], data)?;
        Ok(NwlParams {
            lowpass: kernels.clone().with_grad(),
            highpass: kernels.with_grad(),
            depth,
            ratio: 2,
            min_length: DEFAULT_MIN_LENGTH,
        })
    }

    pub fn channels(&self) -> usize {
        self.lowpass.shape()[1]
    }
}

/// Ordered per-level feature maps with geometrically decreasing lengths.
#[derive(Debug, Clone)]
pub struct Pyramid {
    pub levels: Vec<NodeId>,
}

impl Pyramid {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

/// `ceil(T / d^(i-1))` for i = 1..k, truncated at the first level shorter
/// than `min_length`.
pub fn expected_pyramid_lengths(t: usize, k: usize, d: usize, min_length: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(k);
    let mut len = t;
    for i in 0..k {
        if len < min_length && i > 0 {
            break;
        }
        out.push(len);
        len = len.div_ceil(d);
    }
    out
}

/// Filter-bank forward pass: returns the highpass pyramid H_1..H_k. The
/// requested depth is truncated when a level would fall below `min_length`.
pub fn nwl_forward(g: &mut Graph, x: NodeId, params: &NwlParams, bound: &NwlNodes) -> Result<Pyramid> {
    let shape = g.value(x).shape();
    if shape.len() != 2 {
        return Err(Error::Dimension(format!("wavelet input: expected [T x c], got {shape:?}")));
    }
    let (t, c) = (shape[0], shape[1]);
    if c != params.channels() {
        return Err(Error::Dimension(format!(
            "wavelet input has {c} channels, kernels expect {}",
            params.channels()
        )));
    }
    if t < params.ratio {
        return Err(Error::Degenerate(format!(
            "series length {t} shorter than downsampling ratio {}",
            params.ratio
        )));
    }
    let mut levels = Vec::with_capacity(params.depth);
    let mut lowpass = x;
    for i in 0..params.depth {
        let cur_len = g.value(lowpass).shape()[0];
        if i > 0 && cur_len < params.min_length {
            break;
        }
        let high = g.channelwise_conv1d(lowpass, bound.highpass, 1, Padding::Same)?;
        levels.push(high);
        if i + 1 < params.depth {
            let low = g.channelwise_conv1d(lowpass, bound.lowpass, 1, Padding::Same)?;
            lowpass = g.downsample(low, params.ratio)?;
        }
    }
    Ok(Pyramid { levels })
}

/// Graph bindings of the two kernel tensors.
pub struct NwlNodes {
    pub lowpass: NodeId,
    pub highpass: NodeId,
}

pub fn bind_nwl(g: &mut Graph, params: &NwlParams) -> Result<NwlNodes> {
    Ok(NwlNodes {
        lowpass: g.leaf(&params.lowpass)?,
        highpass: g.leaf(&params.highpass)?,
    })
}
