//! Model assembly: the pyramid recurrent network and its baselines, the
//! detection/multitask heads, and the losses.
//!
//! All four kinds share the core CNN stack:
//!
//! * `cnn`: CNN on the raw series, head on its features.
//! * `rcn`: CNN, then a flat recurrent chain, head on the states.
//! * `dwn`: wavelet pyramid, shared CNN per level, mean fusion, head.
//! * `prn`: wavelet pyramid, shared CNN per level, pyramid recurrent layer,
//!   head on the finest level's states.
//!
//! Output granularity is input length divided by the CNN's pooling product
//! (1/16 for the default stack).

use crate::checkpoint;
use crate::dwn::{bind_cnn, cnn_stream, core_arch, dwn_forward, dwn_fuse, CnnParams, ConvLayerSpec};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::prl::{bind_prl, prl_forward, CellKind, PrlCell, PrlParams};
use crate::rng::rng_from_seed;
use crate::tensor::Tensor;
use crate::wavelet::{bind_nwl, expected_pyramid_lengths, nwl_forward, NwlParams, Pyramid};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Cnn,
    Rcn,
    Dwn,
    Prn,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ModelKind::Cnn => "cnn",
            ModelKind::Rcn => "rcn",
            ModelKind::Dwn => "dwn",
            ModelKind::Prn => "prn",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// One sigmoid change score per output step.
    Binary,
    /// N output units: N-1 activity logits plus one change score.
    Multitask(usize),
}

impl HeadKind {
    pub fn out_width(&self) -> usize {
        match self {
            HeadKind::Binary => 1,
            HeadKind::Multitask(n) => *n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Input variables c.
    pub channels: usize,
    /// Pyramid depth k (wavelet kinds only).
    pub wavelet_depth: usize,
    /// Wavelet kernel size.
    pub wavelet_kernel: usize,
    /// Downsampling ratio d between pyramid levels.
    pub ratio: usize,
    pub cnn: Vec<ConvLayerSpec>,
    pub cell: CellKind,
    /// Recurrent state width.
    pub hidden: usize,
    pub head: HeadKind,
    /// Share recurrent cell parameters across levels (ablation flag).
    pub prl_shared: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// Full-size configuration: 7-level depth-3 wavelet, 128-feature CNN,
    /// 256-unit LSTM.
    pub fn full(kind: ModelKind, channels: usize) -> Self {
        ModelConfig {
            kind,
            channels,
            wavelet_depth: 7,
            wavelet_kernel: 3,
            ratio: 2,
            cnn: core_arch(128),
            cell: CellKind::Lstm,
            hidden: 256,
            head: HeadKind::Binary,
            prl_shared: true,
            seed: 0,
        }
    }

    /// Reduced widths for desk-scale experiments.
    pub fn desk(kind: ModelKind, channels: usize) -> Self {
        ModelConfig {
            kind,
            channels,
            wavelet_depth: 4,
            wavelet_kernel: 3,
            ratio: 2,
            cnn: core_arch(32),
            cell: CellKind::Lstm,
            hidden: 64,
            head: HeadKind::Binary,
            prl_shared: true,
            seed: 0,
        }
    }

    pub fn uses_wavelet(&self) -> bool {
        matches!(self.kind, ModelKind::Dwn | ModelKind::Prn)
    }

    pub fn uses_recurrence(&self) -> bool {
        matches!(self.kind, ModelKind::Rcn | ModelKind::Prn)
    }

    fn validate(&self) -> Result<()> {
        if self.channels < 1 {
            return Err(Error::Config("model needs at least one input channel".into()));
        }
        if self.cnn.is_empty() {
            return Err(Error::Config("CNN stack must not be empty".into()));
        }
        if self.uses_wavelet() {
            if self.wavelet_kernel < 2 {
                return Err(Error::Config("wavelet kernel size must be >= 2".into()));
            }
            if self.wavelet_depth < 1 {
                return Err(Error::Config("wavelet depth must be >= 1".into()));
            }
            if self.ratio < 2 {
                return Err(Error::Config("pyramid ratio must be >= 2".into()));
            }
        }
        if self.uses_recurrence() && self.hidden < 1 {
            return Err(Error::Config("recurrent width must be >= 1".into()));
        }
        if let HeadKind::Multitask(n) = self.head {
            if n < 2 {
                return Err(Error::Config("multitask head needs at least 2 units".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    /// `[in_width x out]`.
    pub weight: Tensor,
    /// `[out]`.
    pub bias: Tensor,
}

/// A built model: configuration plus parameter bundles for each stage.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub nwl: Option<NwlParams>,
    pub cnn: CnnParams,
    pub prl: Option<PrlParams>,
    pub head: HeadParams,
}

/// Deterministic construction from a config: same config and seed give
/// bit-identical parameters.
pub fn build_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut rng = rng_from_seed(config.seed);
    let nwl = if config.uses_wavelet() {
        let mut p = NwlParams::init_with_rng(
            config.channels,
            config.wavelet_kernel,
            config.wavelet_depth,
            &mut rng,
        )?;
        p.ratio = config.ratio;
        Some(p)
    } else {
        None
    };
    let cnn = CnnParams::init(config.channels, &config.cnn, &mut rng)?;
    let features = cnn.out_features();
    let prl = if config.uses_recurrence() {
        let levels = if config.kind == ModelKind::Prn { config.wavelet_depth } else { 1 };
        Some(PrlParams::init(
            config.cell,
            features,
            config.hidden,
            config.ratio,
            levels,
            config.prl_shared,
            &mut rng,
        )?)
    } else {
        None
    };
    let head_in = if config.uses_recurrence() { config.hidden } else { features };
    let out = config.head.out_width();
    let scale = 1.0 / (head_in as f64).sqrt();
    let head = HeadParams {
        weight: Tensor::uniform(vec![head_in, out], scale, &mut rng).with_grad(),
        bias: Tensor::zeros(vec![out]).with_grad(),
    };
    Ok(Model { config: config.clone(), nwl, cnn, prl, head })
}

/// Sigmoid detection head over a state sequence: `[T x n] -> [T]` scores
/// strictly inside (0, 1).
pub fn detect_head(g: &mut Graph, h_seq: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
    let pre = g.matmul(h_seq, weight)?;
    let pre = g.add_bias(pre, bias)?;
    let t = g.value(pre).shape()[0];
    let flat = g.reshape(pre, vec![t])?;
    g.sigmoid(flat)
}

/// Mean binary cross-entropy; scores are clamped away from 0/1. This is the
/// minimized form: it is zero at perfect prediction and positive elsewhere.
pub fn bce_loss(g: &mut Graph, scores: NodeId, targets: &[f64]) -> Result<NodeId> {
    g.bce_loss(scores, targets)
}

/// Change loss plus `lambda` times the activity classification loss.
pub fn multitask_loss(
    g: &mut Graph,
    change_scores: NodeId,
    change_targets: &[f64],
    activity_logits: NodeId,
    activity_targets: &[usize],
    lambda: f64,
) -> Result<NodeId> {
    let change = g.bce_loss(change_scores, change_targets)?;
    if lambda == 0.0 {
        return Ok(change);
    }
    let activity = g.softmax_cross_entropy(activity_logits, activity_targets)?;
    let scaled = g.scale(activity, lambda)?;
    g.add(change, scaled)
}

/// One forward binding of a model on a graph.
pub struct BoundModel {
    /// `[T_out]` change scores in (0, 1).
    pub scores: NodeId,
    /// `[T_out x (N-1)]` for multitask heads.
    pub activity_logits: Option<NodeId>,
    /// Bound parameter leaves, aligned with `Model::visit_params` order.
    pub param_ids: Vec<NodeId>,
}

impl Model {
    /// Total downsampling factor P from input steps to output steps.
    pub fn granularity(&self) -> usize {
        self.cnn.total_pool()
    }

    /// Output length for an input of `t` steps (sequential floor divisions
    /// by the pooling strides).
    pub fn out_len(&self, t: usize) -> usize {
        self.cnn.layers.iter().fold(t, |acc, l| acc / l.pool)
    }

    /// Pyramid level lengths for an input of `t` steps and how many survive
    /// the CNN length requirement.
    pub fn pyramid_plan(&self, t: usize) -> (Vec<usize>, usize) {
        match &self.nwl {
            None => (vec![t], 1),
            Some(nwl) => {
                let lens = expected_pyramid_lengths(t, nwl.depth, nwl.ratio, nwl.min_length);
                let p = self.granularity();
                let kept = lens.iter().filter(|&&l| l >= p).count();
                (lens, kept)
            }
        }
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Stable parameter names; same order as [`Model::params`] and
    /// [`Model::params_mut`].
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.nwl.is_some() {
            names.push("nwl.lowpass".into());
            names.push("nwl.highpass".into());
        }
        for i in 0..self.cnn.layers.len() {
            names.push(format!("cnn.{i}.weight"));
            names.push(format!("cnn.{i}.bias"));
        }
        if let Some(prl) = &self.prl {
            for (i, cell) in prl.cells.iter().enumerate() {
                match cell {
                    PrlCell::Simple(_) => {
                        names.push(format!("prl.{i}.w_input"));
                        names.push(format!("prl.{i}.w_recurrent"));
                        names.push(format!("prl.{i}.w_topdown"));
                        names.push(format!("prl.{i}.bias"));
                    }
                    PrlCell::Lstm(_) => {
                        names.push(format!("prl.{i}.w_input"));
                        names.push(format!("prl.{i}.w_recurrent"));
                        names.push(format!("prl.{i}.bias"));
                    }
                }
            }
        }
        names.push("head.weight".into());
        names.push("head.bias".into());
        names
    }

    /// Parameters in visiting order (the graph binds them in this order).
    pub fn params(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = Vec::new();
        if let Some(nwl) = &self.nwl {
            v.push(&nwl.lowpass);
            v.push(&nwl.highpass);
        }
        for l in &self.cnn.layers {
            v.push(&l.weight);
            v.push(&l.bias);
        }
        if let Some(prl) = &self.prl {
            for cell in &prl.cells {
                match cell {
                    PrlCell::Simple(c) => {
                        v.extend([&c.w_input, &c.w_recurrent, &c.w_topdown, &c.bias])
                    }
                    PrlCell::Lstm(c) => v.extend([&c.w_input, &c.w_recurrent, &c.bias]),
                }
            }
        }
        v.push(&self.head.weight);
        v.push(&self.head.bias);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = Vec::new();
        if let Some(nwl) = &mut self.nwl {
            v.push(&mut nwl.lowpass);
            v.push(&mut nwl.highpass);
        }
        for l in &mut self.cnn.layers {
            v.push(&mut l.weight);
            v.push(&mut l.bias);
        }
        if let Some(prl) = &mut self.prl {
            for cell in &mut prl.cells {
                match cell {
                    PrlCell::Simple(c) => {
                        v.extend([&mut c.w_input, &mut c.w_recurrent, &mut c.w_topdown, &mut c.bias])
                    }
                    PrlCell::Lstm(c) => v.extend([&mut c.w_input, &mut c.w_recurrent, &mut c.bias]),
                }
            }
        }
        v.push(&mut self.head.weight);
        v.push(&mut self.head.bias);
        v
    }

    /// Forward pass on a graph; binds every parameter as a gradient leaf.
    pub fn bind(&self, g: &mut Graph, x: &Tensor) -> Result<BoundModel> {
        if x.shape().len() != 2 || x.shape()[1] != self.config.channels {
            return Err(Error::Dimension(format!(
                "model expects [T x {}], got {:?}",
                self.config.channels,
                x.shape()
            )));
        }
        let xi = g.input(x)?;
        let mut param_ids = Vec::new();

        let pyramid = match &self.nwl {
            Some(nwl) => {
                let bound = bind_nwl(g, nwl)?;
                param_ids.push(bound.lowpass);
                param_ids.push(bound.highpass);
                nwl_forward(g, xi, nwl, &bound)?
            }
            None => Pyramid { levels: vec![xi] },
        };

        let cnn_bound = bind_cnn(g, &self.cnn)?;
        param_ids.extend(cnn_bound.param_ids());

        let features = match self.config.kind {
            ModelKind::Cnn | ModelKind::Rcn => {
                cnn_stream(g, pyramid.levels[0], &self.cnn, &cnn_bound)?
            }
            ModelKind::Dwn => {
                let c_pyr = dwn_forward(g, &pyramid, &self.cnn, &cnn_bound)?;
                dwn_fuse(g, &c_pyr, self.config.ratio)?
            }
            ModelKind::Prn => {
                // Consumed below as a pyramid, not a single map.
                let c_pyr = dwn_forward(g, &pyramid, &self.cnn, &cnn_bound)?;
                let prl = self.prl.as_ref().expect("prn has a recurrent stage");
                let bound = bind_prl(g, prl)?;
                param_ids.extend(bound.param_ids());
                prl_forward(g, &c_pyr, prl, &bound)?
            }
        };

        let head_input = match self.config.kind {
            ModelKind::Rcn => {
                let prl = self.prl.as_ref().expect("rcn has a recurrent stage");
                let bound = bind_prl(g, prl)?;
                param_ids.extend(bound.param_ids());
                prl_forward(g, &Pyramid { levels: vec![features] }, prl, &bound)?
            }
            _ => features,
        };

        let w = g.leaf(&self.head.weight)?;
        let b = g.leaf(&self.head.bias)?;
        param_ids.push(w);
        param_ids.push(b);

        match self.config.head {
            HeadKind::Binary => {
                let scores = detect_head(g, head_input, w, b)?;
                Ok(BoundModel { scores, activity_logits: None, param_ids })
            }
            HeadKind::Multitask(n) => {
                let pre = g.matmul(head_input, w)?;
                let pre = g.add_bias(pre, b)?;
                let t = g.value(pre).shape()[0];
                let logits = g.slice_cols(pre, 0, n - 1)?;
                let change = g.slice_cols(pre, n - 1, 1)?;
                let change = g.reshape(change, vec![t])?;
                let scores = g.sigmoid(change)?;
                Ok(BoundModel { scores, activity_logits: Some(logits), param_ids })
            }
        }
    }

    /// Inference-only scores for one series.
    pub fn forward_scores(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, x)?;
        Ok(g.value(bound.scores).data().to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_string(&self.config)
            .map_err(|e| Error::Config(format!("cannot serialize model config: {e}")))?;
        let named: Vec<(String, &Tensor)> =
            self.param_names().into_iter().zip(self.params()).collect();
        checkpoint::save_tensors(path, &header, &named)
    }

    pub fn load(path: &Path) -> Result<Model> {
        let (header, tensors) = checkpoint::load_tensors(path)?;
        let config: ModelConfig = serde_json::from_str(&header)
            .map_err(|e| Error::Checkpoint(format!("bad config header: {e}")))?;
        let mut model = build_model(&config)?;
        let by_name: std::collections::BTreeMap<String, Tensor> = tensors.into_iter().collect();
        let names = model.param_names();
        for (name, t) in names.iter().zip(model.params_mut()) {
            match by_name.get(name) {
                None => {
                    return Err(Error::Checkpoint(format!("checkpoint is missing {name}")));
                }
                Some(loaded) if loaded.shape() != t.shape() => {
                    return Err(Error::Checkpoint(format!(
                        "shape mismatch for {name}: {:?} vs {:?}",
                        loaded.shape(),
                        t.shape()
                    )));
                }
                Some(loaded) => t.data_mut().copy_from_slice(loaded.data()),
            }
        }
        Ok(model)
    }
}
