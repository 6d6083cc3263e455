//! Training loop: Adam over full-sequence minibatches with global-norm
//! gradient clipping and early stopping on validation loss.
//!
//! Sequences are never truncated; a batch is a set of whole series whose
//! gradients are averaged. The loop is single-threaded so that a fixed seed
//! reproduces the parameter trajectory bit for bit.

use crate::adam::{adam_step, clip_global_norm, AdamState};
use crate::data::{make_targets, LabeledSeries};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{multitask_loss, HeadKind, Model};
use crate::rng::{rng_from_seed, splitmix64};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// Full sequences per optimizer step.
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
    /// Weight of the activity term for multitask heads.
    pub multitask_lambda: f64,
    /// Global gradient norm cap; clips are counted in the history.
    pub clip_norm: f64,
    /// Target smear radius around each event anchor.
    pub target_smear: usize,
    /// Module prefixes ("nwl", "cnn", "prl", "head") excluded from updates.
    pub frozen: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            batch_size: 4,
            max_epochs: 30,
            patience: 5,
            val_fraction: 0.2,
            seed: 0,
            multitask_lambda: 1.0,
            clip_norm: 5.0,
            target_smear: 1,
            frozen: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience < 1 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 0.5) {
            return Err(Error::Config("validation fraction must be in (0, 0.5)".into()));
        }
        if self.batch_size < 1 || self.max_epochs < 1 {
            return Err(Error::Config("batch size and epoch count must be >= 1".into()));
        }
        if self.lr < 0.0 || self.clip_norm <= 0.0 || self.multitask_lambda < 0.0 {
            return Err(Error::Config("negative rate or weight".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Optimizer steps in this epoch where gradient clipping fired.
    pub clipped_steps: usize,
}

#[derive(Debug, Clone, Default)]
pub struct History {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,clipped_steps\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{},{}", e.epoch, e.train_loss, e.val_loss, e.clipped_steps);
        }
        out
    }

    pub fn best_val_loss(&self) -> Option<f64> {
        self.epochs.get(self.best_epoch).map(|e| e.val_loss)
    }
}

/// Loss of one series under the model's head (graph left alive so callers
/// can run backward).
fn series_loss_node(
    model: &Model,
    g: &mut Graph,
    series: &LabeledSeries,
    cfg: &TrainConfig,
) -> Result<(crate::graph::NodeId, Vec<crate::graph::NodeId>)> {
    let bound = model.bind(g, &series.data)?;
    let t_out = g.value(bound.scores).shape()[0];
    let targets = make_targets(series, t_out, series.len(), cfg.target_smear)?;
    let loss = match (&model.config.head, &bound.activity_logits) {
        (HeadKind::Multitask(n), Some(logits)) => {
            let acts = activity_targets(series, t_out, *n, model.granularity())?;
            match acts {
                Some(labels) => multitask_loss(
                    g,
                    bound.scores,
                    &targets,
                    *logits,
                    &labels,
                    cfg.multitask_lambda,
                )?,
                None => g.bce_loss(bound.scores, &targets)?,
            }
        }
        _ => g.bce_loss(bound.scores, &targets)?,
    };
    Ok((loss, bound.param_ids))
}

/// Activity labels downsampled to output granularity (center sample per
/// output step); None when the series has no labels.
fn activity_targets(
    series: &LabeledSeries,
    t_out: usize,
    head_units: usize,
    granularity: usize,
) -> Result<Option<Vec<usize>>> {
    let Some(acts) = &series.activities else {
        return Ok(None);
    };
    let classes = head_units - 1;
    let t = series.len();
    let mut out = Vec::with_capacity(t_out);
    for step in 0..t_out {
        let src = (step * granularity + granularity / 2).min(t - 1);
        let label = acts[src];
        if label < 0 || label as usize >= classes {
            return Err(Error::Data(format!(
                "activity label {label} out of range 0..{classes}"
            )));
        }
        out.push(label as usize);
    }
    Ok(Some(out))
}

/// Mean loss over a list of series without touching parameters.
pub fn evaluate_loss(model: &Model, series_list: &[LabeledSeries], cfg: &TrainConfig) -> Result<f64> {
    if series_list.is_empty() {
        return Err(Error::Degenerate("cannot evaluate an empty series list".into()));
    }
    let mut total = 0.0;
    for s in series_list {
        let mut g = Graph::new();
        let (loss, _) = series_loss_node(model, &mut g, s, cfg)?;
        total += g.value(loss).data()[0];
    }
    Ok(total / series_list.len() as f64)
}

/// Train in place; returns the per-epoch history. The model ends at the
/// parameters of the epoch with the lowest validation loss.
pub fn train(model: &mut Model, dataset: &[LabeledSeries], cfg: &TrainConfig) -> Result<History> {
    cfg.validate()?;
    if dataset.len() < 2 {
        return Err(Error::Degenerate(
            "training needs at least 2 series (one must serve as validation)".into(),
        ));
    }

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng_from_seed(splitmix64(cfg.seed, 1)));
    let n_val = ((dataset.len() as f64 * cfg.val_fraction).round() as usize)
        .clamp(1, dataset.len() - 1);
    let val_idx = &order[..n_val];
    let train_idx = order[n_val..].to_vec();
    let val_set: Vec<LabeledSeries> = val_idx.iter().map(|&i| dataset[i].clone()).collect();

    let names = model.param_names();
    let frozen: Vec<bool> = names
        .iter()
        .map(|n| cfg.frozen.iter().any(|p| n == p || n.starts_with(&format!("{p}."))))
        .collect();

    let mut adam = AdamState::new(&model.params(), cfg.lr);

    let mut shuffle_rng = rng_from_seed(splitmix64(cfg.seed, 2));
    let mut history = History::default();
    let mut best_val = f64::INFINITY;
    let mut best_params: Vec<Tensor> = Vec::new();
    let mut since_best = 0usize;
    let mut global_step = 0usize;

    for epoch in 0..cfg.max_epochs {
        let mut idx = train_idx.clone();
        idx.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        let mut clipped_steps = 0usize;
        for batch in idx.chunks(cfg.batch_size) {
            global_step += 1;
            for t in model.params_mut() {
                t.zero_grad();
            }
            let inv = 1.0 / batch.len() as f64;
            for &si in batch {
                let series = &dataset[si];
                let mut g = Graph::new();
                let (loss, param_ids) = series_loss_node(model, &mut g, series, cfg)?;
                let loss_val = g.value(loss).data()[0];
                if !loss_val.is_finite() {
                    return Err(Error::Divergence { step: global_step, loss: loss_val });
                }
                epoch_loss += loss_val;
                seen += 1;
                g.backward(loss)?;
                for (i, t) in model.params_mut().into_iter().enumerate() {
                    let grad = g.grad(param_ids[i]).ok_or_else(|| {
                        Error::Argument(format!("parameter {i} missing a gradient"))
                    })?;
                    let dst = t.grad_mut().expect("parameters track gradients");
                    for (d, s) in dst.iter_mut().zip(grad) {
                        *d += s * inv;
                    }
                }
            }
            let mut refs = model.params_mut();
            if clip_global_norm(&mut refs, cfg.clip_norm) {
                clipped_steps += 1;
            }
            adam_step(&mut refs, &mut adam, &frozen)?;
        }

        let train_loss = if seen > 0 { epoch_loss / seen as f64 } else { f64::NAN };
        let val_loss = evaluate_loss(model, &val_set, cfg)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence { step: global_step, loss: val_loss });
        }
        history.epochs.push(EpochStats { epoch, train_loss, val_loss, clipped_steps });

        if val_loss < best_val {
            best_val = val_loss;
            history.best_epoch = epoch;
            best_params.clear();
            model.visit_params(&mut |_, t| best_params.push(t.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    if !best_params.is_empty() {
        let mut i = 0;
        model.visit_params_mut(&mut |_, t| {
            t.data_mut().copy_from_slice(best_params[i].data());
            i += 1;
        });
    }
    Ok(history)
}
