//! Mini-batch SGD over the full objective.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{augment_with, MultimodalDataset};
use crate::error::{Error, Result};
use crate::eval::{argmax_rows, hungarian_assign};
use crate::losses::{objective, LabelMapping, LossValues, LossWeights};
use crate::model::{BatchViews, EncoderStack};
use crate::numerics::{Matrix, RngSeed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub weights: LossWeights,
    pub noise_sigma: f64,
    pub drop_rate: f64,
    pub seed: RngSeed,
    /// Epochs between label-mapping refreshes.
    pub map_refresh: usize,
    /// Recompute the mapping on every batch instead.
    pub map_per_batch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 128,
            lr0: 0.1,
            weights: LossWeights::default(),
            noise_sigma: 0.1,
            drop_rate: 0.1,
            seed: RngSeed(0),
            map_refresh: 1,
            map_per_batch: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        // lr0 = 0 is accepted so that a zero-step run can be expressed.
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be a finite non-negative number");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative");
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return bad("drop_rate must lie in [0, 1)");
        }
        if self.map_refresh == 0 {
            return bad("map_refresh must be at least 1");
        }
        self.weights.validate()
    }
}

pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Maximum-agreement correspondence between the two modalities' new-class
/// predictions. Rows where either prediction is an old class are ignored.
pub fn compute_label_mapping(
    pred_x: &[usize],
    pred_y: &[usize],
    num_old: usize,
    num_classes: usize,
) -> Result<LabelMapping> {
    if pred_x.len() != pred_y.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} x predictions, {} y predictions",
            pred_x.len(),
            pred_y.len()
        )));
    }
    if num_old > num_classes {
        return Err(Error::InvalidConfig(format!("{num_old} old classes of {num_classes}")));
    }
    let n_new = num_classes - num_old;
    let mut perm: Vec<usize> = (0..num_classes).collect();
    if n_new == 0 {
        return LabelMapping::new(perm, num_old);
    }
    let mut cost = Matrix::zeros(n_new, n_new);
    for (&px, &py) in pred_x.iter().zip(pred_y) {
        if px >= num_old && py >= num_old && px < num_classes && py < num_classes {
            cost[(py - num_old, px - num_old)] -= 1.0;
        }
    }
    let assignment = hungarian_assign(&cost)?;
    for (a, &b) in assignment.mapping.iter().enumerate() {
        perm[num_old + a] = num_old + b;
    }
    LabelMapping::new(perm, num_old)
}

/// Clean-forward outputs on a set of rows.
#[derive(Debug, Clone)]
pub struct HeadPredictions {
    pub pred_x: Vec<usize>,
    pub pred_y: Vec<usize>,
    pub pred_fused: Vec<usize>,
    pub logits_x: Matrix,
    pub logits_y: Matrix,
    pub h_x: Matrix,
    pub h_y: Matrix,
}

pub fn predict(model: &EncoderStack, ds: &MultimodalDataset, idx: &[usize]) -> Result<HeadPredictions> {
    let v = model.forward_view(&ds.x_rows(idx), &ds.y_rows(idx))?;
    Ok(HeadPredictions {
        pred_x: argmax_rows(&v.x.logits),
        pred_y: argmax_rows(&v.y.logits),
        pred_fused: argmax_rows(&v.fused.logits),
        logits_x: v.x.logits,
        logits_y: v.y.logits,
        h_x: v.x.h,
        h_y: v.y.h,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate of the epoch's first step.
    pub lr: f64,
    /// Mean over the epoch's batches.
    pub losses: LossValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub steps: usize,
    pub mapping: LabelMapping,
}

impl TrainHistory {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        writeln!(out, "epoch,lr,rep_u,rep_s,rep_c,cls_u,cls_s,cls_c,entropy,fusion,total").map_err(io)?;
        for r in &self.epochs {
            let l = &r.losses;
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.epoch, r.lr, l.rep_u, l.rep_s, l.rep_c, l.cls_u, l.cls_s, l.cls_c, l.entropy, l.fusion, l.total
            )
            .map_err(io)?;
        }
        out.flush().map_err(io)
    }
}

fn batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    if order.len() < batch_size {
        return vec![order];
    }
    order.chunks_exact(batch_size).collect()
}

fn augmented(m: &Matrix, cfg: &TrainConfig, rng: &mut impl rand::Rng) -> Matrix {
    let mut out = m.clone();
    for i in 0..m.nrows() {
        let row: Vec<f64> = m.row(i).iter().copied().collect();
        let aug = augment_with(&row, cfg.noise_sigma, cfg.drop_rate, rng);
        for (j, v) in aug.into_iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    out
}

fn refresh_mapping(model: &EncoderStack, ds: &MultimodalDataset, idx: &[usize]) -> Result<LabelMapping> {
    let k = model.num_classes();
    if idx.is_empty() {
        return LabelMapping::new((0..k).collect(), ds.num_old);
    }
    let p = predict(model, ds, idx)?;
    compute_label_mapping(&p.pred_x, &p.pred_y, ds.num_old, k)
}

/// Trains `model` in place on every row of `ds`, labels visible only on the
/// labelled rows.
pub fn train(mut model: EncoderStack, ds: &MultimodalDataset, cfg: &TrainConfig) -> Result<(EncoderStack, TrainHistory)> {
    cfg.validate()?;
    ds.validate()?;
    let c = &model.config;
    if c.d_x != ds.dims.0 || c.d_y != ds.dims.1 {
        return Err(Error::DimensionMismatch(format!(
            "model expects ({}, {}) features, dataset has {:?}",
            c.d_x, c.d_y, ds.dims
        )));
    }
    if c.num_classes < ds.num_classes() {
        return Err(Error::DimensionMismatch(format!(
            "model has {} prototypes for {} classes",
            c.num_classes,
            ds.num_classes()
        )));
    }
    if ds.len() < 2 {
        return Err(Error::DegenerateBatch(ds.len()));
    }

    let labels = ds.visible_labels();
    let unlabeled = ds.unlabeled_indices();
    let per_epoch = batches(&ds.all_indices(), cfg.batch_size).len();
    let total_steps = per_epoch * cfg.epochs;
    let mut order = ds.all_indices();
    let mut mapping = LabelMapping::identity(model.num_classes(), ds.num_old);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let mut rng = cfg.seed.derive(epoch as u64 + 1).rng();
        order.shuffle(&mut rng);
        if !cfg.map_per_batch && epoch % cfg.map_refresh == 0 {
            mapping = refresh_mapping(&model, ds, &unlabeled)?;
        }
        let lr_first = cosine_lr(step, total_steps, cfg.lr0);
        let mut sum = LossValues::default();
        let batch_list = batches(&order, cfg.batch_size);
        for (b, idx) in batch_list.iter().enumerate() {
            let (x, y) = (ds.x_rows(idx), ds.y_rows(idx));
            let views = BatchViews {
                x_prime: augmented(&x, cfg, &mut rng),
                y_prime: augmented(&y, cfg, &mut rng),
                x: augmented(&x, cfg, &mut rng),
                y: augmented(&y, cfg, &mut rng),
            };
            if cfg.map_per_batch {
                mapping = refresh_mapping(&model, ds, idx)?;
            }
            let batch_labels: Vec<Option<usize>> = idx.iter().map(|&i| labels[i]).collect();
            let out = objective(&model, &views, &batch_labels, &mapping, &cfg.weights)?;
            if !out.values.total.is_finite() || !out.grads.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            let lr = cosine_lr(step, total_steps, cfg.lr0);
            if lr != 0.0 {
                model.axpy(-lr, &out.grads);
                model.normalize_prototypes();
            }
            step += 1;
            add_values(&mut sum, &out.values);
        }
        scale_values(&mut sum, 1.0 / batch_list.len() as f64);
        history.push(EpochRecord {
            epoch,
            lr: lr_first,
            losses: sum,
        });
    }
    Ok((
        model,
        TrainHistory {
            epochs: history,
            steps: step,
            mapping,
        },
    ))
}

fn add_values(acc: &mut LossValues, v: &LossValues) {
    acc.rep_u += v.rep_u;
    acc.rep_s += v.rep_s;
    acc.rep_c += v.rep_c;
    acc.cls_u += v.cls_u;
    acc.cls_s += v.cls_s;
    acc.cls_c += v.cls_c;
    acc.entropy += v.entropy;
    acc.fusion += v.fusion;
    acc.total += v.total;
}

fn scale_values(acc: &mut LossValues, s: f64) {
    for f in [
        &mut acc.rep_u,
        &mut acc.rep_s,
        &mut acc.rep_c,
        &mut acc.cls_u,
        &mut acc.cls_s,
        &mut acc.cls_c,
        &mut acc.entropy,
        &mut acc.fusion,
        &mut acc.total,
    ] {
        *f *= s;
    }
}
