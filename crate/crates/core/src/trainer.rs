//! End-to-end training pipelines.
//!
//! Stage order for the part-level variants: learn a labeling classifier
//! on the noisy data, crop every instance, label the crops into
//! part-level multi-labels, jointly train the noisy-posterior network
//! with the single-to-multiple matrix network, estimate the noise
//! transition matrix from anchors, then train the final classifier
//! under the composed corrected risk. The forward baseline skips the
//! cropping and joint stages; the plain-CE baseline trains one network.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{split_train_val, ImageGrid, NoisyDataset, SplitSpec};
use crate::error::{PlmError, Result};
use crate::linalg::{self, argmax};
use crate::nn::MlpModel;
use crate::optim::{sgd_step, OptimizerState, SgdConfig};
use crate::partlab::{
    assign_part_labels, crop_emphasized, crop_random, crop_uniform, saliency_map, CropSet,
    PartLabelVector,
};
use crate::rng::substream;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::transition::{estimate_t_anchor, TransitionMatrix};
use crate::EPS_CLIP;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    PlmF,
    PlmR,
    ForwardBaseline,
    CeBaseline,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::PlmF => "plm_f",
            Variant::PlmR => "plm_r",
            Variant::ForwardBaseline => "forward_baseline",
            Variant::CeBaseline => "ce_baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "plm_f" => Ok(Variant::PlmF),
            "plm_r" => Ok(Variant::PlmR),
            "forward_baseline" => Ok(Variant::ForwardBaseline),
            "ce_baseline" => Ok(Variant::CeBaseline),
            other => Err(PlmError::Config(format!("unknown variant '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropStrategy {
    Uniform,
    Random,
    Emphasized,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropConfig {
    pub strategy: CropStrategy,
    /// Side length of square crops (uniform and random strategies).
    pub size: usize,
    /// Number of random crops; the uniform strategy always takes 5.
    #[serde(default = "default_crop_count")]
    pub count: usize,
    /// Features masked by the emphasized strategy.
    #[serde(default = "default_emphasize")]
    pub emphasize_features: usize,
}

fn default_crop_count() -> usize {
    5
}

/// The slack matrix fine-tunes at a hundredth of the classifier's
/// rate, without momentum. Faster schedules let the forward pull
/// inflate the matrix past its maximum-likelihood resting point.
const SLACK_LR_SCALE: f64 = 0.01;

fn default_emphasize() -> usize {
    64
}

/// Everything one pipeline run needs besides the dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub epochs_labeler: usize,
    pub epochs_joint: usize,
    pub epochs_classifier: usize,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub labeler_opt: SgdConfig,
    pub joint_opt: SgdConfig,
    pub classifier_opt: SgdConfig,
    pub crop: CropConfig,
    pub anchor_count: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn defaults(variant: Variant, seed: u64) -> Self {
        TrainConfig {
            variant,
            epochs_labeler: 20,
            epochs_joint: 20,
            epochs_classifier: 20,
            batch_size: 64,
            hidden: vec![256, 128],
            labeler_opt: SgdConfig::default(),
            joint_opt: SgdConfig::default(),
            classifier_opt: SgdConfig::default(),
            crop: CropConfig {
                strategy: CropStrategy::Uniform,
                size: 22,
                count: 5,
                emphasize_features: 64,
            },
            anchor_count: 10,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs_labeler == 0 || self.epochs_joint == 0 || self.epochs_classifier == 0 {
            return Err(PlmError::Config("every stage needs at least one epoch".into()));
        }
        if self.batch_size == 0 {
            return Err(PlmError::Config("batch size must be at least 1".into()));
        }
        if self.anchor_count == 0 {
            return Err(PlmError::Config("anchor count must be at least 1".into()));
        }
        self.labeler_opt.validate()?;
        self.joint_opt.validate()?;
        self.classifier_opt.validate()?;
        Ok(())
    }
}

/// One metrics row per epoch of one stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub stage: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageTiming {
    pub name: String,
    pub millis: u64,
}

/// Everything a finished pipeline run produced.
#[derive(Debug, Clone)]
pub struct StageArtifacts {
    pub config: TrainConfig,
    pub labeler: Option<MlpModel>,
    /// The network whose softmax estimates the noisy class posterior.
    pub posterior: Option<MlpModel>,
    /// The single-to-multiple matrix network (part-level variants).
    pub matrix_net: Option<MlpModel>,
    pub classifier: MlpModel,
    /// Trainable slack added to the transition matrix (reweighted variant).
    pub slack: Option<Tensor>,
    pub t_estimated: Option<TransitionMatrix>,
    pub part_labels: Option<Vec<PartLabelVector>>,
    pub metrics: Vec<EpochMetrics>,
    pub timings: Vec<StageTiming>,
}

impl StageArtifacts {
    pub fn stage_names(&self) -> Vec<String> {
        self.timings.iter().map(|t| t.name.clone()).collect()
    }

    pub fn total_millis(&self) -> u64 {
        self.timings.iter().map(|t| t.millis).sum()
    }
}

// ---------------------------------------------------------------------
// Shared stage machinery
// ---------------------------------------------------------------------

struct Batcher {
    dim: usize,
    classes: usize,
    n: usize,
    feats: Vec<f64>,
    labels: Vec<usize>,
    part: Option<Vec<f64>>,
}

impl Batcher {
    fn new(ds: &NoisyDataset, part_labels: Option<&[PartLabelVector]>) -> Result<Self> {
        let dim = ds
            .images
            .first()
            .map(|im| im.pixels.len())
            .ok_or_else(|| PlmError::Config("cannot train on an empty dataset".into()))?;
        let mut feats = Vec::with_capacity(ds.len() * dim);
        for im in &ds.images {
            feats.extend_from_slice(&im.pixels);
        }
        let part = match part_labels {
            Some(rows) => {
                if rows.len() != ds.len() {
                    return Err(PlmError::Shape(format!(
                        "{} part-label rows for {} instances",
                        rows.len(),
                        ds.len()
                    )));
                }
                let mut flat = Vec::with_capacity(ds.len() * ds.num_classes);
                for row in rows {
                    flat.extend(row.as_f64());
                }
                Some(flat)
            }
            None => None,
        };
        Ok(Batcher {
            dim,
            classes: ds.num_classes,
            n: ds.len(),
            feats,
            labels: ds.noisy_labels.clone(),
            part,
        })
    }

    fn gather(&self, idx: &[usize]) -> (Vec<f64>, Vec<usize>, Option<Vec<f64>>) {
        let mut feats = Vec::with_capacity(idx.len() * self.dim);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            feats.extend_from_slice(&self.feats[i * self.dim..(i + 1) * self.dim]);
            labels.push(self.labels[i]);
        }
        let part = self.part.as_ref().map(|flat| {
            let mut rows = Vec::with_capacity(idx.len() * self.classes);
            for &i in idx {
                rows.extend_from_slice(&flat[i * self.classes..(i + 1) * self.classes]);
            }
            rows
        });
        (feats, labels, part)
    }
}

fn epoch_order(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

fn widths(dim: usize, hidden: &[usize], out: usize) -> Vec<usize> {
    let mut w = Vec::with_capacity(hidden.len() + 2);
    w.push(dim);
    w.extend_from_slice(hidden);
    w.push(out);
    w
}

fn zero_grads(model: &mut MlpModel) {
    for p in model.params_mut() {
        p.zero_grad();
    }
}

fn check_finite(stage: &str, epoch: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() {
        return Err(PlmError::Train {
            stage: stage.to_string(),
            message: format!("loss became non-finite at epoch {epoch}"),
        });
    }
    Ok(())
}

/// Fraction of argmax predictions equal to `labels`.
fn accuracy_plain(model: &MlpModel, batcher: &Batcher) -> Result<f64> {
    let logits = model.logits(batcher.n, &batcher.feats)?;
    let c = model.output_dim();
    let hits = logits
        .chunks(c)
        .zip(&batcher.labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    Ok(hits as f64 / batcher.n as f64)
}

/// Accuracy of the noisy-label prediction path argmax((M^t softmax(g))).
fn accuracy_corrected(model: &MlpModel, matrix: &[f64], batcher: &Batcher) -> Result<f64> {
    let c = model.output_dim();
    let probs = model.posteriors(batcher.n, &batcher.feats)?;
    let mut corrected = vec![0.0; batcher.n * c];
    linalg::matmul(batcher.n, c, c, &probs, matrix, &mut corrected);
    let hits = corrected
        .chunks(c)
        .zip(&batcher.labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    Ok(hits as f64 / batcher.n as f64)
}

// ---------------------------------------------------------------------
// Loss builders
// ---------------------------------------------------------------------

/// Joint objective for the posterior and matrix networks:
/// 0.5 * (cross-entropy of the posterior against the noisy label
/// + binary cross-entropy of U^t posterior against the part labels).
pub fn joint_loss(
    tape: &mut Tape,
    ge_probs: NodeId,
    u_entries: NodeId,
    labels: &[usize],
    part_targets: &[f64],
) -> Result<NodeId> {
    let ce = tape.cross_entropy_mean(ge_probs, labels)?;
    let q = tape.batched_vecmat(ge_probs, u_entries)?;
    let bce = tape.bce_mean(q, part_targets)?;
    let sum = tape.add(ce, bce)?;
    Ok(tape.scale(sum, 0.5))
}

/// Corrected risk for the final classifier:
/// 0.5 * (cross-entropy of T^t g against the noisy label
/// + binary cross-entropy of U^t T^t g against the part labels).
/// T and U enter as constants, so gradients flow only into g.
pub fn corrected_risk(
    tape: &mut Tape,
    g_probs: NodeId,
    t_node: NodeId,
    u_entries: NodeId,
    labels: &[usize],
    part_targets: &[f64],
) -> Result<NodeId> {
    let p_noisy = tape.matmul(g_probs, t_node)?;
    let ce = tape.cross_entropy_mean(p_noisy, labels)?;
    let q = tape.batched_vecmat(p_noisy, u_entries)?;
    let bce = tape.bce_mean(q, part_targets)?;
    let sum = tape.add(ce, bce)?;
    Ok(tape.scale(sum, 0.5))
}

/// Importance-reweighted corrected risk with an optional trainable slack
/// on the transition matrix. Returns the loss node and the per-sample
/// weight node w = g_y / ((T + dT)^t g)_y, denominator floored at the
/// shared clamp constant.
pub fn reweighted_risk(
    tape: &mut Tape,
    g_probs: NodeId,
    t_node: NodeId,
    slack_node: Option<NodeId>,
    u_entries: NodeId,
    labels: &[usize],
    part_targets: &[f64],
) -> Result<(NodeId, NodeId)> {
    let (loss, _, w) =
        reweighted_risk_split(tape, g_probs, t_node, slack_node, u_entries, labels, part_targets)?;
    Ok((loss, w))
}

/// Reweighted risk plus its unweighted counterpart on one tape. The
/// weighted loss trains the classifier; the unweighted corrected loss
/// supervises the slack, whose row-stochastic fixed point is the
/// class-conditional noisy label distribution itself.
pub fn reweighted_risk_split(
    tape: &mut Tape,
    g_probs: NodeId,
    t_node: NodeId,
    slack_node: Option<NodeId>,
    u_entries: NodeId,
    labels: &[usize],
    part_targets: &[f64],
) -> Result<(NodeId, NodeId, NodeId)> {
    let eff_t = match slack_node {
        Some(s) => tape.add(t_node, s)?,
        None => t_node,
    };
    let p_noisy = tape.matmul(g_probs, eff_t)?;
    let numer = tape.gather_class(g_probs, labels)?;
    let denom_raw = tape.gather_class(p_noisy, labels)?;
    let denom = tape.clamp_min(denom_raw, EPS_CLIP);
    let w = tape.div(numer, denom)?;
    let log_p = tape.log_clamped(denom_raw);
    let nll = tape.scale(log_p, -1.0);
    let weighted = tape.mul(w, nll)?;
    let ce_weighted = tape.mean_all(weighted)?;
    let ce_plain = tape.mean_all(nll)?;
    let q = tape.batched_vecmat(p_noisy, u_entries)?;
    let bce = tape.bce_mean(q, part_targets)?;
    let sum_w = tape.add(ce_weighted, bce)?;
    let sum_p = tape.add(ce_plain, bce)?;
    Ok((tape.scale(sum_w, 0.5), tape.scale(sum_p, 0.5), w))
}

/// Scalar importance weight for one sample (oracle-friendly form of the
/// in-graph computation used by the reweighted variant).
pub fn reweight(
    g_out: &[f64],
    t: &TransitionMatrix,
    slack: Option<&Tensor>,
    label: usize,
) -> Result<f64> {
    let c = t.classes();
    if g_out.len() != c {
        return Err(PlmError::Shape(format!(
            "posterior of length {} for {c} classes",
            g_out.len()
        )));
    }
    if label >= c {
        return Err(PlmError::Domain(format!("label {label} out of range")));
    }
    if let Some(s) = slack {
        if s.numel() != c * c {
            return Err(PlmError::Shape("slack matrix has the wrong size".into()));
        }
    }
    let mut denom = 0.0;
    for i in 0..c {
        let tij = t.get(i, label) + slack.map_or(0.0, |s| s.data()[i * c + label]);
        denom += tij * g_out[i];
    }
    Ok(g_out[label] / denom.max(EPS_CLIP))
}

// ---------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------

fn train_ce_stage(
    train: &NoisyDataset,
    val: &NoisyDataset,
    cfg: &TrainConfig,
    stage: &str,
    epochs: usize,
    opt: &SgdConfig,
) -> Result<(MlpModel, Vec<EpochMetrics>)> {
    let batcher = Batcher::new(train, None)?;
    let val_batcher = Batcher::new(val, None)?;
    let mut model = MlpModel::init(
        &widths(batcher.dim, &cfg.hidden, train.num_classes),
        &mut substream(cfg.seed, &format!("init-{stage}")),
    )?;
    let mut shuffle = substream(cfg.seed, &format!("shuffle-{stage}"));
    let mut state = OptimizerState::new(opt.momentum, opt.weight_decay);
    let mut best: Option<(f64, MlpModel)> = None;
    let mut metrics = Vec::with_capacity(epochs);

    for epoch in 0..epochs {
        let lr = opt.lr_at(epoch, epochs)?;
        let order = epoch_order(batcher.n, &mut shuffle);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let (feats, labels, _) = batcher.gather(idx);
            let mut tape = Tape::new();
            let binding = model.bind(&mut tape)?;
            let x = tape.leaf(vec![idx.len(), batcher.dim], feats, false)?;
            let logits = binding.forward(&mut tape, x)?;
            let probs = tape.softmax_rows(logits)?;
            let loss = tape.cross_entropy_mean(probs, &labels)?;
            let lv = tape.value(loss)[0];
            check_finite(stage, epoch, lv)?;
            let grads = tape.backward(loss)?;
            zero_grads(&mut model);
            model.collect_grads(&grads, &binding)?;
            sgd_step(&mut state, &mut model.params_mut(), lr)?;
            loss_sum += lv;
            batches += 1;
        }
        let val_acc = accuracy_plain(&model, &val_batcher)?;
        metrics.push(EpochMetrics {
            stage: stage.to_string(),
            epoch,
            train_loss: loss_sum / batches as f64,
            val_acc,
            lr,
        });
        if best.as_ref().is_none_or(|(b, _)| val_acc >= *b) {
            best = Some((val_acc, model.clone()));
        }
    }
    Ok((best.unwrap().1, metrics))
}

/// Stage 1: learn the labeling classifier on the raw noisy data.
pub fn train_labeler(
    train: &NoisyDataset,
    val: &NoisyDataset,
    cfg: &TrainConfig,
) -> Result<(MlpModel, Vec<EpochMetrics>)> {
    train_ce_stage(train, val, cfg, "labeler", cfg.epochs_labeler, &cfg.labeler_opt)
}

/// Plain cross-entropy classifier (baseline, and the noisy-posterior
/// stage of the forward baseline).
pub fn train_ce_classifier(
    train: &NoisyDataset,
    val: &NoisyDataset,
    cfg: &TrainConfig,
    stage: &str,
) -> Result<(MlpModel, Vec<EpochMetrics>)> {
    train_ce_stage(train, val, cfg, stage, cfg.epochs_classifier, &cfg.classifier_opt)
}

/// Cut one instance into sub-instances under the configured strategy.
pub fn build_crop_set(
    f_l: &MlpModel,
    x: &ImageGrid,
    crop: &CropConfig,
    rng: &mut ChaCha8Rng,
) -> Result<CropSet> {
    match crop.strategy {
        CropStrategy::Uniform => crop_uniform(x, crop.size),
        CropStrategy::Random => crop_random(x, crop.size, crop.count, rng),
        CropStrategy::Emphasized => {
            let s = saliency_map(f_l, x)?;
            crop_emphasized(x, &s, crop.emphasize_features)
        }
    }
}

/// Stages 2-3: crop every instance and label the crops.
pub fn build_part_labels(
    f_l: &MlpModel,
    images: &[ImageGrid],
    crop: &CropConfig,
    seed: u64,
) -> Result<Vec<PartLabelVector>> {
    let sets = build_all_crop_sets(f_l, images, crop, seed)?;
    label_crop_sets(f_l, &sets)
}

fn build_all_crop_sets(
    f_l: &MlpModel,
    images: &[ImageGrid],
    crop: &CropConfig,
    seed: u64,
) -> Result<Vec<CropSet>> {
    let mut rng = substream(seed, "crops");
    images
        .iter()
        .map(|x| build_crop_set(f_l, x, crop, &mut rng))
        .collect()
}

fn label_crop_sets(f_l: &MlpModel, sets: &[CropSet]) -> Result<Vec<PartLabelVector>> {
    sets.iter().map(|s| assign_part_labels(f_l, s)).collect()
}

/// Stage 4: jointly train the noisy-posterior network and the
/// single-to-multiple matrix network against the joint loss.
pub fn train_joint_posterior(
    train: &NoisyDataset,
    part_labels: &[PartLabelVector],
    val: &NoisyDataset,
    cfg: &TrainConfig,
) -> Result<(MlpModel, MlpModel, Vec<EpochMetrics>)> {
    let stage = "joint_posterior";
    let c = train.num_classes;
    let batcher = Batcher::new(train, Some(part_labels))?;
    let val_batcher = Batcher::new(val, None)?;
    let mut g_e = MlpModel::init(
        &widths(batcher.dim, &cfg.hidden, c),
        &mut substream(cfg.seed, "init-ge"),
    )?;
    let mut g_u = MlpModel::init(
        &widths(batcher.dim, &cfg.hidden, c * c),
        &mut substream(cfg.seed, "init-gu"),
    )?;
    let mut shuffle = substream(cfg.seed, "shuffle-joint");
    let opt = &cfg.joint_opt;
    let mut ge_state = OptimizerState::new(opt.momentum, opt.weight_decay);
    let mut gu_state = OptimizerState::new(opt.momentum, opt.weight_decay);
    let mut best: Option<(f64, MlpModel, MlpModel)> = None;
    let mut metrics = Vec::with_capacity(cfg.epochs_joint);

    for epoch in 0..cfg.epochs_joint {
        let lr = opt.lr_at(epoch, cfg.epochs_joint)?;
        let order = epoch_order(batcher.n, &mut shuffle);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let (feats, labels, part) = batcher.gather(idx);
            let part = part.expect("joint stage always has part labels");
            let mut tape = Tape::new();
            let ge_bind = g_e.bind(&mut tape)?;
            let gu_bind = g_u.bind(&mut tape)?;
            let x = tape.leaf(vec![idx.len(), batcher.dim], feats, false)?;
            let ge_logits = ge_bind.forward(&mut tape, x)?;
            let ge_probs = tape.softmax_rows(ge_logits)?;
            let gu_logits = gu_bind.forward(&mut tape, x)?;
            let u_entries = tape.sigmoid(gu_logits);
            let loss = joint_loss(&mut tape, ge_probs, u_entries, &labels, &part)?;
            let lv = tape.value(loss)[0];
            check_finite(stage, epoch, lv)?;
            let grads = tape.backward(loss)?;
            zero_grads(&mut g_e);
            zero_grads(&mut g_u);
            g_e.collect_grads(&grads, &ge_bind)?;
            g_u.collect_grads(&grads, &gu_bind)?;
            sgd_step(&mut ge_state, &mut g_e.params_mut(), lr)?;
            sgd_step(&mut gu_state, &mut g_u.params_mut(), lr)?;
            loss_sum += lv;
            batches += 1;
        }
        let val_acc = accuracy_plain(&g_e, &val_batcher)?;
        metrics.push(EpochMetrics {
            stage: stage.to_string(),
            epoch,
            train_loss: loss_sum / batches as f64,
            val_acc,
            lr,
        });
        if best.as_ref().is_none_or(|(b, _, _)| val_acc >= *b) {
            best = Some((val_acc, g_e.clone(), g_u.clone()));
        }
    }
    let (_, ge_best, gu_best) = best.unwrap();
    Ok((ge_best, gu_best, metrics))
}

/// Per-instance single-to-multiple entries from the frozen matrix
/// network: sigmoid of its raw outputs, row-major c*c per instance.
fn frozen_u_entries(g_u: &MlpModel, batcher: &Batcher) -> Result<Vec<f64>> {
    let raw = g_u.logits(batcher.n, &batcher.feats)?;
    Ok(raw.iter().map(|&z| linalg::sigmoid_scalar(z)).collect())
}

/// Stages 5-6 for the plain part-level variant: train the clean-posterior
/// network under the corrected risk with T and the frozen matrix network.
pub fn train_plm_classifier(
    train: &NoisyDataset,
    part_labels: &[PartLabelVector],
    t: &TransitionMatrix,
    g_u: &MlpModel,
    val: &NoisyDataset,
    cfg: &TrainConfig,
) -> Result<(MlpModel, Vec<EpochMetrics>)> {
    let stage = "classifier";
    let c = train.num_classes;
    if t.classes() != c {
        return Err(PlmError::Shape("transition matrix class count mismatch".into()));
    }
    let batcher = Batcher::new(train, Some(part_labels))?;
    let val_batcher = Batcher::new(val, None)?;
    let u_all = frozen_u_entries(g_u, &batcher)?;
    let mut model = MlpModel::init(
        &widths(batcher.dim, &cfg.hidden, c),
        &mut substream(cfg.seed, "init-classifier"),
    )?;
    let mut shuffle = substream(cfg.seed, "shuffle-classifier");
    let opt = &cfg.classifier_opt;
    let mut state = OptimizerState::new(opt.momentum, opt.weight_decay);
    let mut best: Option<(f64, MlpModel)> = None;
    let mut metrics = Vec::with_capacity(cfg.epochs_classifier);

    for epoch in 0..cfg.epochs_classifier {
        let lr = opt.lr_at(epoch, cfg.epochs_classifier)?;
        let order = epoch_order(batcher.n, &mut shuffle);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let (feats, labels, part) = batcher.gather(idx);
            let part = part.expect("classifier stage always has part labels");
            let mut u_batch = Vec::with_capacity(idx.len() * c * c);
            for &i in idx {
                u_batch.extend_from_slice(&u_all[i * c * c..(i + 1) * c * c]);
            }
            let mut tape = Tape::new();
            let binding = model.bind(&mut tape)?;
            let x = tape.leaf(vec![idx.len(), batcher.dim], feats, false)?;
            let logits = binding.forward(&mut tape, x)?;
            let probs = tape.softmax_rows(logits)?;
            let t_node = tape.leaf(vec![c, c], t.entries().to_vec(), false)?;
            let u_node = tape.leaf(vec![idx.len(), c * c], u_batch, false)?;
            let loss = corrected_risk(&mut tape, probs, t_node, u_node, &labels, &part)?;
            let lv = tape.value(loss)[0];
            check_finite(stage, epoch, lv)?;
            let grads = tape.backward(loss)?;
            zero_grads(&mut model);
            model.collect_grads(&grads, &binding)?;
            sgd_step(&mut state, &mut model.params_mut(), lr)?;
            loss_sum += lv;
            batches += 1;
        }
        let val_acc = accuracy_corrected(&model, t.entries(), &val_batcher)?;
        metrics.push(EpochMetrics {
            stage: stage.to_string(),
            epoch,
            train_loss: loss_sum / batches as f64,
            val_acc,
            lr,
        });
        if best.as_ref().is_none_or(|(b, _)| val_acc >= *b) {
            best = Some((val_acc, model.clone()));
        }
    }
    Ok((best.unwrap().1, metrics))
}

/// Forward-corrected baseline classifier: cross entropy of T^t g against
/// the noisy labels, same schedule as the part-level classifier stage.
pub fn train_forward_baseline(
    train: &NoisyDataset,
    t: &TransitionMatrix,
    val: &NoisyDataset,
    cfg: &TrainConfig,
) -> Result<(MlpModel, Vec<EpochMetrics>)> {
    let stage = "classifier";
    let c = train.num_classes;
    if t.classes() != c {
        return Err(PlmError::Shape("transition matrix class count mismatch".into()));
    }
    let batcher = Batcher::new(train, None)?;
    let val_batcher = Batcher::new(val, None)?;
    let mut model = MlpModel::init(
        &widths(batcher.dim, &cfg.hidden, c),
        &mut substream(cfg.seed, "init-classifier"),
    )?;
    let mut shuffle = substream(cfg.seed, "shuffle-classifier");
    let opt = &cfg.classifier_opt;
    let mut state = OptimizerState::new(opt.momentum, opt.weight_decay);
    let mut best: Option<(f64, MlpModel)> = None;
    let mut metrics = Vec::with_capacity(cfg.epochs_classifier);

    for epoch in 0..cfg.epochs_classifier {
        let lr = opt.lr_at(epoch, cfg.epochs_classifier)?;
        let order = epoch_order(batcher.n, &mut shuffle);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let (feats, labels, _) = batcher.gather(idx);
            let mut tape = Tape::new();
            let binding = model.bind(&mut tape)?;
            let x = tape.leaf(vec![idx.len(), batcher.dim], feats, false)?;
            let logits = binding.forward(&mut tape, x)?;
            let probs = tape.softmax_rows(logits)?;
            let t_node = tape.leaf(vec![c, c], t.entries().to_vec(), false)?;
            let p_noisy = tape.matmul(probs, t_node)?;
            let loss = tape.cross_entropy_mean(p_noisy, &labels)?;
            let lv = tape.value(loss)[0];
            check_finite(stage, epoch, lv)?;
            let grads = tape.backward(loss)?;
            zero_grads(&mut model);
            model.collect_grads(&grads, &binding)?;
            sgd_step(&mut state, &mut model.params_mut(), lr)?;
            loss_sum += lv;
            batches += 1;
        }
        let val_acc = accuracy_corrected(&model, t.entries(), &val_batcher)?;
        metrics.push(EpochMetrics {
            stage: stage.to_string(),
            epoch,
            train_loss: loss_sum / batches as f64,
            val_acc,
            lr,
        });
        if best.as_ref().is_none_or(|(b, _)| val_acc >= *b) {
            best = Some((val_acc, model.clone()));
        }
    }
    Ok((best.unwrap().1, metrics))
}

/// Reweighted part-level classifier: jointly optimizes the classifier
/// and a slack matrix added to T, with the importance weight applied to
/// the cross-entropy term. The slack learns at a tenth of the stage
/// learning rate and starts at zero.
pub fn train_plm_r(
    train: &NoisyDataset,
    part_labels: &[PartLabelVector],
    t: &TransitionMatrix,
    g_u: &MlpModel,
    val: &NoisyDataset,
    cfg: &TrainConfig,
) -> Result<(MlpModel, Tensor, Vec<EpochMetrics>)> {
    let stage = "classifier";
    let c = train.num_classes;
    if t.classes() != c {
        return Err(PlmError::Shape("transition matrix class count mismatch".into()));
    }
    let batcher = Batcher::new(train, Some(part_labels))?;
    let val_batcher = Batcher::new(val, None)?;
    let u_all = frozen_u_entries(g_u, &batcher)?;
    let mut model = MlpModel::init(
        &widths(batcher.dim, &cfg.hidden, c),
        &mut substream(cfg.seed, "init-classifier"),
    )?;
    let mut slack = Tensor::zeros(vec![c, c]).with_requires_grad();
    let mut shuffle = substream(cfg.seed, "shuffle-classifier");
    let opt = &cfg.classifier_opt;
    let mut state = OptimizerState::new(opt.momentum, opt.weight_decay);
    let mut slack_state = OptimizerState::new(0.0, opt.weight_decay);
    let mut best: Option<(f64, MlpModel, Tensor)> = None;
    let mut metrics = Vec::with_capacity(cfg.epochs_classifier);

    for epoch in 0..cfg.epochs_classifier {
        let lr = opt.lr_at(epoch, cfg.epochs_classifier)?;
        let order = epoch_order(batcher.n, &mut shuffle);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let (feats, labels, part) = batcher.gather(idx);
            let part = part.expect("classifier stage always has part labels");
            let mut u_batch = Vec::with_capacity(idx.len() * c * c);
            for &i in idx {
                u_batch.extend_from_slice(&u_all[i * c * c..(i + 1) * c * c]);
            }
            let mut tape = Tape::new();
            let binding = model.bind(&mut tape)?;
            let slack_node = tape.leaf(vec![c, c], slack.data().to_vec(), true)?;
            let x = tape.leaf(vec![idx.len(), batcher.dim], feats, false)?;
            let logits = binding.forward(&mut tape, x)?;
            let probs = tape.softmax_rows(logits)?;
            let t_node = tape.leaf(vec![c, c], t.entries().to_vec(), false)?;
            let u_node = tape.leaf(vec![idx.len(), c * c], u_batch, false)?;
            let (loss, loss_plain, _w) = reweighted_risk_split(
                &mut tape,
                probs,
                t_node,
                Some(slack_node),
                u_node,
                &labels,
                &part,
            )?;
            let lv = tape.value(loss)[0];
            check_finite(stage, epoch, lv)?;
            let grads = tape.backward(loss)?;
            zero_grads(&mut model);
            slack.zero_grad();
            model.collect_grads(&grads, &binding)?;
            let slack_grads = tape.backward(loss_plain)?;
            if let Some(g) = slack_grads.get(slack_node) {
                let mut g = g.to_vec();
                // keep the slack a pure within-row redistribution: project
                // each gradient row onto zero sum, so T + slack stays
                // row-stochastic without any renormalization
                for row in g.chunks_mut(c) {
                    let mean = row.iter().sum::<f64>() / c as f64;
                    for v in row.iter_mut() {
                        *v -= mean;
                    }
                }
                slack.accumulate_grad(&g)?;
            }
            sgd_step(&mut state, &mut model.params_mut(), lr)?;
            sgd_step(&mut slack_state, &mut [&mut slack], lr * SLACK_LR_SCALE)?;
            loss_sum += lv;
            batches += 1;
        }
        let mut eff_t = t.entries().to_vec();
        for (e, s) in eff_t.iter_mut().zip(slack.data()) {
            *e += s;
        }
        let val_acc = accuracy_corrected(&model, &eff_t, &val_batcher)?;
        metrics.push(EpochMetrics {
            stage: stage.to_string(),
            epoch,
            train_loss: loss_sum / batches as f64,
            val_acc,
            lr,
        });
        if best.as_ref().is_none_or(|(b, _, _)| val_acc >= *b) {
            best = Some((val_acc, model.clone(), slack.clone()));
        }
    }
    let (_, model_best, slack_best) = best.unwrap();
    Ok((model_best, slack_best, metrics))
}

// ---------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------

/// Execute every stage of the configured variant in order, timing each.
pub fn run_pipeline(
    noisy: &NoisyDataset,
    split: &SplitSpec,
    cfg: &TrainConfig,
) -> Result<StageArtifacts> {
    cfg.validate()?;
    let (train, val) = split_train_val(noisy, split)?;
    let mut metrics = Vec::new();
    let mut timings = Vec::new();

    let time_stage = |name: &str| (name.to_string(), Instant::now());
    let finish = |timings: &mut Vec<StageTiming>, (name, start): (String, Instant)| {
        timings.push(StageTiming {
            name,
            millis: start.elapsed().as_millis() as u64,
        });
    };

    match cfg.variant {
        Variant::CeBaseline => {
            let t0 = time_stage("classifier");
            let (model, m) = train_ce_classifier(&train, &val, cfg, "classifier")?;
            finish(&mut timings, t0);
            metrics.extend(m);
            Ok(StageArtifacts {
                config: cfg.clone(),
                labeler: None,
                posterior: Some(model.clone()),
                matrix_net: None,
                classifier: model,
                slack: None,
                t_estimated: None,
                part_labels: None,
                metrics,
                timings,
            })
        }
        Variant::ForwardBaseline => {
            let t0 = time_stage("posterior");
            let (posterior, m) =
                train_ce_stage(&train, &val, cfg, "posterior", cfg.epochs_labeler, &cfg.labeler_opt)?;
            finish(&mut timings, t0);
            metrics.extend(m);

            let t1 = time_stage("estimate_t");
            let t_hat = estimate_t_anchor(&posterior, &train.images, cfg.anchor_count)?;
            finish(&mut timings, t1);

            let t2 = time_stage("classifier");
            let (classifier, m) = train_forward_baseline(&train, &t_hat, &val, cfg)?;
            finish(&mut timings, t2);
            metrics.extend(m);

            Ok(StageArtifacts {
                config: cfg.clone(),
                labeler: None,
                posterior: Some(posterior),
                matrix_net: None,
                classifier,
                slack: None,
                t_estimated: Some(t_hat),
                part_labels: None,
                metrics,
                timings,
            })
        }
        Variant::PlmF | Variant::PlmR => {
            let t0 = time_stage("labeler");
            let (labeler, m) = train_labeler(&train, &val, cfg)?;
            finish(&mut timings, t0);
            metrics.extend(m);

            let t1 = time_stage("crops");
            let crop_sets = build_all_crop_sets(&labeler, &train.images, &cfg.crop, cfg.seed)?;
            finish(&mut timings, t1);

            let t2 = time_stage("part_labels");
            let part_labels = label_crop_sets(&labeler, &crop_sets)?;
            finish(&mut timings, t2);
            drop(crop_sets);

            let t3 = time_stage("joint_posterior");
            let (g_e, g_u, m) = train_joint_posterior(&train, &part_labels, &val, cfg)?;
            finish(&mut timings, t3);
            metrics.extend(m);

            let t4 = time_stage("estimate_t");
            let t_hat = estimate_t_anchor(&g_e, &train.images, cfg.anchor_count)?;
            finish(&mut timings, t4);

            let t5 = time_stage("classifier");
            let (classifier, slack, m) = if cfg.variant == Variant::PlmR {
                let (c, s, m) = train_plm_r(&train, &part_labels, &t_hat, &g_u, &val, cfg)?;
                (c, Some(s), m)
            } else {
                let (c, m) = train_plm_classifier(&train, &part_labels, &t_hat, &g_u, &val, cfg)?;
                (c, None, m)
            };
            finish(&mut timings, t5);
            metrics.extend(m);

            Ok(StageArtifacts {
                config: cfg.clone(),
                labeler: Some(labeler),
                posterior: Some(g_e),
                matrix_net: Some(g_u),
                classifier,
                slack,
                t_estimated: Some(t_hat),
                part_labels: Some(part_labels),
                metrics,
                timings,
            })
        }
    }
}

// ---------------------------------------------------------------------
// Run directory
// ---------------------------------------------------------------------

/// JSON manifest of a persisted run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub seed: u64,
    pub variant: Variant,
    pub stages: Vec<String>,
    pub timings: Vec<StageTiming>,
    pub config: TrainConfig,
    pub dataset_dir: Option<String>,
    pub files: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn total_millis(&self) -> u64 {
        self.timings.iter().map(|t| t.millis).sum()
    }
}

fn write_model(dir: &Path, name: &str, model: &MlpModel) -> Result<String> {
    let rel = format!("models/{name}.json");
    let path = dir.join(&rel);
    fs::create_dir_all(path.parent().unwrap())?;
    let json = serde_json::to_string(model).map_err(|e| PlmError::Format(e.to_string()))?;
    fs::write(path, json)?;
    Ok(rel)
}

fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,stage,train_loss,val_acc,lr\n");
    for m in metrics {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            m.epoch, m.stage, m.train_loss, m.val_acc, m.lr
        ));
    }
    out
}

impl StageArtifacts {
    /// Persist the run: manifest, per-epoch metrics CSV, models, the
    /// estimated matrix, slack, and the part-label table. Timings live
    /// only in the manifest, so metrics files are byte-reproducible.
    pub fn write_to(&self, dir: &Path, dataset_dir: Option<&str>) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut files = BTreeMap::new();

        fs::write(dir.join("metrics.csv"), metrics_csv(&self.metrics))?;
        files.insert("metrics".to_string(), "metrics.csv".to_string());

        files.insert(
            "classifier".to_string(),
            write_model(dir, "classifier", &self.classifier)?,
        );
        if let Some(m) = &self.labeler {
            files.insert("labeler".to_string(), write_model(dir, "labeler", m)?);
        }
        if let Some(m) = &self.posterior {
            files.insert("posterior".to_string(), write_model(dir, "posterior", m)?);
        }
        if let Some(m) = &self.matrix_net {
            files.insert("matrix_net".to_string(), write_model(dir, "matrix_net", m)?);
        }
        if let Some(t) = &self.t_estimated {
            fs::write(dir.join("t_estimated.csv"), t.to_csv())?;
            files.insert("t_estimated".to_string(), "t_estimated.csv".to_string());
        }
        if let Some(s) = &self.slack {
            let json = serde_json::to_string(s).map_err(|e| PlmError::Format(e.to_string()))?;
            fs::write(dir.join("slack.json"), json)?;
            files.insert("slack".to_string(), "slack.json".to_string());
        }
        if let Some(rows) = &self.part_labels {
            let c = rows.first().map_or(0, |r| r.bits.len());
            let mut w = BufWriter::new(fs::File::create(dir.join("part_labels.csv"))?);
            let header: Vec<String> = (1..=c).map(|j| format!("bit_{j}")).collect();
            writeln!(w, "index,{}", header.join(","))?;
            for (i, row) in rows.iter().enumerate() {
                let cells: Vec<String> = row.bits.iter().map(|b| b.to_string()).collect();
                writeln!(w, "{i},{}", cells.join(","))?;
            }
            w.flush()?;
            files.insert("part_labels".to_string(), "part_labels.csv".to_string());
        }

        let manifest = RunManifest {
            seed: self.config.seed,
            variant: self.config.variant,
            stages: self.stage_names(),
            timings: self.timings.clone(),
            config: self.config.clone(),
            dataset_dir: dataset_dir.map(str::to_string),
            files,
        };
        let mut json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| PlmError::Format(e.to_string()))?;
        json.push('\n');
        fs::write(dir.join("manifest.json"), json)?;
        Ok(())
    }
}

/// A run loaded back from disk, with what evaluation needs.
pub struct LoadedRun {
    pub manifest: RunManifest,
    pub classifier: MlpModel,
    pub posterior: MlpModel,
    pub t_estimated: Option<TransitionMatrix>,
    pub slack: Option<Tensor>,
}

/// Load a run directory written by [`StageArtifacts::write_to`].
pub fn load_run_dir(dir: &Path) -> Result<LoadedRun> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| {
        PlmError::Eval(format!("incomplete run at {}: {e}", dir.display()))
    })?;
    let manifest: RunManifest =
        serde_json::from_str(&text).map_err(|e| PlmError::Format(e.to_string()))?;
    let read_model = |key: &str| -> Result<MlpModel> {
        let rel = manifest
            .files
            .get(key)
            .ok_or_else(|| PlmError::Eval(format!("run manifest lacks a '{key}' model")))?;
        let text = fs::read_to_string(dir.join(rel))?;
        serde_json::from_str(&text).map_err(|e| PlmError::Format(e.to_string()))
    };
    let classifier = read_model("classifier")?;
    let posterior = read_model("posterior")?;
    let t_estimated = match manifest.files.get("t_estimated") {
        Some(rel) => Some(TransitionMatrix::from_csv(&fs::read_to_string(dir.join(rel))?)?),
        None => None,
    };
    let slack = match manifest.files.get("slack") {
        Some(rel) => {
            let text = fs::read_to_string(dir.join(rel))?;
            Some(serde_json::from_str(&text).map_err(|e| PlmError::Format(e.to_string()))?)
        }
        None => None,
    };
    Ok(LoadedRun {
        manifest,
        classifier,
        posterior,
        t_estimated,
        slack,
    })
}
