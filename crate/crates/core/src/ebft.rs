//! Block-wise reconstruction-error fine-tuning of pruned models.
//!
//! Blocks are processed strictly in order. For block `l` the student input is
//! the calibration stream after the already fine-tuned sparse blocks
//! `0..l`, and the target is the dense model's output of block `l`. Only the
//! surviving entries of the masked linear weights are trained; after every
//! optimizer step the pruned entries are reset to exactly `0.0`.

use crate::data::CalibrationSet;
use crate::error::{Error, Result};
use crate::model::{block_prefix, LanguageModel, TransformerBlock};
use crate::pruning::{MaskTable, SparsityMask};
use crate::tensor::{Optimizer, OptimizerKind, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

/// Samples per forward pass when propagating calibration streams.
const STREAM_BATCH: usize = 8;
/// Floor for the denominator of relative loss changes.
const CONVERGENCE_EPS: f64 = 1e-12;

/// Where block targets come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherPropagation {
    /// One pure dense forward; targets never change.
    Dense,
    /// The dense block applied to the sparse stream's input.
    #[serde(rename = "self")]
    SelfStream,
}

impl std::str::FromStr for TeacherPropagation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(TeacherPropagation::Dense),
            "self" => Ok(TeacherPropagation::SelfStream),
            other => Err(Error::Config(format!(
                "unknown teacher_propagation {other:?} (expected dense or self)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub lr: f64,
    /// Maximum number of passes over the calibration set per block.
    pub max_epochs: usize,
    pub batch_size: usize,
    pub convergence_rel_tol: f64,
    pub convergence_patience: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub teacher_propagation: TeacherPropagation,
    /// Also train layer-norm parameters and biases.
    pub train_norms: bool,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            lr: 2e-4,
            max_epochs: 10,
            batch_size: 8,
            convergence_rel_tol: 1e-4,
            convergence_patience: 2,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            teacher_propagation: TeacherPropagation::Dense,
            train_norms: false,
        }
    }
}

impl FineTuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.convergence_rel_tol >= 0.0) {
            return Err(Error::Config(format!(
                "convergence_rel_tol must be >= 0, got {}",
                self.convergence_rel_tol
            )));
        }
        if self.convergence_patience == 0 {
            return Err(Error::Config("convergence_patience must be >= 1".into()));
        }
        Ok(())
    }
}

/// Student inputs and teacher targets for one block, `[n, seq, d]` each.
#[derive(Clone, Debug)]
pub struct BlockTargets {
    pub block: usize,
    pub inputs: Tensor,
    pub targets: Tensor,
}

impl BlockTargets {
    pub fn new(block: usize, inputs: Tensor, targets: Tensor) -> Result<Self> {
        if inputs.shape() != targets.shape() || inputs.ndim() != 3 {
            return Err(Error::dim("block_targets", inputs.shape(), targets.shape()));
        }
        Ok(BlockTargets {
            block,
            inputs,
            targets,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.inputs.shape()[0]
    }
}

/// Rows `indices` of a `[n, ..]` tensor.
pub(crate) fn gather(t: &Tensor, indices: &[usize]) -> Tensor {
    let row = t.numel() / t.shape()[0];
    let mut data = Vec::with_capacity(row * indices.len());
    for &i in indices {
        data.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = indices.len();
    Tensor::new(&shape, data).expect("gathered rows match shape")
}

/// Runs `block` over a `[n, seq, d]` stream in fixed-size chunks.
pub fn propagate(block: &TransformerBlock, x: &Tensor, eps: f64) -> Result<Tensor> {
    let n = x.shape()[0];
    let mut parts = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + STREAM_BATCH).min(n)).collect();
        let out = block.forward(&gather(x, &idx), eps, true)?;
        parts.extend(out.unstack());
        start += STREAM_BATCH;
    }
    Tensor::stack(&parts)
}

/// Token plus position embeddings of every calibration segment, `[n, seq, d]`.
pub fn embed_calibration(model: &LanguageModel, calib: &CalibrationSet) -> Result<Tensor> {
    let mut parts = Vec::with_capacity(calib.n_samples());
    for (tokens, rows) in calib.batches(STREAM_BATCH) {
        parts.extend(model.embed(&tokens, rows)?.unstack());
    }
    Tensor::stack(&parts)
}

/// Recomputes, from scratch, the inputs and targets block `l` (0-based)
/// trains on: inputs come from `sparse` blocks `0..l`, targets from the
/// dense model.
pub fn collect_block_io(
    dense: &LanguageModel,
    sparse: &LanguageModel,
    calib: &CalibrationSet,
    l: usize,
    teacher: TeacherPropagation,
) -> Result<BlockTargets> {
    if l >= dense.n_layers() || l >= sparse.n_layers() {
        return Err(Error::Index {
            index: l,
            len: dense.n_layers().min(sparse.n_layers()),
        });
    }
    let eps = dense.config.ln_eps;
    let mut student = embed_calibration(sparse, calib)?;
    for block in &sparse.blocks[..l] {
        student = propagate(block, &student, eps)?;
    }
    let target = match teacher {
        TeacherPropagation::Dense => {
            let mut teacher = embed_calibration(dense, calib)?;
            for block in &dense.blocks[..=l] {
                teacher = propagate(block, &teacher, eps)?;
            }
            teacher
        }
        TeacherPropagation::SelfStream => propagate(&dense.blocks[l], &student, eps)?,
    };
    BlockTargets::new(l, student, target)
}

/// Mean squared reconstruction error of `block` over every element of `io`.
pub fn block_loss(block: &TransformerBlock, io: &BlockTargets, eps: f64) -> Result<f64> {
    let n = io.n_samples();
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + STREAM_BATCH).min(n)).collect();
        let out = block.forward(&gather(&io.inputs, &idx), eps, true)?;
        let target = gather(&io.targets, &idx);
        total += out
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        start += STREAM_BATCH;
    }
    Ok(total / io.inputs.numel() as f64)
}

/// True iff each of the last `patience` relative loss changes
/// `|E[t-1] - E[t]| / max(E[t-1], eps)` is below `rel_tol`.
pub fn convergence_check(loss_history: &[f64], rel_tol: f64, patience: usize) -> bool {
    if patience == 0 || loss_history.len() < patience + 1 {
        return false;
    }
    loss_history
        .windows(2)
        .rev()
        .take(patience)
        .all(|w| ((w[0] - w[1]) / w[0].max(CONVERGENCE_EPS)).abs() < rel_tol)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub block: usize,
    /// Loss before any update, then after every epoch.
    pub losses: Vec<f64>,
    pub epochs_run: usize,
    pub converged: bool,
    pub seconds: f64,
}

impl BlockReport {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("at least one loss")
    }
}

/// Whole-model fine-tuning report; arrays are indexed by block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneReport {
    pub config: FineTuneConfig,
    pub loss: Vec<Vec<f64>>,
    pub epochs: Vec<usize>,
    pub seconds: Vec<f64>,
    pub converged: Vec<bool>,
    pub total_seconds: f64,
    /// Most blocks that held gradient/optimizer state at the same time.
    pub peak_resident_blocks: usize,
}

impl FineTuneReport {
    pub fn from_blocks(config: FineTuneConfig, blocks: &[BlockReport], total_seconds: f64, peak: usize) -> Self {
        FineTuneReport {
            config,
            loss: blocks.iter().map(|b| b.losses.clone()).collect(),
            epochs: blocks.iter().map(|b| b.epochs_run).collect(),
            seconds: blocks.iter().map(|b| b.seconds).collect(),
            converged: blocks.iter().map(|b| b.converged).collect(),
            total_seconds,
            peak_resident_blocks: peak,
        }
    }

    pub fn initial_losses(&self) -> Vec<f64> {
        self.loss.iter().map(|l| l[0]).collect()
    }

    pub fn final_losses(&self) -> Vec<f64> {
        self.loss.iter().map(|l| *l.last().expect("non-empty")).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Counts blocks that currently own gradient state.
#[derive(Debug, Default)]
pub struct ResidencyMonitor {
    live: AtomicUsize,
    peak: AtomicUsize,
}

impl ResidencyMonitor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    pub fn live(&self) -> usize {
        self.live.load(Ordering::SeqCst)
    }

    pub(crate) fn enter(&self) -> ResidencyGuard<'_> {
        let now = self.live.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        ResidencyGuard { monitor: self }
    }
}

pub(crate) struct ResidencyGuard<'a> {
    monitor: &'a ResidencyMonitor,
}

impl Drop for ResidencyGuard<'_> {
    fn drop(&mut self) {
        self.monitor.live.fetch_sub(1, Ordering::SeqCst);
    }
}

/// Masks of block `l`, keyed by block-local layer name (`"attn.q"`, ...).
pub fn block_masks(masks: &MaskTable, l: usize) -> BTreeMap<String, SparsityMask> {
    let prefix = block_prefix(l);
    masks
        .iter()
        .filter_map(|(name, m)| {
            let local = name.strip_prefix(&prefix)?.strip_suffix(".weight")?;
            Some((local.to_string(), m.clone()))
        })
        .collect()
}

pub(crate) fn check_block_masks(block: &TransformerBlock, masks: &BTreeMap<String, SparsityMask>) -> Result<()> {
    for name in block.linear_names() {
        let w = &block.linear(name).expect("listed layer").weight;
        match masks.get(name) {
            None => return Err(Error::Contract(format!("no mask for layer {name}"))),
            Some(m) if m.shape() != w.shape() => {
                return Err(Error::dim("block mask", w.shape(), m.shape()));
            }
            _ => {}
        }
    }
    Ok(())
}

fn seed_for_block(seed: u64, block: usize) -> u64 {
    seed ^ (block as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Fine-tunes one block against fixed targets.
pub fn finetune_block(
    block: &TransformerBlock,
    masks: &BTreeMap<String, SparsityMask>,
    io: &BlockTargets,
    cfg: &FineTuneConfig,
    eps: f64,
) -> Result<(TransformerBlock, BlockReport)> {
    finetune_block_monitored(block, masks, io, cfg, eps, &ResidencyMonitor::new())
}

pub fn finetune_block_monitored(
    block: &TransformerBlock,
    masks: &BTreeMap<String, SparsityMask>,
    io: &BlockTargets,
    cfg: &FineTuneConfig,
    eps: f64,
    monitor: &ResidencyMonitor,
) -> Result<(TransformerBlock, BlockReport)> {
    cfg.validate()?;
    check_block_masks(block, masks)?;
    let started = Instant::now();
    let mut block = block.clone();

    // Trainable tensors in `named()` order, with the mask of each weight.
    let is_trainable = |name: &str| {
        let layer = name.strip_suffix(".weight").unwrap_or(name);
        masks.contains_key(layer) && name.ends_with(".weight") || cfg.train_norms
    };
    let trainable: Vec<(usize, Option<SparsityMask>)> = block
        .named()
        .iter()
        .enumerate()
        .filter(|(_, (name, _))| is_trainable(name))
        .map(|(i, (name, _))| {
            let mask = name
                .strip_suffix(".weight")
                .and_then(|layer| masks.get(layer))
                .cloned();
            (i, mask)
        })
        .collect();
    let sizes: Vec<usize> = {
        let named = block.named();
        trainable.iter().map(|(i, _)| named[*i].1.numel()).collect()
    };

    let _resident = monitor.enter();
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.lr, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed_for_block(cfg.seed, io.block));
    let mut losses = Vec::with_capacity(cfg.max_epochs + 1);
    let mut converged = false;
    let mut epochs_run = 0;
    let n = io.n_samples();

    for epoch in 0..=cfg.max_epochs {
        let loss = block_loss(&block, io, eps).map_err(|e| numeric_context(e, io.block, epoch, cfg.lr))?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss in block {} at epoch {epoch} (lr {})",
                io.block, cfg.lr
            )));
        }
        losses.push(loss);
        if loss == 0.0 || convergence_check(&losses, cfg.convergence_rel_tol, cfg.convergence_patience) {
            converged = true;
            break;
        }
        if epoch == cfg.max_epochs {
            break;
        }

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let vars = block.bind(&mut tape, is_trainable);
            let x = tape.constant(gather(&io.inputs, batch));
            let t = tape.constant(gather(&io.targets, batch));
            let trace = block
                .forward_on_tape(&mut tape, &vars, x, eps, true)
                .map_err(|e| numeric_context(e, io.block, epoch, cfg.lr))?;
            tape.mse(t, trace.out)
                .and_then(|l| tape.backward(l))
                .map_err(|e| numeric_context(e, io.block, epoch, cfg.lr))?;

            let all = vars.all();
            let mut grads: Vec<Vec<f64>> = trainable
                .iter()
                .map(|(i, _)| tape.grad(all[*i]).expect("trainable leaf").to_vec())
                .collect();
            drop(tape);
            for (g, (_, mask)) in grads.iter_mut().zip(&trainable) {
                if let Some(mask) = mask {
                    for (gx, &keep) in g.iter_mut().zip(mask.bits()) {
                        if !keep {
                            *gx = 0.0;
                        }
                    }
                }
            }
            let mut named = block.named_mut();
            let mut params: Vec<&mut Tensor> = Vec::with_capacity(trainable.len());
            let mut slots: Vec<Option<&mut Tensor>> = named.iter_mut().map(|(_, t)| Some(&mut **t)).collect();
            for (i, _) in &trainable {
                params.push(slots[*i].take().expect("each index once"));
            }
            let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
            optimizer.step(&mut params, &grad_refs)?;
            for (p, (_, mask)) in params.iter_mut().zip(&trainable) {
                if let Some(mask) = mask {
                    crate::pruning::apply_mask_in_place(p, mask)?;
                }
            }
        }
        epochs_run += 1;
    }

    let report = BlockReport {
        block: io.block,
        losses,
        epochs_run,
        converged,
        seconds: started.elapsed().as_secs_f64(),
    };
    log::info!(
        "block {}: loss {:.6e} -> {:.6e} after {} epochs{}",
        report.block,
        report.initial_loss(),
        report.final_loss(),
        report.epochs_run,
        if report.converged { " (converged)" } else { "" }
    );
    Ok((block, report))
}

fn numeric_context(e: Error, block: usize, epoch: usize, lr: f64) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("{msg} in block {block} at epoch {epoch} (lr {lr})")),
        other => other,
    }
}

pub(crate) fn check_pair(dense: &LanguageModel, sparse: &LanguageModel) -> Result<()> {
    if dense.config != sparse.config {
        return Err(Error::Config(format!(
            "dense and sparse models differ in hyperparameters: {:?} vs {:?}",
            dense.config, sparse.config
        )));
    }
    Ok(())
}

/// Fine-tunes every block of `sparse` in order, keeping the masks fixed.
pub fn finetune_model(
    dense: &LanguageModel,
    sparse: &LanguageModel,
    masks: &MaskTable,
    calib: &CalibrationSet,
    cfg: &FineTuneConfig,
) -> Result<(LanguageModel, FineTuneReport)> {
    cfg.validate()?;
    check_pair(dense, sparse)?;
    let started = Instant::now();
    let eps = sparse.config.ln_eps;
    let monitor = ResidencyMonitor::new();
    let mut out = sparse.clone();
    let mut dense_stream = embed_calibration(dense, calib)?;
    let mut sparse_stream = embed_calibration(sparse, calib)?;
    let mut reports = Vec::with_capacity(sparse.n_layers());

    for l in 0..sparse.n_layers() {
        let bm = block_masks(masks, l);
        check_block_masks(&out.blocks[l], &bm)?;
        let dense_next = propagate(&dense.blocks[l], &dense_stream, eps)?;
        let targets = match cfg.teacher_propagation {
            TeacherPropagation::Dense => dense_next.clone(),
            TeacherPropagation::SelfStream => propagate(&dense.blocks[l], &sparse_stream, eps)?,
        };
        let io = BlockTargets::new(l, sparse_stream, targets)?;
        let (tuned, report) = finetune_block_monitored(&out.blocks[l], &bm, &io, cfg, eps, &monitor)?;
        sparse_stream = propagate(&tuned, &io.inputs, eps)?;
        out.blocks[l] = tuned;
        dense_stream = dense_next;
        reports.push(report);
    }

    let report = FineTuneReport::from_blocks(
        cfg.clone(),
        &reports,
        started.elapsed().as_secs_f64(),
        monitor.peak(),
    );
    Ok((out, report))
}
