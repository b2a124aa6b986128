//! Comparison fine-tuners: fixed-mask layer-wise least squares and mask-only
//! tuning with frozen weights, plus a side-by-side strategy comparison.

use crate::data::{CalibrationSet, Corpus};
use crate::ebft::{
    block_loss, block_masks, check_block_masks, check_pair, convergence_check, embed_calibration, finetune_model, gather,
    propagate, BlockTargets, FineTuneConfig,
};
use crate::error::{Error, Result};
use crate::model::{block_prefix, perplexity, LanguageModel, TransformerBlock};
use crate::pruning::{apply_mask_in_place, apply_mask_table, MaskPattern, MaskTable, SparsityMask};
use crate::tensor::kernels::{gemm, View};
use crate::tensor::{Tape, Tensor};
use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Instant;

const STREAM_BATCH: usize = 8;
/// Pivots below this fraction of the largest diagonal entry count as singular.
const PIVOT_FLOOR: f64 = 1e-12;
const RIDGE_SCALE: f64 = 1e-8;
const MAX_RIDGE_RETRIES: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LsqSolveStats {
    pub layer: String,
    /// `||X Wᵀ - X (M ⊙ W)ᵀ||²` summed over rows.
    pub residual_before: f64,
    pub residual_after: f64,
    /// Ratio of extreme eigenvalues of `XᵀX`.
    pub condition: f64,
    /// Largest ridge actually used for any row.
    pub lambda: f64,
    pub warning: Option<String>,
}

/// `XᵀX` for a row-major `[n, in]` buffer.
pub fn gram(x: &[f64], cols: usize) -> Vec<f64> {
    let rows = x.len() / cols;
    let mut g = vec![0.0; cols * cols];
    gemm(View::transposed(x, rows, cols), View::new(x, rows, cols), &mut g, 0.0);
    g
}

/// Least-squares reconstruction of `w` with the sparsity of `mask`, one
/// output row at a time.
pub fn layerwise_lsq(w: &Tensor, x: &Tensor, mask: &SparsityMask, lambda: f64) -> Result<(Tensor, LsqSolveStats)> {
    if x.ndim() != 2 || w.ndim() != 2 || x.shape()[1] != w.shape()[1] {
        return Err(Error::dim("layerwise_lsq", w.shape(), x.shape()));
    }
    let g = gram(x.data(), x.shape()[1]);
    lsq_from_gram(w, &g, mask, lambda)
}

/// As [`layerwise_lsq`], given the Gram matrix `XᵀX` (`[in, in]`, row-major).
pub fn lsq_from_gram(w: &Tensor, g: &[f64], mask: &SparsityMask, lambda: f64) -> Result<(Tensor, LsqSolveStats)> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("ridge lambda must be >= 0, got {lambda}")));
    }
    if w.ndim() != 2 || mask.shape() != w.shape() {
        return Err(Error::dim("layerwise_lsq mask", w.shape(), mask.shape()));
    }
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    if g.len() != cols * cols {
        return Err(Error::dim("layerwise_lsq gram", &[cols, cols], &[g.len()]));
    }
    let gm = DMatrix::from_row_slice(cols, cols, g);
    let trace: f64 = (0..cols).map(|i| gm[(i, i)]).sum();
    let escalated = RIDGE_SCALE * trace / cols as f64;

    let mut out = Tensor::zeros(w.shape());
    let mut max_lambda = lambda;
    let mut warning = None;
    for r in 0..rows {
        let row = &w.data()[r * cols..(r + 1) * cols];
        let bits = &mask.bits()[r * cols..(r + 1) * cols];
        let kept: Vec<usize> = (0..cols).filter(|&j| bits[j]).collect();
        if kept.is_empty() {
            continue;
        }
        let wr = DVector::from_column_slice(row);
        let rhs_full = &gm * &wr;
        let rhs = DVector::from_iterator(kept.len(), kept.iter().map(|&j| rhs_full[j]));
        let sub = DMatrix::from_fn(kept.len(), kept.len(), |a, b| gm[(kept[a], kept[b])]);

        let mut lam = lambda;
        let mut tries = 0;
        let solution = loop {
            if let Some(sol) = solve_spd(&sub, &rhs, lam) {
                break sol;
            }
            tries += 1;
            if tries > MAX_RIDGE_RETRIES || escalated == 0.0 {
                return Err(Error::Numeric(format!(
                    "least-squares system for row {r} of {:?} stays singular (ridge {lam:e})",
                    mask.owner
                )));
            }
            lam = if lam < escalated { escalated } else { lam * 10.0 };
            if warning.is_none() {
                warning = Some(format!("singular normal equations; ridge escalated to {lam:e}"));
                log::warn!("{:?}: singular normal equations, ridge escalated to {lam:e}", mask.owner);
            }
        };
        max_lambda = max_lambda.max(lam);
        let dst = &mut out.data_mut()[r * cols..(r + 1) * cols];
        for (k, &j) in kept.iter().enumerate() {
            dst[j] = solution[k];
        }
    }

    let masked = crate::pruning::apply_mask(w, mask)?;
    let stats = LsqSolveStats {
        layer: mask.owner.clone(),
        residual_before: gram_residual(w, &masked, &gm),
        residual_after: gram_residual(w, &out, &gm),
        condition: condition_number(&gm),
        lambda: max_lambda,
        warning,
    };
    Ok((out, stats))
}

fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>, lambda: f64) -> Option<DVector<f64>> {
    let n = a.nrows();
    let shifted = a + DMatrix::identity(n, n) * lambda;
    let diag_max = (0..n).map(|i| shifted[(i, i)]).fold(0.0, f64::max);
    let chol = Cholesky::new(shifted)?;
    let l = chol.l_dirty();
    let floor = PIVOT_FLOOR * diag_max;
    if (0..n).any(|i| l[(i, i)] * l[(i, i)] <= floor) {
        return None;
    }
    Some(chol.solve(b))
}

/// `Σ_r (a_r - b_r)ᵀ G (a_r - b_r)`.
fn gram_residual(a: &Tensor, b: &Tensor, g: &DMatrix<f64>) -> f64 {
    let cols = a.shape()[1];
    a.data()
        .chunks(cols)
        .zip(b.data().chunks(cols))
        .map(|(ra, rb)| {
            let d = DVector::from_iterator(cols, ra.iter().zip(rb).map(|(x, y)| x - y));
            d.dot(&(g * &d)).max(0.0)
        })
        .sum()
}

fn condition_number(g: &DMatrix<f64>) -> f64 {
    let eig = g.clone().symmetric_eigenvalues();
    let max = eig.iter().cloned().fold(f64::MIN, f64::max);
    let min = eig.iter().cloned().fold(f64::MAX, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Layers solved together because they read the same input.
const LSQ_GROUPS: [&[&str]; 4] = [&["attn.q", "attn.k", "attn.v"], &["attn.o"], &["mlp.gate", "mlp.up"], &["mlp.down"]];

/// Gram matrices of the inputs of `layers` in `block` over a `[n, s, d]` stream.
fn layer_grams(block: &TransformerBlock, stream: &Tensor, layers: &[&str], eps: f64) -> Result<BTreeMap<String, Vec<f64>>> {
    let n = stream.shape()[0];
    let mut grams: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + STREAM_BATCH).min(n)).collect();
        let mut tape = Tape::new();
        let vars = block.bind(&mut tape, |_| false);
        let x = tape.constant(gather(stream, &idx));
        let trace = block.forward_on_tape(&mut tape, &vars, x, eps, true)?;
        for &layer in layers {
            let Some(v) = trace.input_of(layer) else { continue };
            let t = tape.value(v);
            let cols = *t.shape().last().expect("rank >= 1");
            let part = gram(t.data(), cols);
            let acc = grams.entry(layer.to_string()).or_insert_with(|| vec![0.0; cols * cols]);
            for (a, p) in acc.iter_mut().zip(part) {
                *a += p;
            }
        }
        start += STREAM_BATCH;
    }
    Ok(grams)
}

/// Replaces every maskable weight of `sparse` by the least-squares fit to
/// the dense layer on the sparse calibration stream, in block order.
pub fn lsq_finetune_model(
    dense: &LanguageModel,
    sparse: &LanguageModel,
    masks: &MaskTable,
    calib: &CalibrationSet,
    lambda: f64,
) -> Result<(LanguageModel, Vec<LsqSolveStats>)> {
    check_pair(dense, sparse)?;
    let eps = sparse.config.ln_eps;
    let mut out = sparse.clone();
    let mut stream = embed_calibration(sparse, calib)?;
    let mut stats = Vec::new();
    for l in 0..out.n_layers() {
        let bm = block_masks(masks, l);
        check_block_masks(&out.blocks[l], &bm)?;
        for group in LSQ_GROUPS {
            let grams = layer_grams(&out.blocks[l], &stream, group, eps)?;
            for (layer, g) in &grams {
                let w = &dense.blocks[l].linear(layer).expect("layer exists").weight;
                let mask = bm[layer.as_str()].clone().with_owner(format!("{}{layer}.weight", block_prefix(l)));
                let (solved, s) = lsq_from_gram(w, g, &mask, lambda)?;
                out.blocks[l].linear_mut(layer).expect("layer exists").weight = solved;
                stats.push(s);
            }
        }
        stream = propagate(&out.blocks[l], &stream, eps)?;
    }
    Ok((out, stats))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskTuneReport {
    pub block: usize,
    /// Block loss before tuning, then after every epoch.
    pub losses: Vec<f64>,
    pub swaps_tried: usize,
    pub swaps_accepted: usize,
    pub seconds: f64,
}

/// Loss gradient and input column norms of every linear layer of `block`.
struct LayerSignals {
    grads: BTreeMap<&'static str, Vec<f64>>,
    norms: BTreeMap<&'static str, Vec<f64>>,
}

fn layer_signals(block: &TransformerBlock, io: &BlockTargets, eps: f64) -> Result<LayerSignals> {
    let names = block.linear_names();
    let n = io.n_samples();
    let total = io.inputs.numel() as f64;
    let mut grads: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
    let mut sq: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + STREAM_BATCH).min(n)).collect();
        let x_batch = gather(&io.inputs, &idx);
        let weight = x_batch.numel() as f64 / total;
        let mut tape = Tape::new();
        let vars = block.bind(&mut tape, |name| name.ends_with(".weight"));
        let x = tape.constant(x_batch);
        let t = tape.constant(gather(&io.targets, &idx));
        let trace = block.forward_on_tape(&mut tape, &vars, x, eps, true)?;
        let loss = tape.mse(t, trace.out)?;
        tape.backward(loss)?;
        for &name in &names {
            let w = vars.linear(name).expect("layer exists").weight;
            let g = tape.grad(w).expect("weight leaf");
            let acc = grads.entry(name).or_insert_with(|| vec![0.0; g.len()]);
            for (a, v) in acc.iter_mut().zip(g) {
                *a += weight * v;
            }
            let input = tape.value(trace.input_of(name).expect("traced input"));
            let cols = *input.shape().last().expect("rank >= 1");
            let acc = sq.entry(name).or_insert_with(|| vec![0.0; cols]);
            for row in input.data().chunks(cols) {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v * v;
                }
            }
        }
        start += STREAM_BATCH;
    }
    let norms = sq
        .into_iter()
        .map(|(k, v)| (k, v.into_iter().map(f64::sqrt).collect()))
        .collect();
    Ok(LayerSignals { grads, norms })
}

fn argmin_by(items: impl Iterator<Item = (usize, f64)>) -> Option<(usize, f64)> {
    items.fold(None, |best, (i, v)| match best {
        Some((_, bv)) if bv <= v => best,
        _ => Some((i, v)),
    })
}

/// Entries to flip for the best grow/prune pair of one layer, or `None`
/// when no pruned entry promises a first-order loss decrease.
fn choose_swap(mask: &SparsityMask, w: &[f64], g: &[f64], norms: &[f64]) -> Option<Vec<(usize, bool)>> {
    let cols = mask.shape()[1];
    let rows = mask.shape()[0];
    let bits = mask.bits();
    let importance = |i: usize| w[i].abs() * norms[i % cols];
    match mask.pattern {
        MaskPattern::Channel { .. } => {
            let col_pruned = |j: usize| !bits[j];
            let proxy = |j: usize| (0..rows).map(|r| g[r * cols + j] * w[r * cols + j]).sum::<f64>();
            let col_importance = |j: usize| (0..rows).map(|r| importance(r * cols + j)).sum::<f64>();
            let (grow, gain) = argmin_by((0..cols).filter(|&j| col_pruned(j)).map(|j| (j, proxy(j))))?;
            if gain >= 0.0 {
                return None;
            }
            let (prune, _) = argmin_by((0..cols).filter(|&j| !col_pruned(j)).map(|j| (j, col_importance(j))))?;
            let mut flips: Vec<(usize, bool)> = (0..rows).map(|r| (r * cols + grow, true)).collect();
            flips.extend((0..rows).map(|r| (r * cols + prune, false)));
            Some(flips)
        }
        pattern => {
            let (grow, gain) = argmin_by((0..bits.len()).filter(|&i| !bits[i]).map(|i| (i, g[i] * w[i])))?;
            if gain >= 0.0 {
                return None;
            }
            let candidates: Box<dyn Iterator<Item = usize>> = match pattern {
                MaskPattern::NM { m, .. } => {
                    let start = grow - (grow % cols) % m;
                    Box::new(start..start + m)
                }
                _ => Box::new(0..bits.len()),
            };
            let (prune, _) = argmin_by(candidates.filter(|&i| bits[i]).map(|i| (i, importance(i))))?;
            Some(vec![(grow, true), (prune, false)])
        }
    }
}

fn masked_block(dense: &TransformerBlock, masks: &BTreeMap<String, SparsityMask>) -> Result<TransformerBlock> {
    let mut out = dense.clone();
    for (name, mask) in masks {
        if let Some(lin) = out.linear_mut(name) {
            apply_mask_in_place(&mut lin.weight, mask)?;
        }
    }
    Ok(out)
}

/// Reselects mask positions of one block with the dense weights frozen.
///
/// `dense` supplies the weight values; the effective block is `dense`
/// masked by `masks`. Each epoch tries one swap per layer and keeps it only
/// if the measured block loss drops.
pub fn mask_tune_block(
    dense: &TransformerBlock,
    masks: &BTreeMap<String, SparsityMask>,
    io: &BlockTargets,
    cfg: &FineTuneConfig,
    eps: f64,
) -> Result<(BTreeMap<String, SparsityMask>, MaskTuneReport)> {
    cfg.validate()?;
    check_block_masks(dense, masks)?;
    let started = Instant::now();
    let mut masks = masks.clone();
    let mut eff = masked_block(dense, &masks)?;
    let mut loss = block_loss(&eff, io, eps)?;
    let mut losses = vec![loss];
    let (mut tried, mut accepted) = (0, 0);

    for epoch in 0..cfg.max_epochs {
        if loss == 0.0 || convergence_check(&losses, cfg.convergence_rel_tol, cfg.convergence_patience) {
            break;
        }
        let signals = layer_signals(&eff, io, eps)?;
        for name in dense.linear_names() {
            let orig = &dense.linear(name).expect("layer exists").weight;
            let mask = &masks[name];
            let Some(flips) = choose_swap(mask, orig.data(), &signals.grads[name], &signals.norms[name]) else {
                continue;
            };
            tried += 1;
            let apply = |eff: &mut TransformerBlock, mask: &mut SparsityMask, forward: bool| {
                let w = &mut eff.linear_mut(name).expect("layer exists").weight;
                for &(i, keep) in &flips {
                    let keep = keep == forward;
                    mask.bits_mut()[i] = keep;
                    w.data_mut()[i] = if keep { orig.data()[i] } else { 0.0 };
                }
            };
            let mask = masks.get_mut(name).expect("checked");
            apply(&mut eff, mask, true);
            let candidate = block_loss(&eff, io, eps)?;
            if !candidate.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss in block {} at epoch {epoch} during mask tuning",
                    io.block
                )));
            }
            if candidate < loss {
                loss = candidate;
                accepted += 1;
            } else {
                apply(&mut eff, mask, false);
            }
        }
        losses.push(loss);
    }
    let report = MaskTuneReport {
        block: io.block,
        losses,
        swaps_tried: tried,
        swaps_accepted: accepted,
        seconds: started.elapsed().as_secs_f64(),
    };
    Ok((masks, report))
}

/// Mask-tunes every block in order; returns the dense weights under the new
/// masks together with the new mask table.
pub fn mask_tune_model(
    dense: &LanguageModel,
    masks: &MaskTable,
    calib: &CalibrationSet,
    cfg: &FineTuneConfig,
) -> Result<(LanguageModel, MaskTable, Vec<MaskTuneReport>)> {
    let eps = dense.config.ln_eps;
    let mut dense_stream = embed_calibration(dense, calib)?;
    let mut sparse_stream = dense_stream.clone();
    let mut table = masks.clone();
    let mut reports = Vec::new();
    for l in 0..dense.n_layers() {
        let bm = block_masks(masks, l);
        let dense_next = propagate(&dense.blocks[l], &dense_stream, eps)?;
        let io = BlockTargets::new(l, sparse_stream, dense_next.clone())?;
        let (tuned, report) = mask_tune_block(&dense.blocks[l], &bm, &io, cfg, eps)?;
        for (layer, mask) in &tuned {
            table.insert(format!("{}{layer}.weight", block_prefix(l)), mask.clone());
        }
        sparse_stream = propagate(&masked_block(&dense.blocks[l], &tuned)?, &io.inputs, eps)?;
        dense_stream = dense_next;
        reports.push(report);
    }
    let model = apply_mask_table(dense, &table)?;
    Ok((model, table, reports))
}

/// Reconstruction loss of each block of `model` on its own propagated
/// stream against the dense model's outputs.
pub fn stream_block_losses(dense: &LanguageModel, model: &LanguageModel, calib: &CalibrationSet) -> Result<Vec<f64>> {
    check_pair(dense, model)?;
    let eps = model.config.ln_eps;
    let mut dense_stream = embed_calibration(dense, calib)?;
    let mut stream = embed_calibration(model, calib)?;
    let mut losses = Vec::with_capacity(model.n_layers());
    for l in 0..model.n_layers() {
        let dense_next = propagate(&dense.blocks[l], &dense_stream, eps)?;
        let io = BlockTargets::new(l, stream, dense_next)?;
        losses.push(block_loss(&model.blocks[l], &io, eps)?);
        stream = propagate(&model.blocks[l], &io.inputs, eps)?;
        dense_stream = io.targets;
    }
    Ok(losses)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    pub finetune: FineTuneConfig,
    pub eval_seq_len: usize,
    pub lsq_lambda: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyRow {
    pub name: String,
    pub perplexity: f64,
    pub per_block_loss: Vec<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub config: CompareConfig,
    pub rows: Vec<StrategyRow>,
    pub warnings: Vec<String>,
}

impl ComparisonReport {
    pub fn row(&self, name: &str) -> Option<&StrategyRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// True when both reports agree on everything except wall-clock times.
    pub fn same_results(&self, other: &ComparisonReport) -> bool {
        self.config == other.config
            && self.warnings == other.warnings
            && self.rows.len() == other.rows.len()
            && self.rows.iter().zip(&other.rows).all(|(a, b)| {
                a.name == b.name
                    && a.perplexity.to_bits() == b.perplexity.to_bits()
                    && a.per_block_loss.len() == b.per_block_loss.len()
                    && a.per_block_loss.iter().zip(&b.per_block_loss).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Runs no fine-tuning, least squares, mask tuning and EBFT from the same
/// pruned model and reports held-out perplexity and per-block losses.
pub fn compare_strategies(
    dense: &LanguageModel,
    sparse: &LanguageModel,
    masks: &MaskTable,
    calib: &CalibrationSet,
    eval: &Corpus,
    cfg: &CompareConfig,
) -> Result<ComparisonReport> {
    cfg.finetune.validate()?;
    check_pair(dense, sparse)?;
    let mut rows = Vec::with_capacity(4);
    let mut row = |name: &str, started: Instant, model: &LanguageModel| -> Result<()> {
        let per_block_loss = stream_block_losses(dense, model, calib)?;
        let ppl = perplexity(model, &eval.tokens, cfg.eval_seq_len)?;
        log::info!("{name}: perplexity {ppl:.4}");
        rows.push(StrategyRow {
            name: name.to_string(),
            perplexity: ppl,
            per_block_loss,
            seconds: started.elapsed().as_secs_f64(),
        });
        Ok(())
    };

    row("none", Instant::now(), sparse)?;
    let t = Instant::now();
    let (lsq, _) = lsq_finetune_model(dense, sparse, masks, calib, cfg.lsq_lambda)?;
    row("lsq", t, &lsq)?;
    let t = Instant::now();
    let (mask_tuned, _, _) = mask_tune_model(dense, masks, calib, &cfg.finetune)?;
    row("mask", t, &mask_tuned)?;
    let t = Instant::now();
    let (ebft, _) = finetune_model(dense, sparse, masks, calib, &cfg.finetune)?;
    row("ebft", t, &ebft)?;

    let mut warnings = Vec::new();
    let (e, m) = (&rows[3], &rows[2]);
    if e.perplexity > m.perplexity {
        let w = format!(
            "weight tuning did not beat mask tuning: perplexity {:.4} (ebft) vs {:.4} (mask)",
            e.perplexity, m.perplexity
        );
        log::warn!("{w}");
        warnings.push(w);
    }
    Ok(ComparisonReport {
        config: cfg.clone(),
        rows,
        warnings,
    })
}
