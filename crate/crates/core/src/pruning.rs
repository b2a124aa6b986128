//! Importance scores, mask construction and model pruning.
//!
//! Masks cover the `[out, in]` weight matrices of block linear layers only.
//! Every builder breaks ties by flat index so that masks are reproducible.

use crate::data::CalibrationSet;
use crate::error::{Error, Result};
use crate::model::{block_prefix, LanguageModel};
use crate::tensor::{Tape, Tensor};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BTreeMap;

/// Segments per forward pass while collecting activation statistics.
const STATS_BATCH: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskPattern {
    /// `round(sparsity * total)` zeros anywhere in the layer.
    Unstructured { sparsity: f64 },
    /// Exactly `n` kept entries in every contiguous group of `m` along the
    /// input dimension.
    NM { n: usize, m: usize },
    /// Whole input columns zeroed.
    Channel { sparsity: f64 },
}

impl MaskPattern {
    pub fn validate(&self) -> Result<()> {
        match *self {
            MaskPattern::Unstructured { sparsity } | MaskPattern::Channel { sparsity } => {
                check_fraction(sparsity)
            }
            MaskPattern::NM { n, m } => {
                if n == 0 || n >= m {
                    Err(Error::Config(format!("N:M pattern needs 0 < N < M, got {n}:{m}")))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Nominal fraction of zeros.
    pub fn sparsity(&self) -> f64 {
        match *self {
            MaskPattern::Unstructured { sparsity } | MaskPattern::Channel { sparsity } => sparsity,
            MaskPattern::NM { n, m } => 1.0 - n as f64 / m as f64,
        }
    }
}

impl std::fmt::Display for MaskPattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MaskPattern::Unstructured { sparsity } => write!(f, "unstructured({sparsity})"),
            MaskPattern::NM { n, m } => write!(f, "{n}:{m}"),
            MaskPattern::Channel { sparsity } => write!(f, "channel({sparsity})"),
        }
    }
}

fn check_fraction(s: f64) -> Result<()> {
    if (0.0..1.0).contains(&s) {
        Ok(())
    } else {
        Err(Error::Config(format!("sparsity must lie in [0, 1), got {s}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparsityMask {
    pub pattern: MaskPattern,
    pub owner: String,
    shape: Vec<usize>,
    bits: Vec<bool>,
}

/// Masks keyed by the weight name they apply to.
pub type MaskTable = BTreeMap<String, SparsityMask>;

impl SparsityMask {
    pub fn new(pattern: MaskPattern, shape: &[usize], bits: Vec<bool>) -> Result<Self> {
        if shape.iter().product::<usize>() != bits.len() {
            return Err(Error::dim("mask", shape, &[bits.len()]));
        }
        Ok(SparsityMask {
            pattern,
            owner: String::new(),
            shape: shape.to_vec(),
            bits,
        })
    }

    pub fn ones(shape: &[usize]) -> Self {
        SparsityMask {
            pattern: MaskPattern::Unstructured { sparsity: 0.0 },
            owner: String::new(),
            shape: shape.to_vec(),
            bits: vec![true; shape.iter().product()],
        }
    }

    pub fn with_owner(mut self, owner: impl Into<String>) -> Self {
        self.owner = owner.into();
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub(crate) fn bits_mut(&mut self) -> &mut [bool] {
        &mut self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn kept(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn zeros(&self) -> usize {
        self.bits.len() - self.kept()
    }

    /// Achieved fraction of zeros.
    pub fn sparsity(&self) -> f64 {
        self.zeros() as f64 / self.bits.len() as f64
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::from_fn(&self.shape, |i| if self.bits[i] { 1.0 } else { 0.0 })
    }

    fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Checks the structural invariant of the mask's pattern.
    pub fn check_pattern(&self) -> Result<()> {
        let cols = self.cols();
        match self.pattern {
            MaskPattern::Unstructured { sparsity } => {
                let want = (sparsity * self.bits.len() as f64).round() as usize;
                if self.zeros() != want {
                    return Err(Error::Contract(format!(
                        "mask {:?}: {} zeros, expected {want}",
                        self.owner,
                        self.zeros()
                    )));
                }
            }
            MaskPattern::NM { n, m } => {
                if cols % m != 0 {
                    return Err(Error::Contract(format!(
                        "mask {:?}: group size {m} does not divide {cols}",
                        self.owner
                    )));
                }
                for (g, group) in self.bits.chunks(m).enumerate() {
                    let kept = group.iter().filter(|&&b| b).count();
                    if kept != n {
                        return Err(Error::Contract(format!(
                            "mask {:?}: group {g} keeps {kept}, expected {n}",
                            self.owner
                        )));
                    }
                }
            }
            MaskPattern::Channel { sparsity } => {
                let rows = self.bits.len() / cols;
                let mut zeroed = 0;
                for c in 0..cols {
                    let first = self.bits[c];
                    if (1..rows).any(|r| self.bits[r * cols + c] != first) {
                        return Err(Error::Contract(format!(
                            "mask {:?}: column {c} is not constant",
                            self.owner
                        )));
                    }
                    if !first {
                        zeroed += 1;
                    }
                }
                let want = (sparsity * cols as f64).round() as usize;
                if zeroed != want {
                    return Err(Error::Contract(format!(
                        "mask {:?}: {zeroed} zeroed columns, expected {want}",
                        self.owner
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-weight nonnegative importance, same shape as the weight.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceScores(pub Tensor);

impl ImportanceScores {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn scaled(&self, c: f64) -> ImportanceScores {
        ImportanceScores(Tensor::from_fn(self.0.shape(), |i| self.0.data()[i] * c))
    }
}

/// `|W|` elementwise.
pub fn score_magnitude(w: &Tensor) -> ImportanceScores {
    ImportanceScores(Tensor::from_fn(w.shape(), |i| w.data()[i].abs()))
}

/// L2 norm of every column of `x`, treating all leading axes as rows.
pub fn column_norms(x: &Tensor) -> Vec<f64> {
    let cols = *x.shape().last().unwrap_or(&1);
    let mut sq = vec![0.0; cols];
    for row in x.data().chunks(cols) {
        for (s, v) in sq.iter_mut().zip(row) {
            *s += v * v;
        }
    }
    sq.into_iter().map(f64::sqrt).collect()
}

/// `|W_ij| * ||X_:,j||_2` with `X` holding one calibration row per sample.
pub fn score_activation_aware(w: &Tensor, x: &Tensor) -> Result<ImportanceScores> {
    if w.ndim() != 2 || x.ndim() < 2 || x.shape().last() != Some(&w.shape()[1]) {
        return Err(Error::dim("score_activation_aware", w.shape(), x.shape()));
    }
    score_with_column_norms(w, &column_norms(x))
}

pub fn score_with_column_norms(w: &Tensor, norms: &[f64]) -> Result<ImportanceScores> {
    let cols = *w.shape().last().unwrap_or(&1);
    if norms.len() != cols {
        return Err(Error::dim("score_activation_aware", w.shape(), &[norms.len()]));
    }
    Ok(ImportanceScores(Tensor::from_fn(w.shape(), |i| {
        w.data()[i].abs() * norms[i % cols]
    })))
}

/// Ascending by score, ties by index.
fn ascending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx
}

/// Zeros the `round(S * total)` lowest-scoring entries; among equal scores the
/// lowest flat index is zeroed first.
pub fn build_mask_unstructured(scores: &ImportanceScores, sparsity: f64) -> Result<SparsityMask> {
    check_fraction(sparsity)?;
    let s = scores.0.data();
    let prune = (sparsity * s.len() as f64).round() as usize;
    let mut bits = vec![true; s.len()];
    for &i in ascending(s).iter().take(prune) {
        bits[i] = false;
    }
    SparsityMask::new(MaskPattern::Unstructured { sparsity }, scores.0.shape(), bits)
}

/// Keeps the `n` highest scores in every contiguous group of `m` along the
/// last axis; among equal scores the lower index is kept.
pub fn build_mask_nm(scores: &ImportanceScores, n: usize, m: usize) -> Result<SparsityMask> {
    let pattern = MaskPattern::NM { n, m };
    pattern.validate()?;
    let cols = *scores.0.shape().last().unwrap_or(&1);
    if cols % m != 0 {
        return Err(Error::Config(format!(
            "N:M group size {m} does not divide input dimension {cols}"
        )));
    }
    let s = scores.0.data();
    let mut bits = vec![false; s.len()];
    for (g, group) in s.chunks(m).enumerate() {
        let mut idx: Vec<usize> = (0..m).collect();
        idx.sort_by(|&a, &b| match group[b].total_cmp(&group[a]) {
            Ordering::Equal => a.cmp(&b),
            o => o,
        });
        for &j in idx.iter().take(n) {
            bits[g * m + j] = true;
        }
    }
    SparsityMask::new(pattern, scores.0.shape(), bits)
}

/// Zeros whole input columns with the smallest column score: the column L2
/// norm of `w`, or `||X_j|| * sum_i |W_ij|` when activation norms are given.
pub fn build_mask_channel(w: &Tensor, act_norms: Option<&[f64]>, sparsity: f64) -> Result<SparsityMask> {
    check_fraction(sparsity)?;
    if w.ndim() != 2 {
        return Err(Error::dim("build_mask_channel", w.shape(), &[2]));
    }
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let data = w.data();
    let col_scores: Vec<f64> = match act_norms {
        None => (0..cols)
            .map(|c| (0..rows).map(|r| data[r * cols + c].powi(2)).sum::<f64>().sqrt())
            .collect(),
        Some(norms) => {
            if norms.len() != cols {
                return Err(Error::dim("build_mask_channel", w.shape(), &[norms.len()]));
            }
            (0..cols)
                .map(|c| norms[c] * (0..rows).map(|r| data[r * cols + c].abs()).sum::<f64>())
                .collect()
        }
    };
    let prune = (sparsity * cols as f64).round() as usize;
    let mut keep_col = vec![true; cols];
    for &c in ascending(&col_scores).iter().take(prune) {
        keep_col[c] = false;
    }
    let bits = (0..rows * cols).map(|i| keep_col[i % cols]).collect();
    SparsityMask::new(MaskPattern::Channel { sparsity }, w.shape(), bits)
}

/// Elementwise product with the mask; pruned entries become exactly `+0.0`.
pub fn apply_mask(w: &Tensor, mask: &SparsityMask) -> Result<Tensor> {
    let mut out = w.clone();
    apply_mask_in_place(&mut out, mask)?;
    Ok(out)
}

pub fn apply_mask_in_place(w: &mut Tensor, mask: &SparsityMask) -> Result<()> {
    if w.shape() != mask.shape() {
        return Err(Error::dim("apply_mask", w.shape(), mask.shape()));
    }
    for (x, &keep) in w.data_mut().iter_mut().zip(mask.bits()) {
        if !keep {
            *x = 0.0;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Magnitude,
    #[serde(alias = "activation", alias = "wanda")]
    ActivationAware,
}

impl std::str::FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "magnitude" => Ok(Criterion::Magnitude),
            "activation" | "activation_aware" | "wanda" => Ok(Criterion::ActivationAware),
            other => Err(Error::Config(format!(
                "unknown criterion {other:?} (expected magnitude or activation)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub name: String,
    pub total: usize,
    pub zeros: usize,
    pub achieved: f64,
}

#[derive(Clone, Debug)]
pub struct PruneOutcome {
    pub model: LanguageModel,
    pub masks: MaskTable,
    pub layers: Vec<LayerSparsity>,
}

/// Squared column sums of every linear layer input over a dense forward of
/// the calibration set, keyed by weight name. Returns L2 norms.
pub fn activation_norms(model: &LanguageModel, calib: &CalibrationSet) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut sums: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (tokens, batch) in calib.batches(STATS_BATCH) {
        let mut x = model.embed(&tokens, batch)?;
        for (l, block) in model.blocks.iter().enumerate() {
            let mut tape = Tape::new();
            let vars = block.bind(&mut tape, |_| false);
            let xv = tape.constant(x);
            let trace = block.forward_on_tape(&mut tape, &vars, xv, model.config.ln_eps, true)?;
            for (layer, var) in &trace.linear_inputs {
                let t = tape.value(*var);
                let cols = *t.shape().last().expect("rank >= 1");
                let acc = sums
                    .entry(format!("{}{layer}.weight", block_prefix(l)))
                    .or_insert_with(|| vec![0.0; cols]);
                for row in t.data().chunks(cols) {
                    for (a, v) in acc.iter_mut().zip(row) {
                        *a += v * v;
                    }
                }
            }
            x = tape.take_value(trace.out);
        }
    }
    Ok(sums
        .into_iter()
        .map(|(k, v)| (k, v.into_iter().map(f64::sqrt).collect()))
        .collect())
}

/// Builds one mask per maskable weight and applies it to a copy of `model`.
pub fn prune_model(
    model: &LanguageModel,
    criterion: Criterion,
    pattern: MaskPattern,
    calib: Option<&CalibrationSet>,
) -> Result<PruneOutcome> {
    pattern.validate()?;
    let names = model.maskable_weight_names();
    if let MaskPattern::NM { m, .. } = pattern {
        for name in &names {
            let cols = model.tensor(name).expect("maskable weight exists").shape()[1];
            if cols % m != 0 {
                return Err(Error::Config(format!(
                    "N:M group size {m} does not divide input dimension {cols} of {name}"
                )));
            }
        }
    }
    let norms = match criterion {
        Criterion::Magnitude => None,
        Criterion::ActivationAware => {
            let calib = calib.ok_or_else(|| {
                Error::Config("activation-aware pruning needs a calibration set".into())
            })?;
            Some(activation_norms(model, calib)?)
        }
    };

    let mut masks = MaskTable::new();
    let mut layers = Vec::new();
    for name in &names {
        let w = model.tensor(name).expect("maskable weight exists");
        let layer_norms = norms.as_ref().map(|n| n[name].as_slice());
        let scores = match layer_norms {
            Some(n) => score_with_column_norms(w, n)?,
            None => score_magnitude(w),
        };
        let mask = match pattern {
            MaskPattern::Unstructured { sparsity } => build_mask_unstructured(&scores, sparsity)?,
            MaskPattern::NM { n, m } => build_mask_nm(&scores, n, m)?,
            MaskPattern::Channel { sparsity } => build_mask_channel(w, layer_norms, sparsity)?,
        }
        .with_owner(name.clone());
        layers.push(LayerSparsity {
            name: name.clone(),
            total: mask.len(),
            zeros: mask.zeros(),
            achieved: mask.sparsity(),
        });
        masks.insert(name.clone(), mask);
    }
    let pruned = apply_mask_table(model, &masks)?;
    Ok(PruneOutcome {
        model: pruned,
        masks,
        layers,
    })
}

/// A copy of `model` with every mask in the table applied.
pub fn apply_mask_table(model: &LanguageModel, masks: &MaskTable) -> Result<LanguageModel> {
    let mut out = model.clone();
    let mut applied = 0;
    for (name, t) in out.named_tensors_mut() {
        if let Some(mask) = masks.get(&name) {
            apply_mask_in_place(t, mask)?;
            applied += 1;
        }
    }
    if applied != masks.len() {
        let missing: Vec<&String> = masks.keys().filter(|k| model.tensor(k).is_none()).collect();
        return Err(Error::Contract(format!("masks for unknown weights: {missing:?}")));
    }
    Ok(out)
}
