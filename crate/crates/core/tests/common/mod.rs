//! Test-only oracles: central finite differences and small fixtures.
#![allow(dead_code)]

pub mod cases;

use ebft::data::CalibrationSet;
use ebft::model::{LanguageModel, MlpKind, ModelConfig, TransformerBlock};
use ebft::pruning::{prune_model, Criterion, MaskPattern, PruneOutcome};
use ebft::{Result, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_REL_TOL: f64 = 1e-4;

/// Elementwise relative error with a small absolute floor so that entries
/// whose true gradient is ~0 are compared absolutely.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A scalar-valued function built on a tape from the given inputs.
pub type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

fn eval(build: &Build<'_>, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars).expect("forward");
    tape.value(out).item()
}

/// Central-difference gradient of `build` with respect to input `which`.
pub fn numeric_grad(build: &Build<'_>, inputs: &[Tensor], which: usize) -> Vec<f64> {
    let mut work = inputs.to_vec();
    (0..inputs[which].numel())
        .map(|i| {
            let x = inputs[which].data()[i];
            work[which].data_mut()[i] = x + FD_STEP;
            let up = eval(build, &work);
            work[which].data_mut()[i] = x - FD_STEP;
            let down = eval(build, &work);
            work[which].data_mut()[i] = x;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Tape gradients of `build` for every input flagged in `differentiate`.
pub fn analytic_grads(build: &Build<'_>, inputs: &[Tensor], differentiate: &[bool]) -> Vec<Option<Vec<f64>>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(differentiate)
        .map(|(t, &d)| tape.leaf(t.clone().with_requires_grad(d)))
        .collect();
    let out = build(&mut tape, &vars).expect("forward");
    tape.backward(out).expect("backward");
    vars.iter()
        .zip(differentiate)
        .map(|(v, &d)| d.then(|| tape.grad(*v).expect("leaf grad").to_vec()))
        .collect()
}

/// Worst relative error between tape and finite-difference gradients over
/// all differentiated inputs.
pub fn gradcheck(build: &Build<'_>, inputs: &[Tensor], differentiate: &[bool]) -> f64 {
    let analytic = analytic_grads(build, inputs, differentiate);
    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        if let Some(a) = a {
            let n = numeric_grad(build, inputs, i);
            worst = worst.max(rel_err(a, &n));
        }
    }
    worst
}

/// `sum(out * weights)`: a generic scalar head so upstream gradients are not
/// all ones.
pub fn weighted_sum(tape: &mut Tape, out: Var, weights: Var) -> Result<Var> {
    let p = tape.mul(out, weights)?;
    tape.sum(p)
}

pub fn tiny_config(mlp: MlpKind) -> ModelConfig {
    ModelConfig {
        vocab_size: 16,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        max_seq_len: 8,
        mlp,
        ln_eps: 1e-5,
    }
}

/// A block with weights large enough that attention is not uniform and
/// norms/biases are non-trivial.
pub fn random_block(seed: u64, mlp: MlpKind) -> TransformerBlock {
    let cfg = tiny_config(mlp);
    let mut r = rng(seed);
    let mut block = TransformerBlock::new_random(&cfg, &mut r);
    for (_, t) in block.named_mut() {
        let fresh = Tensor::randn(t.shape(), 0.3, &mut r);
        let is_gamma = t.data().iter().all(|&x| x == 1.0);
        for (x, y) in t.data_mut().iter_mut().zip(fresh.data()) {
            *x = if is_gamma { 1.0 + y } else { *y };
        }
    }
    block
}

pub fn tiny_model(seed: u64, layers: usize) -> LanguageModel {
    let cfg = ModelConfig {
        n_layers: layers,
        ..tiny_config(MlpKind::Standard)
    };
    LanguageModel::new_random(cfg, seed).unwrap()
}

/// A tiny model whose block weights are large enough for pruning to matter.
pub fn lively_model(seed: u64, layers: usize, mlp: MlpKind) -> LanguageModel {
    let cfg = ModelConfig {
        n_layers: layers,
        ..tiny_config(mlp)
    };
    let mut model = LanguageModel::new_random(cfg, seed).unwrap();
    for (i, block) in model.blocks.iter_mut().enumerate() {
        *block = random_block(seed * 31 + i as u64, mlp);
    }
    model
}

/// `n` random segments of `seq_len` tokens below `vocab`.
pub fn random_calib(seed: u64, n: usize, seq_len: usize, vocab: usize) -> CalibrationSet {
    use rand::Rng;
    let mut r = rng(seed);
    let segments = (0..n)
        .map(|_| (0..seq_len).map(|_| r.random_range(0..vocab)).collect())
        .collect();
    CalibrationSet::new(segments, seq_len, seed).unwrap()
}

pub fn prune(model: &LanguageModel, pattern: MaskPattern, calib: &CalibrationSet) -> PruneOutcome {
    prune_model(model, Criterion::ActivationAware, pattern, Some(calib)).unwrap()
}

pub fn unstructured(sparsity: f64) -> MaskPattern {
    MaskPattern::Unstructured { sparsity }
}

/// Builds one random mask (random shape, pattern and scores) and checks the
/// structural invariants that every pattern must satisfy.
pub fn check_random_mask(seed: u64) -> std::result::Result<(), String> {
    use ebft::pruning::*;
    use rand::Rng;
    let mut r = rng(seed);
    let m = [2usize, 4, 8][r.random_range(0..3)];
    let rows = r.random_range(1..12);
    let cols = m * r.random_range(1..6);
    let shape = [rows, cols];
    let w = Tensor::randn(&shape, 1.0, &mut r);
    let scores = score_magnitude(&w);
    let total = rows * cols;
    let sparsity = r.random_range(0.0..=1.0);
    let c = r.random_range(0.01..100.0);

    let un = build_mask_unstructured(&scores, sparsity).map_err(|e| e.to_string())?;
    let want = (sparsity * total as f64).round() as usize;
    if un.zeros() != want {
        return Err(format!("seed {seed}: unstructured zeros {} != {want}", un.zeros()));
    }
    let un_scaled = build_mask_unstructured(&scores.scaled(c), sparsity).map_err(|e| e.to_string())?;
    if un_scaled.bits() != un.bits() {
        return Err(format!("seed {seed}: unstructured mask changed under score scale {c}"));
    }
    let applied = apply_mask(&w, &un).map_err(|e| e.to_string())?;
    let twice = apply_mask(&applied, &un).map_err(|e| e.to_string())?;
    if !twice.bit_eq(&applied) {
        return Err(format!("seed {seed}: apply_mask is not idempotent"));
    }
    for (i, (&x, &keep)) in applied.data().iter().zip(un.bits()).enumerate() {
        if keep != (x != 0.0) || (!keep && x.to_bits() != 0) {
            return Err(format!("seed {seed}: entry {i} disagrees with mask"));
        }
    }

    let n = r.random_range(1..m);
    let nm = build_mask_nm(&scores, n, m).map_err(|e| e.to_string())?;
    if let Some(g) = nm.bits().chunks(m).position(|g| g.iter().filter(|&&b| b).count() != n) {
        return Err(format!("seed {seed}: group {g} does not keep exactly {n} of {m}"));
    }
    if build_mask_nm(&scores.scaled(c), n, m).map_err(|e| e.to_string())?.bits() != nm.bits() {
        return Err(format!("seed {seed}: N:M mask changed under score scale {c}"));
    }

    let ch = build_mask_channel(&w, None, sparsity).map_err(|e| e.to_string())?;
    for col in 0..cols {
        let first = ch.bits()[col];
        if (0..rows).any(|row| ch.bits()[row * cols + col] != first) {
            return Err(format!("seed {seed}: channel column {col} is not constant"));
        }
    }
    let pruned_cols = (0..cols).filter(|&col| !ch.bits()[col]).count();
    if pruned_cols != (sparsity * cols as f64).round() as usize {
        return Err(format!("seed {seed}: channel pruned {pruned_cols} columns"));
    }
    Ok(())
}
