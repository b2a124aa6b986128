//! Gradient-check cases, one per differentiable primitive plus the full
//! block composition. Each case maps a seed to the worst relative error.

use super::{gradcheck, random_block, rng, weighted_sum};
use ebft::model::{BlockVars, LinearVars, MlpKind, NormVars};
use ebft::{Tape, Tensor, Var};

pub type Case = (&'static str, fn(u64) -> f64);

fn randn(shape: &[usize], seed: u64, salt: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed * 1000 + salt))
}

pub fn matmul_2d(seed: u64) -> f64 {
    let inputs = [randn(&[3, 4], seed, 1), randn(&[4, 2], seed, 2), randn(&[3, 2], seed, 3)];
    gradcheck(
        &|t: &mut Tape, v: &[Var]| {
            let o = t.matmul(v[0], v[1])?;
            weighted_sum(t, o, v[2])
        },
        &inputs,
        &[true, true, false],
    )
}

pub fn matmul_batched(seed: u64) -> f64 {
    let inputs = [randn(&[2, 3, 4], seed, 1), randn(&[2, 4, 5], seed, 2), randn(&[2, 3, 5], seed, 3)];
    gradcheck(
        &|t: &mut Tape, v: &[Var]| {
            let o = t.matmul(v[0], v[1])?;
            weighted_sum(t, o, v[2])
        },
        &inputs,
        &[true, true, false],
    )
}

pub fn matmul_flat(seed: u64) -> f64 {
    let inputs = [randn(&[2, 3, 4], seed, 1), randn(&[4, 5], seed, 2), randn(&[2, 3, 5], seed, 3)];
    gradcheck(
        &|t: &mut Tape, v: &[Var]| {
            let o = t.matmul(v[0], v[1])?;
            weighted_sum(t, o, v[2])
        },
        &inputs,
        &[true, true, false],
    )
}

pub fn add_broadcast(seed: u64) -> f64 {
    let inputs = [randn(&[3, 4], seed, 1), randn(&[4], seed, 2), randn(&[3, 4], seed, 3)];
    gradcheck(
        &|t: &mut Tape, v: &[Var]| {
            let o = t.add(v[0], v[1])?;
            weighted_sum(t, o, v[2])
        },
        &inputs,
        &[true, true, false],
    )
}

pub fn mul_broadcast(seed: u64) -> f64 {
    let inputs = [randn(&[2, 3, 4], seed, 1), randn(&[4], seed, 2), randn(&[2, 3, 4], seed, 3)];
    gradcheck(
        &|t: &mut Tape, v: &[Var]| {
            let o = t.mul(v[0], v[1])?;
            weighted_sum(t, o, v[2])
        },
        &inputs,
        &[true, true, false],
    )
}

pub fn scale_and_silu(seed: u64) -> f64 {
    let inputs = [randn(&[5, 3], seed, 1), randn(&[5, 3], seed, 2)];
    gradcheck(
        &|t: &mut Tape, v: &[Var]| {
            let s = t.scale(v[0], -1.7)?;
            let o = t.silu(s)?;
            weighted_sum(t, o, v[1])
        },
        &inputs,
        &[true, false],
    )
}

/// reshape, transpose and mul chained.
pub fn reshape_transpose_mul(seed: u64) -> f64 {
    let inputs = [randn(&[2, 12], seed, 1), randn(&[4, 3, 2], seed, 2), randn(&[4, 3, 2], seed, 3)];
    gradcheck(
        &|t: &mut Tape, v: &[Var]| {
            let r = t.reshape(v[0], &[2, 3, 4])?;
            let tr = t.transpose(r, 0, 2)?;
            let m = t.mul(tr, v[1])?;
            weighted_sum(t, m, v[2])
        },
        &inputs,
        &[true, true, false],
    )
}

pub fn slice_concat(seed: u64) -> f64 {
    let inputs = [randn(&[2, 5, 3], seed, 1), randn(&[2, 2, 3], seed, 2), randn(&[2, 4, 3], seed, 3)];
    gradcheck(
        &|t: &mut Tape, v: &[Var]| {
            let s = t.slice(v[0], 1, 1, 3)?;
            let c = t.concat(&[v[1], s], 1)?;
            weighted_sum(t, c, v[2])
        },
        &inputs,
        &[true, true, false],
    )
}

pub fn mean_of_product(seed: u64) -> f64 {
    let inputs = [randn(&[3, 4], seed, 1), randn(&[3, 4], seed, 2)];
    gradcheck(
        &|t: &mut Tape, v: &[Var]| {
            let m = t.mul(v[0], v[1])?;
            t.mean(m)
        },
        &inputs,
        &[true, true],
    )
}

pub fn softmax_vector(seed: u64) -> f64 {
    let inputs = [randn(&[4], seed, 1), randn(&[4], seed, 2)];
    gradcheck(
        &|t: &mut Tape, v: &[Var]| {
            let s = t.softmax(v[0], 0)?;
            weighted_sum(t, s, v[1])
        },
        &inputs,
        &[true, false],
    )
}

pub fn softmax_middle_axis(seed: u64) -> f64 {
    let inputs = [randn(&[3, 4, 2], seed, 1), randn(&[3, 4, 2], seed, 2)];
    gradcheck(
        &|t: &mut Tape, v: &[Var]| {
            let s = t.softmax(v[0], 1)?;
            weighted_sum(t, s, v[1])
        },
        &inputs,
        &[true, false],
    )
}

pub fn layer_norm(seed: u64) -> f64 {
    let inputs = [
        randn(&[2, 8], seed, 1),
        randn(&[8], seed, 2),
        randn(&[8], seed, 3),
        randn(&[2, 8], seed, 4),
    ];
    gradcheck(
        &|t: &mut Tape, v: &[Var]| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(t, y, v[3])
        },
        &inputs,
        &[true, true, true, false],
    )
}

pub fn reconstruction_loss(seed: u64) -> f64 {
    let inputs = [randn(&[2, 3, 4], seed, 1), randn(&[2, 3, 4], seed, 2)];
    gradcheck(&|t: &mut Tape, v: &[Var]| t.mse(v[0], v[1]), &inputs, &[true, true])
}

pub fn cross_entropy(seed: u64) -> f64 {
    let inputs = [randn(&[5, 7], seed, 1)];
    let targets = [(seed % 7) as usize, 3, 0, 6, 2];
    gradcheck(&|t: &mut Tape, v: &[Var]| t.cross_entropy(v[0], &targets), &inputs, &[true])
}

pub fn embedding(seed: u64) -> f64 {
    let inputs = [randn(&[6, 3], seed, 1), randn(&[5, 3], seed, 2)];
    let ids = [1, 4, 1, (seed % 6) as usize, 0];
    gradcheck(
        &|t: &mut Tape, v: &[Var]| {
            let e = t.embedding(v[0], &ids)?;
            weighted_sum(t, e, v[1])
        },
        &inputs,
        &[true, false],
    )
}

/// Rebuilds block handles from leaves laid out in `TransformerBlock::named` order.
pub fn block_vars_from(v: &[Var], gated: bool) -> BlockVars {
    let lin = |i: usize| LinearVars {
        weight: v[i],
        bias: v[i + 1],
    };
    let mut i = 10;
    let ln2 = NormVars {
        gamma: v[i],
        beta: v[i + 1],
    };
    i += 2;
    let gate = if gated {
        i += 2;
        Some(lin(i - 2))
    } else {
        None
    };
    BlockVars {
        ln1: NormVars {
            gamma: v[0],
            beta: v[1],
        },
        q: lin(2),
        k: lin(4),
        v: lin(6),
        o: lin(8),
        ln2,
        gate,
        up: lin(i),
        down: lin(i + 2),
    }
}

fn block_case(seed: u64, mlp: MlpKind) -> f64 {
    let block = random_block(seed, mlp);
    let gated = block.gate.is_some();
    let mut inputs = vec![randn(&[2, 3, 8], seed, 1), randn(&[2, 3, 8], seed, 2)];
    inputs.extend(block.named().into_iter().map(|(_, t)| t.clone()));
    let differentiate = vec![true; inputs.len()];
    gradcheck(
        &|t: &mut Tape, v: &[Var]| {
            let vars = block_vars_from(&v[2..], gated);
            let trace = block.forward_on_tape(t, &vars, v[0], 1e-5, true)?;
            t.mse(v[1], trace.out)
        },
        &inputs,
        &differentiate,
    )
}

pub fn block_standard(seed: u64) -> f64 {
    block_case(seed, MlpKind::Standard)
}

pub fn block_gated(seed: u64) -> f64 {
    block_case(seed, MlpKind::Gated)
}

pub fn all() -> Vec<Case> {
    vec![
        ("matmul", matmul_2d),
        ("matmul_batched", matmul_batched),
        ("matmul_flat", matmul_flat),
        ("add", add_broadcast),
        ("mul", mul_broadcast),
        ("scale+silu", scale_and_silu),
        ("reshape+transpose+mul", reshape_transpose_mul),
        ("slice+concat", slice_concat),
        ("mean", mean_of_product),
        ("softmax", softmax_vector),
        ("softmax_axis1", softmax_middle_axis),
        ("layer_norm", layer_norm),
        ("reconstruction_loss", reconstruction_loss),
        ("cross_entropy", cross_entropy),
        ("embedding", embedding),
        ("block_forward+loss", block_standard),
        ("block_forward_gated+loss", block_gated),
    ]
}
