mod common;

use common::*;
use ebft::baselines::*;
use ebft::data::tokenize;
use ebft::ebft::{block_masks, collect_block_io, finetune_model, FineTuneConfig, TeacherPropagation};
use ebft::model::{LanguageModel, MlpKind};
use ebft::pruning::{build_mask_unstructured, score_magnitude, MaskPattern, MaskTable, SparsityMask};
use ebft::Tensor;
use proptest::prelude::*;
use rand::Rng;

/// Row-wise `||X (W - V)ᵀ||²`, computed directly from the samples.
fn residual(w: &Tensor, v: &Tensor, x: &Tensor) -> f64 {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let mut total = 0.0;
    for sample in x.data().chunks(cols) {
        for r in 0..rows {
            let d: f64 = (0..cols)
                .map(|j| sample[j] * (w.data()[r * cols + j] - v.data()[r * cols + j]))
                .sum();
            total += d * d;
        }
    }
    total
}

/// Gradient of the residual with respect to `v`, restricted to kept entries.
fn kkt_gradient(w: &Tensor, v: &Tensor, x: &Tensor, mask: &SparsityMask) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let mut g = vec![0.0; rows * cols];
    for sample in x.data().chunks(cols) {
        for r in 0..rows {
            let d: f64 = (0..cols)
                .map(|j| sample[j] * (v.data()[r * cols + j] - w.data()[r * cols + j]))
                .sum();
            for j in 0..cols {
                g[r * cols + j] += 2.0 * d * sample[j];
            }
        }
    }
    g.iter().zip(mask.bits()).map(|(&x, &k)| if k { x } else { 0.0 }).collect()
}

fn random_instance(seed: u64, out: usize, inp: usize, n: usize) -> (Tensor, Tensor, SparsityMask) {
    let mut r = rng(seed);
    let w = Tensor::randn(&[out, inp], 1.0, &mut r);
    let x = Tensor::randn(&[n, inp], 1.0, &mut r);
    let scores = Tensor::randn(&[out, inp], 1.0, &mut r);
    let mask = build_mask_unstructured(&score_magnitude(&scores), 0.5).unwrap();
    (w, x, mask)
}

#[test]
fn kkt_gradient_vanishes_on_kept_coordinates() {
    for seed in 0..10 {
        let (w, x, mask) = random_instance(seed, 3, 4, 12);
        let (v, stats) = layerwise_lsq(&w, &x, &mask, 0.0).unwrap();
        let g = kkt_gradient(&w, &v, &x, &mask);
        let scale = kkt_gradient(&w, &Tensor::zeros(w.shape()), &x, &mask)
            .iter()
            .map(|x| x.abs())
            .fold(0.0, f64::max);
        let worst = g.iter().map(|x| x.abs()).fold(0.0, f64::max);
        assert!(worst / scale < 1e-6, "seed {seed}: {worst} vs {scale}");
        assert!((stats.residual_after - residual(&w, &v, &x)).abs() < 1e-9 * (1.0 + stats.residual_after));
        assert!(stats.residual_after <= stats.residual_before + 1e-9);
        for (a, &k) in v.data().iter().zip(mask.bits()) {
            if !k {
                assert_eq!(*a, 0.0);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn no_masked_refinement_beats_the_solver(
        seed in 0u64..10_000,
        out in 1usize..=4,
        inp in 1usize..=8,
        extra in 0usize..6,
    ) {
        let (w, x, mask) = random_instance(seed, out, inp, inp + extra);
        let (v, _) = layerwise_lsq(&w, &x, &mask, 0.0).unwrap();
        let best = residual(&w, &v, &x);
        // gradient refinement from the pruned weights
        let mut cur = ebft::pruning::apply_mask(&w, &mask).unwrap();
        for _ in 0..200 {
            let g = kkt_gradient(&w, &cur, &x, &mask);
            let gg: f64 = g.iter().map(|x| x * x).sum();
            if gg < 1e-30 {
                break;
            }
            // exact line search on the quadratic along -g
            let dir = Tensor::new(cur.shape(), g.clone()).unwrap();
            let curvature = residual(&dir, &Tensor::zeros(dir.shape()), &x);
            if curvature <= 0.0 {
                break;
            }
            let step = 0.5 * gg / curvature;
            for (c, gi) in cur.data_mut().iter_mut().zip(&g) {
                *c -= step * gi;
            }
        }
        prop_assert!(residual(&w, &cur, &x) >= best - 1e-6);
        // grid around the solution
        let mut r = rng(seed + 1);
        for _ in 0..20 {
            let mut p = v.clone();
            for (a, &k) in p.data_mut().iter_mut().zip(mask.bits()) {
                if k {
                    *a += r.random_range(-0.1..0.1);
                }
            }
            prop_assert!(residual(&w, &p, &x) >= best - 1e-6);
        }
    }
}

fn all_ones(model: &LanguageModel) -> MaskTable {
    model
        .maskable_weight_names()
        .into_iter()
        .map(|n| {
            let shape = model.tensor(&n).unwrap().shape().to_vec();
            (n, SparsityMask::ones(&shape))
        })
        .collect()
}

#[test]
fn lsq_at_zero_sparsity_is_identity() {
    let dense = lively_model(1, 2, MlpKind::Gated);
    let calib = random_calib(2, 8, 8, 16);
    let (out, stats) = lsq_finetune_model(&dense, &dense, &all_ones(&dense), &calib, 0.0).unwrap();
    for ((name, a), (_, b)) in out.named_tensors().into_iter().zip(dense.named_tensors()) {
        assert!(a.max_abs_diff(b) < 1e-9, "{name}: {}", a.max_abs_diff(b));
    }
    assert_eq!(stats.len(), dense.maskable_weight_names().len());
}

#[test]
fn lsq_reduces_every_layer_residual() {
    let dense = lively_model(3, 2, MlpKind::Standard);
    let calib = random_calib(4, 16, 8, 16);
    let pruned = prune(&dense, unstructured(0.5), &calib);
    let (out, stats) = lsq_finetune_model(&dense, &pruned.model, &pruned.masks, &calib, 0.0).unwrap();
    for s in &stats {
        assert!(s.residual_after < s.residual_before, "{s:?}");
        assert!(s.condition >= 1.0);
    }
    for (name, mask) in &pruned.masks {
        let w = out.tensor(name).unwrap();
        assert!(w.data().iter().zip(mask.bits()).all(|(x, &k)| k || *x == 0.0));
    }
}

#[test]
fn ebft_after_lsq_does_not_lose_ground() {
    let dense = lively_model(5, 2, MlpKind::Standard);
    let calib = random_calib(6, 16, 8, 16);
    let pruned = prune(&dense, unstructured(0.5), &calib);
    let (lsq, _) = lsq_finetune_model(&dense, &pruned.model, &pruned.masks, &calib, 0.0).unwrap();
    let cfg = FineTuneConfig {
        lr: 1e-3,
        max_epochs: 3,
        batch_size: 4,
        ..FineTuneConfig::default()
    };
    let (tuned, report) = finetune_model(&dense, &lsq, &pruned.masks, &calib, &cfg).unwrap();
    let lsq_losses = stream_block_losses(&dense, &lsq, &calib).unwrap();
    let tuned_losses = stream_block_losses(&dense, &tuned, &calib).unwrap();
    assert_eq!(report.initial_losses()[0], lsq_losses[0]);
    for (t, l) in tuned_losses.iter().zip(&lsq_losses) {
        assert!(t <= l, "{tuned_losses:?} vs {lsq_losses:?}");
    }
}

#[test]
fn mask_tune_with_zero_loss_keeps_masks() {
    let dense = lively_model(7, 1, MlpKind::Standard);
    let calib = random_calib(8, 4, 8, 16);
    let masks = block_masks(&all_ones(&dense), 0);
    let io = collect_block_io(&dense, &dense, &calib, 0, TeacherPropagation::Dense).unwrap();
    let (out, report) = mask_tune_block(&dense.blocks[0], &masks, &io, &FineTuneConfig::default(), 1e-5).unwrap();
    assert_eq!(out, masks);
    assert_eq!(report.losses, vec![0.0]);
    assert_eq!(report.swaps_tried, 0);
}

/// One kept weight is exactly zero (worthless) while a large weight is
/// pruned: swapping them recovers the dense block exactly.
#[test]
fn mask_tune_finds_the_reconstructing_swap() {
    let mut dense = lively_model(9, 1, MlpKind::Standard);
    let calib = random_calib(10, 8, 8, 16);
    let down = &mut dense.blocks[0].down.weight;
    let len = down.numel();
    let grow = (0..len)
        .max_by(|&a, &b| down.data()[a].abs().total_cmp(&down.data()[b].abs()))
        .unwrap();
    let worthless = (grow + 1) % len;
    down.data_mut()[worthless] = 0.0;
    let mut bits = vec![true; len];
    bits[grow] = false;
    let mut masks = block_masks(&all_ones(&dense), 0);
    let pattern = MaskPattern::Unstructured {
        sparsity: 1.0 / len as f64,
    };
    masks.insert("mlp.down".into(), SparsityMask::new(pattern, &[8, 32], bits).unwrap());

    let mut sparse = dense.clone();
    sparse.blocks[0].down.weight.data_mut()[grow] = 0.0;
    let io = collect_block_io(&dense, &sparse, &calib, 0, TeacherPropagation::Dense).unwrap();
    let (out, report) = mask_tune_block(&dense.blocks[0], &masks, &io, &FineTuneConfig::default(), 1e-5).unwrap();
    assert!(report.losses[0] > 0.0);
    assert_eq!(*report.losses.last().unwrap(), 0.0, "{report:?}");
    assert_eq!(report.swaps_accepted, 1);
    let m = &out["mlp.down"];
    assert!(m.bits()[grow]);
    assert!(!m.bits()[worthless]);
}

#[test]
fn mask_tune_preserves_sparsity_pattern_and_weights() {
    let dense = lively_model(11, 2, MlpKind::Gated);
    let calib = random_calib(12, 8, 8, 16);
    for pattern in [
        unstructured(0.5),
        MaskPattern::NM { n: 2, m: 4 },
        MaskPattern::Channel { sparsity: 0.5 },
    ] {
        let pruned = prune(&dense, pattern, &calib);
        let cfg = FineTuneConfig {
            max_epochs: 4,
            ..FineTuneConfig::default()
        };
        let (model, table, reports) = mask_tune_model(&dense, &pruned.masks, &calib, &cfg).unwrap();
        assert_eq!(table.len(), pruned.masks.len());
        for (name, mask) in &table {
            let before = &pruned.masks[name];
            assert_eq!(mask.zeros(), before.zeros(), "{pattern} {name}");
            assert_eq!(mask.pattern, before.pattern);
            mask.check_pattern().unwrap();
            let w = model.tensor(name).unwrap();
            let orig = dense.tensor(name).unwrap();
            for ((a, b), &k) in w.data().iter().zip(orig.data()).zip(mask.bits()) {
                assert_eq!(a.to_bits(), if k { b.to_bits() } else { 0.0f64.to_bits() });
            }
        }
        for r in &reports {
            assert!(r.losses.last().unwrap() <= &r.losses[0]);
        }
    }
}

fn eval_corpus() -> ebft::data::Corpus {
    let mut r = rng(99);
    let bytes: Vec<u8> = (0..400).map(|_| r.random_range(0..16u8)).collect();
    tokenize(&bytes).unwrap()
}

fn compare_cfg() -> CompareConfig {
    CompareConfig {
        finetune: FineTuneConfig {
            lr: 2e-3,
            max_epochs: 3,
            batch_size: 4,
            ..FineTuneConfig::default()
        },
        eval_seq_len: 8,
        lsq_lambda: 0.0,
    }
}

#[test]
fn compare_at_zero_sparsity_reports_identical_rows() {
    let dense = lively_model(13, 2, MlpKind::Standard);
    let calib = random_calib(14, 6, 8, 16);
    let report = compare_strategies(&dense, &dense, &all_ones(&dense), &calib, &eval_corpus(), &compare_cfg()).unwrap();
    let names: Vec<&str> = report.rows.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, ["none", "lsq", "mask", "ebft"]);
    let base = report.rows[0].perplexity;
    for row in &report.rows {
        assert!((row.perplexity - base).abs() <= 1e-9 * base, "{row:?}");
    }
}

#[test]
fn compare_is_deterministic_and_ebft_beats_no_finetune() {
    let dense = lively_model(15, 2, MlpKind::Standard);
    let calib = random_calib(16, 8, 8, 16);
    let pruned = prune(&dense, unstructured(0.5), &calib);
    let run = || compare_strategies(&dense, &pruned.model, &pruned.masks, &calib, &eval_corpus(), &compare_cfg()).unwrap();
    let a = run();
    let b = run();
    assert!(a.same_results(&b));
    let none = a.row("none").unwrap();
    let ebft = a.row("ebft").unwrap();
    for (e, n) in ebft.per_block_loss.iter().zip(&none.per_block_loss) {
        assert!(e <= n, "{:?} vs {:?}", ebft.per_block_loss, none.per_block_loss);
    }
    let v: serde_json::Value = serde_json::from_str(&a.to_json().unwrap()).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 4);
}
