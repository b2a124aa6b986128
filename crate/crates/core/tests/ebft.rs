mod common;

use common::*;
use ebft::baselines::layerwise_lsq;
use ebft::ebft::*;
use ebft::model::MlpKind;
use ebft::pruning::{MaskPattern, MaskTable, SparsityMask};
use ebft::{Error, Tensor};
use proptest::prelude::*;
use std::collections::BTreeMap;

fn all_ones(model: &ebft::model::LanguageModel) -> MaskTable {
    model
        .maskable_weight_names()
        .into_iter()
        .map(|n| {
            let shape = model.tensor(&n).unwrap().shape().to_vec();
            (n, SparsityMask::ones(&shape))
        })
        .collect()
}

fn quick(epochs: usize) -> FineTuneConfig {
    FineTuneConfig {
        lr: 5e-3,
        max_epochs: epochs,
        batch_size: 4,
        ..FineTuneConfig::default()
    }
}

#[test]
fn first_block_student_input_is_the_dense_embedding() {
    let dense = lively_model(1, 2, MlpKind::Standard);
    let calib = random_calib(2, 6, 8, 16);
    let pruned = prune(&dense, unstructured(0.5), &calib);
    let io = collect_block_io(&dense, &pruned.model, &calib, 0, TeacherPropagation::Dense).unwrap();
    let reference = embed_calibration(&dense, &calib).unwrap();
    assert!(io.inputs.bit_eq(&reference));
}

#[test]
fn dense_mask_targets_equal_student_outputs() {
    let dense = lively_model(3, 2, MlpKind::Gated);
    let calib = random_calib(4, 5, 8, 16);
    for l in 0..2 {
        let io = collect_block_io(&dense, &dense, &calib, l, TeacherPropagation::Dense).unwrap();
        let out = propagate(&dense.blocks[l], &io.inputs, 1e-5).unwrap();
        assert!(out.bit_eq(&io.targets));
        assert_eq!(block_loss(&dense.blocks[l], &io, 1e-5).unwrap(), 0.0);
    }
}

#[test]
fn teacher_matches_truncated_full_forward() {
    let dense = lively_model(5, 3, MlpKind::Standard);
    let calib = random_calib(6, 4, 8, 16);
    let pruned = prune(&dense, unstructured(0.6), &calib);
    let io = collect_block_io(&dense, &pruned.model, &calib, 2, TeacherPropagation::Dense).unwrap();
    let tokens: Vec<usize> = calib.segments.concat();
    let states = dense.hidden_states(&tokens, calib.n_samples()).unwrap();
    assert!(io.targets.max_abs_diff(&states[3]) < 1e-12);
    let sparse_states = pruned.model.hidden_states(&tokens, calib.n_samples()).unwrap();
    assert!(io.inputs.max_abs_diff(&sparse_states[2]) < 1e-12);
}

#[test]
fn self_teacher_reads_the_sparse_stream() {
    let dense = lively_model(7, 2, MlpKind::Standard);
    let calib = random_calib(8, 4, 8, 16);
    let pruned = prune(&dense, unstructured(0.5), &calib);
    let io = collect_block_io(&dense, &pruned.model, &calib, 1, TeacherPropagation::SelfStream).unwrap();
    let expect = propagate(&dense.blocks[1], &io.inputs, 1e-5).unwrap();
    assert!(io.targets.bit_eq(&expect));
}

#[test]
fn block_index_out_of_range() {
    let dense = lively_model(1, 2, MlpKind::Standard);
    let calib = random_calib(2, 2, 8, 16);
    assert!(matches!(
        collect_block_io(&dense, &dense, &calib, 2, TeacherPropagation::Dense),
        Err(Error::Index { index: 2, len: 2 })
    ));
}

#[test]
fn zero_sparsity_block_converges_at_first_check() {
    let dense = lively_model(9, 1, MlpKind::Standard);
    let calib = random_calib(10, 4, 8, 16);
    let io = collect_block_io(&dense, &dense, &calib, 0, TeacherPropagation::Dense).unwrap();
    let masks = block_masks(&all_ones(&dense), 0);
    let (out, report) = finetune_block(&dense.blocks[0], &masks, &io, &FineTuneConfig::default(), 1e-5).unwrap();
    assert_eq!(report.losses, vec![0.0]);
    assert_eq!(report.epochs_run, 0);
    assert!(report.converged);
    assert!(out.bit_eq(&dense.blocks[0]));
}

/// Target produced by the same block with different `mlp.down` weights on the
/// mask's support, so the problem is reachable: the least-squares fit of that
/// layer recovers it with zero residual.
#[test]
fn reachable_target_loss_halves() {
    let mut teacher = lively_model(11, 1, MlpKind::Standard);
    let calib = random_calib(12, 16, 8, 16);
    let pruned = prune(&teacher, unstructured(0.5), &calib);
    let down_mask = pruned.masks["blocks.0.mlp.down.weight"].clone();
    let mut r = rng(13);
    let fresh = Tensor::randn(&[8, 32], 0.3, &mut r);
    let w_star = ebft::pruning::apply_mask(&fresh, &down_mask).unwrap();
    teacher.blocks[0].down.weight = w_star.clone();

    let mut student = pruned.model.clone();
    student.blocks[0] = teacher.blocks[0].clone();
    student.blocks[0].down.weight = pruned.model.blocks[0].down.weight.clone();
    let mut masks = all_ones(&teacher);
    masks.insert("blocks.0.mlp.down.weight".into(), down_mask.clone());

    let io = collect_block_io(&teacher, &student, &calib, 0, TeacherPropagation::Dense).unwrap();

    // closed form: the activations feeding `down` determine W* exactly
    let mut tape = ebft::Tape::new();
    let vars = student.blocks[0].bind(&mut tape, |_| false);
    let x = tape.constant(io.inputs.clone());
    let trace = student.blocks[0].forward_on_tape(&mut tape, &vars, x, 1e-5, true).unwrap();
    let act = tape.value(trace.input_of("mlp.down").unwrap()).reshaped(&[16 * 8, 32]).unwrap();
    let (solved, stats) = layerwise_lsq(&w_star, &act, &down_mask, 0.0).unwrap();
    assert!(stats.residual_after < 1e-18);
    assert!(solved.max_abs_diff(&w_star) < 1e-8);

    let (_, report) = finetune_block(&student.blocks[0], &block_masks(&masks, 0), &io, &quick(10), 1e-5).unwrap();
    assert!(
        report.final_loss() < 0.5 * report.initial_loss(),
        "{:?}",
        report.losses
    );
}

#[test]
fn pruned_entries_stay_exactly_zero_and_norms_frozen() {
    let dense = lively_model(14, 2, MlpKind::Gated);
    let calib = random_calib(15, 8, 8, 16);
    let pruned = prune(&dense, unstructured(0.5), &calib);
    let (tuned, report) = finetune_model(&dense, &pruned.model, &pruned.masks, &calib, &quick(3)).unwrap();
    for (name, mask) in &pruned.masks {
        let w = tuned.tensor(name).unwrap();
        for (x, &keep) in w.data().iter().zip(mask.bits()) {
            if !keep {
                assert_eq!(x.to_bits(), 0.0f64.to_bits(), "{name}");
            }
        }
    }
    for ((name, a), (_, b)) in tuned.named_tensors().into_iter().zip(pruned.model.named_tensors()) {
        if !pruned.masks.contains_key(&name) {
            assert!(a.bit_eq(b), "{name} changed");
        }
    }
    assert!(report.loss.iter().flatten().all(|l| l.is_finite()));
    assert_eq!(report.peak_resident_blocks, 1);
}

#[test]
fn train_norms_unfreezes_layer_norms() {
    let dense = lively_model(16, 1, MlpKind::Standard);
    let calib = random_calib(17, 4, 8, 16);
    let pruned = prune(&dense, unstructured(0.5), &calib);
    let cfg = FineTuneConfig {
        train_norms: true,
        ..quick(2)
    };
    let (tuned, _) = finetune_model(&dense, &pruned.model, &pruned.masks, &calib, &cfg).unwrap();
    assert!(!tuned.blocks[0].ln1.gamma.bit_eq(&pruned.model.blocks[0].ln1.gamma));
    assert!(!tuned.blocks[0].q.bias.bit_eq(&pruned.model.blocks[0].q.bias));
}

#[test]
fn single_block_model_matches_finetune_block() {
    let dense = lively_model(18, 1, MlpKind::Standard);
    let calib = random_calib(19, 6, 8, 16);
    let pruned = prune(&dense, unstructured(0.5), &calib);
    let cfg = quick(3);
    let (model, report) = finetune_model(&dense, &pruned.model, &pruned.masks, &calib, &cfg).unwrap();
    let io = collect_block_io(&dense, &pruned.model, &calib, 0, cfg.teacher_propagation).unwrap();
    let (block, block_report) =
        finetune_block(&pruned.model.blocks[0], &block_masks(&pruned.masks, 0), &io, &cfg, 1e-5).unwrap();
    assert!(model.blocks[0].bit_eq(&block));
    assert_eq!(report.loss[0], block_report.losses);
}

#[test]
fn all_ones_masks_leave_model_unchanged() {
    let dense = lively_model(20, 2, MlpKind::Standard);
    let calib = random_calib(21, 4, 8, 16);
    let (model, report) = finetune_model(&dense, &dense, &all_ones(&dense), &calib, &FineTuneConfig::default()).unwrap();
    assert!(model.bit_eq(&dense));
    assert_eq!(report.epochs, vec![0, 0]);
    assert_eq!(report.converged, vec![true, true]);
    assert_eq!(report.final_losses(), vec![0.0, 0.0]);
}

#[test]
fn finetuning_is_reproducible() {
    let dense = lively_model(22, 2, MlpKind::Standard);
    let calib = random_calib(23, 6, 8, 16);
    let pruned = prune(&dense, MaskPattern::NM { n: 2, m: 4 }, &calib);
    let run = || finetune_model(&dense, &pruned.model, &pruned.masks, &calib, &quick(2)).unwrap();
    let (a, ra) = run();
    let (b, rb) = run();
    assert!(a.bit_eq(&b));
    assert_eq!(ra.loss, rb.loss);
}

#[test]
fn diverging_learning_rate_aborts_with_context() {
    let dense = lively_model(24, 1, MlpKind::Standard);
    let calib = random_calib(25, 4, 8, 16);
    let pruned = prune(&dense, unstructured(0.5), &calib);
    let cfg = FineTuneConfig {
        lr: 1e300,
        optimizer: ebft::tensor::OptimizerKind::Sgd,
        ..quick(3)
    };
    match finetune_model(&dense, &pruned.model, &pruned.masks, &calib, &cfg) {
        Err(Error::Numeric(msg)) => {
            assert!(msg.contains("block 0"), "{msg}");
            assert!(msg.contains("lr"), "{msg}");
        }
        other => panic!("expected numeric abort, got {other:?}"),
    }
}

#[test]
fn missing_mask_is_a_contract_error() {
    let dense = lively_model(26, 1, MlpKind::Standard);
    let calib = random_calib(27, 2, 8, 16);
    let mut masks = all_ones(&dense);
    masks.remove("blocks.0.attn.o.weight");
    assert!(matches!(
        finetune_model(&dense, &dense, &masks, &calib, &FineTuneConfig::default()),
        Err(Error::Contract(_))
    ));
}

#[test]
fn mismatched_models_are_a_config_error() {
    let dense = lively_model(28, 1, MlpKind::Standard);
    let other = lively_model(28, 2, MlpKind::Standard);
    let calib = random_calib(29, 2, 8, 16);
    assert!(matches!(
        finetune_model(&dense, &other, &all_ones(&dense), &calib, &FineTuneConfig::default()),
        Err(Error::Config(_))
    ));
}

#[test]
fn report_json_has_per_block_arrays() {
    let dense = lively_model(30, 2, MlpKind::Standard);
    let calib = random_calib(31, 4, 8, 16);
    let pruned = prune(&dense, unstructured(0.5), &calib);
    let (_, report) = finetune_model(&dense, &pruned.model, &pruned.masks, &calib, &quick(2)).unwrap();
    let v: serde_json::Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();
    for key in ["loss", "epochs", "seconds", "converged"] {
        assert_eq!(v[key].as_array().unwrap().len(), 2, "{key}");
    }
    assert_eq!(v["config"]["lr"], 5e-3);
    assert!(report.loss.iter().all(|l| l.len() <= 3));
    let back: FineTuneReport = serde_json::from_value(v).unwrap();
    assert_eq!(back, report);
}

#[test]
fn empty_block_masks_for_other_prefix() {
    let masks: MaskTable = BTreeMap::from([("blocks.1.attn.q.weight".to_string(), SparsityMask::ones(&[2, 2]))]);
    assert!(block_masks(&masks, 0).is_empty());
    assert_eq!(block_masks(&masks, 1).keys().collect::<Vec<_>>(), vec!["attn.q"]);
}

proptest! {
    #[test]
    fn constant_history_always_converges(v in 1e-6f64..1e3, n in 3usize..8, patience in 1usize..3) {
        prop_assert!(convergence_check(&vec![v; n], 1e-4, patience));
    }

    #[test]
    fn steady_decrease_never_converges(start in 1e-3f64..1e3, ratio in 0.5f64..0.99, n in 2usize..8) {
        let h: Vec<f64> = (0..n).map(|i| start * ratio.powi(i as i32)).collect();
        prop_assert!(!convergence_check(&h, 1e-4, 1));
    }

    #[test]
    fn short_history_never_converges(h in proptest::collection::vec(0.0f64..1.0, 0..3)) {
        prop_assert!(!convergence_check(&h, 1e-4, h.len().max(1)));
    }
}
