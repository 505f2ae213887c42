mod common;

use jpu_core::buffer::{init_buffer, Buffer};
use jpu_core::corpus::{build_world, World, WorldSizes};
use jpu_core::lm::{work_units, Gradients, ModelState};
use jpu_core::rectifier::{
    anchor_alignment_loss, baseline_unlearn_grads, baseline_unlearn_loss, centroid, compute_safety_anchor, cosine_distance,
    rectification_grads, refusal_behavior_loss, total_loss, train, train_baseline, utility_grads, BaselineConfig, LossBundle, MaskSource,
    SafetyAnchor, TrainConfig, TrainStatus, ITERATION_HEADER,
};
use jpu_core::JpuError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const REFUSE: usize = 2;
const EOS: usize = 1;

fn world() -> World {
    build_world(6, &WorldSizes::default()).unwrap()
}

/// Random samples of `(tensor, index)` checked against central differences.
fn check_grads(model: &ModelState, grads: &Gradients, samples: usize, seed: u64, loss: &dyn Fn(&ModelState) -> f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let views = grads.tensors();
    for _ in 0..samples {
        let t = rng.gen_range(0..views.len());
        let i = rng.gen_range(0..views[t].data.len());
        let numeric = common::fd_param(model, t, i, loss);
        let analytic = views[t].data[i];
        assert!(common::grads_agree(analytic, numeric), "{}[{i}]: {analytic} vs {numeric}", views[t].name);
    }
}

fn anchor_for(model: &ModelState, prompts: &[Vec<usize>]) -> SafetyAnchor {
    let hs: Vec<Vec<f64>> = prompts.iter().map(|p| model.hidden_snapshot(p).unwrap().vector).collect();
    SafetyAnchor { centroid: centroid(&hs), sample_count: hs.len(), frozen_at_iteration: 0, fallback: false }
}

#[test]
fn centroid_example() {
    assert_eq!(centroid(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 0.0]]), vec![3.0, 2.0]);
}

#[test]
fn cosine_distance_examples() {
    assert!(cosine_distance(&[1.0, 2.0], &[2.0, 4.0]).unwrap().0.abs() < 1e-15);
    assert!((cosine_distance(&[1.0, 0.0], &[0.0, 3.0]).unwrap().0 - 1.0).abs() < 1e-15);
    assert!((cosine_distance(&[1.0, 1.0], &[-2.0, -2.0]).unwrap().0 - 2.0).abs() < 1e-15);
    assert!(matches!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]), Err(JpuError::Numeric { .. })));
}

#[test]
fn cosine_distance_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let h: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, g) = cosine_distance(&h, &c).unwrap();
        for i in 0..6 {
            let mut hp = h.clone();
            hp[i] += 1e-6;
            let mut hm = h.clone();
            hm[i] -= 1e-6;
            let num = (cosine_distance(&hp, &c).unwrap().0 - cosine_distance(&hm, &c).unwrap().0) / 2e-6;
            assert!(common::grads_agree(g[i], num), "{} vs {num}", g[i]);
        }
    }
}

#[test]
fn anchor_uses_refused_prompts_only() {
    let m = common::scripted_model(common::small_config(0), REFUSE, EOS);
    let candidates: Vec<Vec<usize>> = (0..30).map(|i| vec![4 + i % 10, 5]).collect();
    let a = compute_safety_anchor(&m, &candidates, REFUSE, 7).unwrap();
    assert_eq!(a.sample_count, 16);
    assert!(!a.fallback);
    assert_eq!(a.frozen_at_iteration, 7);
    let expect: Vec<Vec<f64>> = candidates[..16].iter().map(|p| m.hidden_snapshot(p).unwrap().vector).collect();
    assert_eq!(a.centroid, centroid(&expect));
}

#[test]
fn anchor_falls_back_when_nothing_is_refused() {
    let m = common::scripted_model(common::small_config(0), 3, EOS);
    let candidates: Vec<Vec<usize>> = (0..10).map(|i| vec![4 + i]).collect();
    let a = compute_safety_anchor(&m, &candidates, REFUSE, 0).unwrap();
    assert!(a.fallback);
    assert_eq!(a.sample_count, 10);
    assert!(compute_safety_anchor(&m, &[], REFUSE, 0).is_err());
}

#[test]
fn rectification_gradient_matches_finite_differences() {
    let m = common::small_model(21);
    let prompts = vec![vec![4, 5, 6], vec![7, 8], vec![9, 3, 11, 12]];
    let anchor = anchor_for(&common::small_model(22), &prompts);
    let y = vec![REFUSE, EOS];
    let beta = 4.0;
    let (lh, ls, grads) = rectification_grads(&m, &prompts, &y, Some(&anchor), beta).unwrap();
    assert!((lh - refusal_behavior_loss(&m, &prompts, &y).unwrap()).abs() < 1e-12);
    assert!((ls - anchor_alignment_loss(&m, &prompts, &anchor).unwrap()).abs() < 1e-12);
    let loss =
        |s: &ModelState| refusal_behavior_loss(s, &prompts, &y).unwrap() + beta * anchor_alignment_loss(s, &prompts, &anchor).unwrap();
    check_grads(&m, &grads, 60, 1, &loss);
}

#[test]
fn utility_gradient_matches_finite_differences() {
    let m = common::small_model(23);
    let pairs = vec![(vec![1, 2, 3], vec![13, 14, EOS]), (vec![5], vec![15, EOS])];
    let (lu, grads) = utility_grads(&m, &pairs).unwrap();
    let loss = |s: &ModelState| pairs.iter().map(|(p, y)| s.nll_loss(p, y).unwrap()).sum::<f64>() / 2.0;
    assert!((lu - loss(&m)).abs() < 1e-12);
    check_grads(&m, &grads, 60, 2, &loss);
}

#[test]
fn baseline_gradient_matches_finite_differences() {
    let m = common::small_model(24);
    let forget = vec![vec![4, 5], vec![6, 7, 8]];
    let retain = vec![(vec![12, 13], vec![14, EOS])];
    let y = vec![REFUSE, EOS];
    let (total, grads) = baseline_unlearn_grads(&m, &forget, &retain, &y, 0.5).unwrap();
    let loss = |s: &ModelState| baseline_unlearn_loss(s, &forget, &retain, &y, 0.5).unwrap();
    assert!((total - loss(&m)).abs() < 1e-12);
    check_grads(&m, &grads, 40, 3, &loss);
}

#[test]
fn rectification_gradient_is_linear_in_beta() {
    let m = common::small_model(25);
    let prompts = vec![vec![4, 5, 6], vec![7, 8]];
    let anchor = anchor_for(&common::small_model(26), &prompts);
    let y = vec![REFUSE, EOS];
    let g0 = rectification_grads(&m, &prompts, &y, Some(&anchor), 0.0).unwrap().2;
    let g1 = rectification_grads(&m, &prompts, &y, Some(&anchor), 1.0).unwrap().2;
    let g3 = rectification_grads(&m, &prompts, &y, Some(&anchor), 3.0).unwrap().2;
    let mut expect = g1.clone();
    expect.add_scaled(&g0, -1.0);
    expect.scale(3.0);
    expect.add_scaled(&g0, 1.0);
    for (a, b) in g3.tensors().iter().zip(expect.tensors()) {
        for (x, y) in a.data.iter().zip(b.data) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }
}

#[test]
fn loss_bundle_composes_and_total_loss_agrees() {
    let b = LossBundle::new(1.0, 0.25, 2.0, 4.0, 0.5);
    assert_eq!(b.total, 3.0);
    assert!(b.is_finite());
    assert!(!LossBundle::new(f64::NAN, 0.0, 0.0, 1.0, 1.0).is_finite());

    let m = common::small_model(27);
    let prompts = vec![vec![4, 5, 6]];
    let anchor = anchor_for(&common::small_model(28), &prompts);
    let y = vec![REFUSE, EOS];
    let util = vec![(vec![1, 2], vec![3, EOS])];
    let (bundle, rect, ug) = total_loss(&m, &prompts, &y, &anchor, &util, 4.0, 0.5).unwrap();
    let (lh, ls, rect2) = rectification_grads(&m, &prompts, &y, Some(&anchor), 4.0).unwrap();
    let (lu, ug2) = utility_grads(&m, &util).unwrap();
    assert_eq!(bundle, LossBundle::new(lh, ls, lu, 4.0, 0.5));
    assert_eq!(rect, rect2);
    assert_eq!(ug, ug2);
}

#[test]
fn losses_reject_empty_batches() {
    let m = common::small_model(0);
    assert!(refusal_behavior_loss(&m, &[], &[REFUSE]).is_err());
    assert!(utility_grads(&m, &[]).is_err());
    let long = vec![vec![4; 9]];
    assert!(rectification_grads(&m, &long, &[REFUSE, EOS], None, 0.0).is_err());
}

fn setup(model_seed: u64) -> (World, ModelState, Buffer) {
    let w = world();
    let b = init_buffer(&w, 0).unwrap();
    (w, common::world_model(model_seed), b)
}

fn quick(max_iterations: usize) -> TrainConfig {
    TrainConfig { max_iterations, utility_batch: 8, mining_batch: 8, ..Default::default() }
}

#[test]
fn zero_iterations_returns_the_input() {
    let (w, m, mut b) = setup(1);
    let out = train(&m, &w, &mut b, &quick(0), None).unwrap();
    assert_eq!(out.model.params, m.params);
    assert!(out.records.is_empty());
    assert_eq!(out.status, TrainStatus::MaxIterations);
}

#[test]
fn refusing_model_with_zero_lambda_is_a_fixed_point() {
    let w = world();
    let mut b = init_buffer(&w, 0).unwrap();
    let m = common::scripted_model(common::world_config(0), REFUSE, EOS);
    let cfg = TrainConfig { lambda: 0.0, patience: 100, ..quick(5) };
    let out = train(&m, &w, &mut b, &cfg, None).unwrap();
    assert_eq!(out.model.params, m.params);
    assert_eq!(out.records.len(), 5);
    assert!(out.records.iter().all(|r| r.skipped && r.mask_size == 0 && r.buffer_refusal_rate == 1.0));
    assert!(out.last_mask.is_none());
}

#[test]
fn refusing_model_converges_after_patience() {
    let w = world();
    let mut b = init_buffer(&w, 0).unwrap();
    let m = common::scripted_model(common::world_config(0), REFUSE, EOS);
    let cfg = TrainConfig { lambda: 0.0, ..quick(50) };
    let out = train(&m, &w, &mut b, &cfg, None).unwrap();
    assert_eq!(out.status, TrainStatus::Converged { iteration: 2 });
    assert_eq!(out.records.len(), 3);
}

#[test]
fn skipped_iterations_ignore_the_rectification_terms() {
    let w = world();
    let m = common::scripted_model(common::world_config(0), REFUSE, EOS);
    let run = |beta: f64, source: MaskSource| {
        let mut b = init_buffer(&w, 0).unwrap();
        // A small utility weight keeps the scripted refusal intact.
        let cfg = TrainConfig { beta, mask_source: source, lambda: 1e-3, patience: 100, ..quick(3) };
        let out = train(&m, &w, &mut b, &cfg, None).unwrap();
        assert!(out.records.iter().all(|r| r.skipped));
        out.model
    };
    let a = run(4.0, MaskSource::Flow);
    assert_ne!(a.params, m.params, "utility term should still move the model");
    assert_eq!(a.params, run(0.0, MaskSource::Random).params);
}

#[test]
fn rectifying_iterations_use_a_mask_of_the_configured_size() {
    let (w, m, mut b) = setup(2);
    let cfg = TrainConfig { threshold: 0.0, ..quick(3) };
    let out = train(&m, &w, &mut b, &cfg, None).unwrap();
    // Window is the second layer only: 16 neurons, p = 0.05 gives 1.
    for r in &out.records {
        assert!(!r.skipped);
        assert_eq!(r.mask_size, 1);
        assert_eq!(r.parents, 8);
        assert!(r.loss.refusal > 0.0 && r.loss.anchor >= 0.0 && r.loss.utility > 0.0);
    }
    let mask = out.last_mask.unwrap();
    assert!(mask.set_neurons().iter().all(|&(l, _)| l == 1));
}

#[test]
fn training_is_deterministic() {
    let (w, m, _) = setup(3);
    let cfg = TrainConfig { threshold: 0.0, ..quick(4) };
    let run = || {
        let mut b = init_buffer(&w, 0).unwrap();
        let out = train(&m, &w, &mut b, &cfg, None).unwrap();
        (out.model.params.checksum(), out.records.iter().map(|r| r.deterministic_line()).collect::<Vec<_>>(), b)
    };
    assert_eq!(run(), run());
    assert_eq!(ITERATION_HEADER.split('\t').count(), run().1[0].split('\t').count() + 1);
}

#[test]
fn huge_step_diverges_and_returns_last_good_model() {
    let (w, m, mut b) = setup(4);
    let cfg = TrainConfig { eta: 1e300, threshold: 0.0, ..quick(5) };
    let out = train(&m, &w, &mut b, &cfg, None).unwrap();
    assert!(matches!(out.status, TrainStatus::Diverged { iteration: 0, .. }), "{:?}", out.status);
    assert_eq!(out.model.params, m.params);
    assert!(out.records.is_empty());
}

#[test]
fn work_budget_stops_training() {
    let (w, m, mut b) = setup(5);
    let cfg = TrainConfig { threshold: 0.0, work_budget: 1, ..quick(50) };
    let out = train(&m, &w, &mut b, &cfg, None).unwrap();
    assert_eq!(out.status, TrainStatus::BudgetSpent { iteration: 0 });
    assert!(out.work_units > 0);
}

#[test]
fn checkpoints_are_written_on_schedule() {
    let (w, m, mut b) = setup(6);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { threshold: 0.0, checkpoint_every: 2, ..quick(4) };
    let out = train(&m, &w, &mut b, &cfg, Some(dir.path())).unwrap();
    assert!(dir.path().join("iter_00002.ckpt").exists());
    let last = ModelState::load_checkpoint(dir.path().join("iter_00004.ckpt")).unwrap();
    assert_eq!(last.params, out.model.params);
    assert_eq!(last.step_counter, 4);
    assert!(!dir.path().join("iter_00001.ckpt").exists());
}

#[test]
fn invalid_config_is_rejected() {
    let (w, m, mut b) = setup(0);
    for cfg in [
        TrainConfig { eta: 0.0, ..quick(1) },
        TrainConfig { sparsity: 0.0, ..quick(1) },
        TrainConfig { patience: 0, ..quick(1) },
        TrainConfig { mining_batch: 0, ..quick(1) },
    ] {
        assert!(matches!(train(&m, &w, &mut b, &cfg, None), Err(JpuError::Config(_))));
    }
}

#[test]
fn baseline_spends_its_budget_and_is_deterministic() {
    let w = world();
    let m = common::world_model(7);
    let cfg = BaselineConfig { forget_batch: 4, retain_batch: 4, ..Default::default() };
    let before = work_units();
    let a = train_baseline(&m, &w, &cfg, 2_000).unwrap();
    assert!(work_units() - before >= 2_000);
    assert!(a.work_units >= 2_000 && a.steps > 0 && !a.diverged);
    let b = train_baseline(&m, &w, &cfg, 2_000).unwrap();
    assert_eq!(a.model.params, b.model.params);
    assert_eq!(a.losses, b.losses);
    assert_eq!(train_baseline(&m, &w, &cfg, 0).unwrap().steps, 0);
}
