mod common;

use jpu_core::lm::{Intervention, ModelState, Params};
use jpu_core::pathfinder::{
    build_mask, differential_flow, flow_scores, flow_scores_per_sink, integrated_flow_oracle, layerwise_iou, mask_size, mean_iou,
    random_mask, snip_from_grads, snip_score, utility_flow, FlowRecord, FlowSource, LayerStrategy, LayerWindow, SparseMask,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SINK: usize = 3;

fn prompts(seed: u64, count: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| (0..rng.gen_range(1..=8)).map(|_| rng.gen_range(0..16)).collect()).collect()
}

fn all_layers(m: &ModelState) -> LayerWindow {
    LayerWindow::all(m.config.num_layers)
}

fn record(scores: Vec<Vec<f64>>) -> FlowRecord {
    let n = scores.len();
    FlowRecord { scores, source: FlowSource::Differential, window: LayerWindow { start: 0, end: n - 1 }, num_layers: n }
}

#[test]
fn zero_activation_layer_has_zero_flow() {
    let mut m = common::small_model(1);
    m.params.layers[0].w_up.iter_mut().for_each(|w| *w = 0.0);
    let f = flow_scores(&m, &prompts(0, 4), SINK, all_layers(&m), FlowSource::Jailbreak).unwrap();
    assert!(f.layer(0).iter().all(|&s| s == 0.0));
    assert!(f.layer(1).iter().any(|&s| s > 0.0));
}

#[test]
fn zero_outgoing_weights_have_zero_flow() {
    let mut m = common::small_model(2);
    let d = m.config.embed_dim;
    m.params.layers[1].w_down[5 * d..6 * d].iter_mut().for_each(|w| *w = 0.0);
    let f = flow_scores(&m, &prompts(1, 3), SINK, all_layers(&m), FlowSource::Jailbreak).unwrap();
    assert_eq!(f.layer(1)[5], 0.0);
    assert!(f.layer(1).iter().enumerate().any(|(i, &s)| i != 5 && s > 0.0));
}

#[test]
fn flow_matches_hand_computation_with_numeric_gradient() {
    let m = common::small_model(3);
    let prompt = vec![4, 9, 1, 15];
    let n = prompt.len();
    let f = flow_scores(&m, std::slice::from_ref(&prompt), SINK, all_layers(&m), FlowSource::Jailbreak).unwrap();
    let dm = m.config.embed_dim;
    let width = m.config.ffn_hidden_dim;
    let trace = m.run(&prompt, &Intervention::default()).unwrap();
    let logit = |iv: Intervention| m.run(&prompt, &iv).unwrap().logits_at(n - 1)[SINK];
    for l in 0..m.config.num_layers {
        let acts = &trace.activations(l)[(n - 1) * width..];
        for i in 0..width {
            let w: f64 = m.params.layers[l].w_down[i * dm..(i + 1) * dm].iter().map(|x| x.abs()).sum();
            let h = 1e-5;
            let up = logit(Intervention { scale_last: None, nudge: Some((l, n - 1, i, h)) });
            let down = logit(Intervention { scale_last: None, nudge: Some((l, n - 1, i, -h)) });
            let grad = (up - down) / (2.0 * h);
            let expect = w * (acts[i] * grad).abs();
            assert!(common::grads_agree(f.layer(l)[i], expect), "layer {l} neuron {i}: {} vs {expect}", f.layer(l)[i]);
        }
    }
}

#[test]
fn flow_averages_over_prompts() {
    let m = common::small_model(4);
    let ps = prompts(2, 3);
    let w = all_layers(&m);
    let joint = flow_scores(&m, &ps, SINK, w, FlowSource::Jailbreak).unwrap();
    let parts: Vec<_> = ps.iter().map(|p| flow_scores(&m, std::slice::from_ref(p), SINK, w, FlowSource::Jailbreak).unwrap()).collect();
    for l in 0..2 {
        for i in 0..16 {
            let mean = parts.iter().map(|r| r.layer(l)[i]).sum::<f64>() / 3.0;
            assert!((joint.layer(l)[i] - mean).abs() <= 1e-12 * mean.abs().max(1.0));
        }
    }
}

#[test]
fn one_step_oracle_is_bitwise_first_order() {
    let m = common::small_model(5);
    for p in prompts(3, 20) {
        let f = flow_scores(&m, std::slice::from_ref(&p), SINK, all_layers(&m), FlowSource::Jailbreak).unwrap();
        let o = integrated_flow_oracle(&m, &p, SINK, all_layers(&m), 1).unwrap();
        assert_eq!(f.scores, o.scores);
    }
}

#[test]
fn oracle_converges_per_neuron() {
    let m = common::small_model(6);
    let p = vec![1, 2, 3, 4, 5];
    let a = integrated_flow_oracle(&m, &p, SINK, all_layers(&m), 64).unwrap();
    let b = integrated_flow_oracle(&m, &p, SINK, all_layers(&m), 128).unwrap();
    for (x, y) in a.scores.iter().flatten().zip(b.scores.iter().flatten()) {
        assert!((x - y).abs() <= 1e-7 || (x - y).abs() < 1e-2 * y.abs(), "{x} vs {y}");
    }
    assert!(integrated_flow_oracle(&m, &p, SINK, all_layers(&m), 0).is_err());
}

#[test]
fn oracle_agrees_with_a_dense_rule() {
    // The integrand is smooth in the scale, so a modest rule already
    // matches a much denser one.
    let m = common::small_model(13);
    let p = vec![7, 3];
    let dense = integrated_flow_oracle(&m, &p, SINK, all_layers(&m), 256).unwrap();
    let mid = integrated_flow_oracle(&m, &p, SINK, all_layers(&m), 32).unwrap();
    for (x, y) in mid.scores.iter().flatten().zip(dense.scores.iter().flatten()) {
        assert!((x - y).abs() <= 1e-9 * y.abs().max(1e-6));
    }
}

#[test]
fn utility_flow_uses_each_pair_first_response_token() {
    let m = common::small_model(7);
    let pairs = vec![(vec![1, 2], vec![5, 1]), (vec![3, 4, 6], vec![9])];
    let u = utility_flow(&m, &pairs, all_layers(&m)).unwrap();
    let items: Vec<(&[usize], usize)> = vec![(&pairs[0].0, 5), (&pairs[1].0, 9)];
    let expect = flow_scores_per_sink(&m, &items, all_layers(&m), FlowSource::Utility).unwrap();
    assert_eq!(u, expect);
    assert!(utility_flow(&m, &[(vec![1], vec![])], all_layers(&m)).is_err());
}

#[test]
fn flow_input_errors() {
    let m = common::small_model(0);
    assert!(flow_scores(&m, &[], SINK, all_layers(&m), FlowSource::Jailbreak).is_err());
    let beyond = LayerWindow { start: 1, end: 2 };
    assert!(flow_scores(&m, &[vec![1]], SINK, beyond, FlowSource::Jailbreak).is_err());
    assert!(flow_scores(&m, &[vec![99]], SINK, all_layers(&m), FlowSource::Jailbreak).is_err());
}

#[test]
fn window_restricts_flow_to_its_layers() {
    let m = common::small_model(8);
    let ps = prompts(4, 3);
    let full = flow_scores(&m, &ps, SINK, all_layers(&m), FlowSource::Jailbreak).unwrap();
    let last = flow_scores(&m, &ps, SINK, LayerWindow { start: 1, end: 1 }, FlowSource::Jailbreak).unwrap();
    assert_eq!(last.scores.len(), 1);
    assert_eq!(last.layer(1), full.layer(1));
}

#[test]
fn neuron_permutation_permutes_flow() {
    let m = common::small_model(9);
    let d = m.config.embed_dim;
    let f = m.config.ffn_hidden_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut perm: Vec<usize> = (0..f).collect();
    for i in (1..f).rev() {
        perm.swap(i, rng.gen_range(0..=i));
    }
    let mut pm = m.clone();
    for l in 0..m.config.num_layers {
        let (src, dst) = (&m.params.layers[l], &mut pm.params.layers[l]);
        for (new, &old) in perm.iter().enumerate() {
            for (a, b) in [(&src.w_gate, &mut dst.w_gate), (&src.w_up, &mut dst.w_up), (&src.w_down, &mut dst.w_down)] {
                b[new * d..(new + 1) * d].copy_from_slice(&a[old * d..(old + 1) * d]);
            }
        }
    }
    let ps = prompts(5, 4);
    let a = flow_scores(&m, &ps, SINK, all_layers(&m), FlowSource::Jailbreak).unwrap();
    let b = flow_scores(&pm, &ps, SINK, all_layers(&m), FlowSource::Jailbreak).unwrap();
    for l in 0..m.config.num_layers {
        for (new, &old) in perm.iter().enumerate() {
            let (x, y) = (b.layer(l)[new], a.layer(l)[old]);
            assert!((x - y).abs() <= 1e-12 * y.abs().max(1e-12), "{x} vs {y}");
        }
    }
}

#[test]
fn flow_is_homogeneous_in_the_output_head() {
    let m = common::small_model(10);
    let mut scaled = m.clone();
    scaled.params.head.iter_mut().for_each(|w| *w *= 3.0);
    let ps = prompts(6, 4);
    let a = flow_scores(&m, &ps, SINK, all_layers(&m), FlowSource::Jailbreak).unwrap();
    let b = flow_scores(&scaled, &ps, SINK, all_layers(&m), FlowSource::Jailbreak).unwrap();
    for (x, y) in a.scores.iter().flatten().zip(b.scores.iter().flatten()) {
        assert!((3.0 * x - y).abs() <= 1e-12 * y.abs().max(1e-12));
    }
}

#[test]
fn differential_flow_normalizes_per_layer() {
    let jb = record(vec![vec![2.0, 2.0], vec![0.0, 10.0]]);
    let util = record(vec![vec![1.0, 3.0], vec![5.0, 5.0]]);
    let d = differential_flow(&jb, &util).unwrap();
    assert_eq!(d.scores, vec![vec![0.25, -0.25], vec![-0.5, 0.5]]);
    for layer in &d.scores {
        assert!(layer.iter().sum::<f64>().abs() < 1e-15);
    }
}

#[test]
fn mask_size_examples() {
    assert_eq!(mask_size(0.05, 200).unwrap(), 10);
    assert_eq!(mask_size(0.01, 250).unwrap(), 3);
    assert_eq!(mask_size(1.0, 7).unwrap(), 7);
    assert!(mask_size(0.0, 10).is_err());
    assert!(mask_size(1.5, 10).is_err());
    assert!(mask_size(0.01, 10).is_err());
}

#[test]
fn build_mask_takes_the_global_top() {
    let diff = record(vec![vec![0.1, 0.9, -0.3, 0.4], vec![0.8, 0.0, 0.5, -1.0]]);
    let m = build_mask(&diff, 0.375).unwrap();
    assert_eq!(m.set_neurons(), vec![(0, 1), (1, 0), (1, 2)]);
    let tied = record(vec![vec![1.0, 1.0], vec![1.0, 1.0]]);
    assert_eq!(build_mask(&tied, 0.5).unwrap().set_neurons(), vec![(0, 0), (0, 1)]);
}

proptest! {
    #[test]
    fn mask_is_an_exact_top_k(seed in 0u64..10_000, p in 0.05f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores: Vec<Vec<f64>> = (0..3).map(|_| (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let diff = record(scores.clone());
        let m = build_mask(&diff, p).unwrap();
        let k = mask_size(p, 60).unwrap();
        prop_assert_eq!(m.count(), k);
        let min_in = m.set_neurons().iter().map(|&(l, i)| scores[l][i]).fold(f64::INFINITY, f64::min);
        for l in 0..3 {
            for i in 0..20 {
                if !m.bits[l][i] {
                    prop_assert!(scores[l][i] <= min_in);
                }
            }
        }
    }

    #[test]
    fn random_mask_has_the_requested_cardinality(seed in 0u64..10_000, count in 1usize..=40) {
        let window = LayerWindow { start: 2, end: 3 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_mask(4, 20, window, count, &mut rng).unwrap();
        prop_assert_eq!(m.count(), count);
        prop_assert!(m.set_neurons().iter().all(|&(l, _)| window.contains(l)));
    }
}

#[test]
fn iou_examples() {
    let w = LayerWindow { start: 0, end: 1 };
    let mut a = SparseMask::empty(2, 4, w);
    let mut b = SparseMask::empty(2, 4, w);
    a.bits[0] = vec![true, true, false, false];
    b.bits[0] = vec![false, true, true, false];
    a.bits[1] = vec![true, false, false, false];
    b.bits[1] = vec![true, false, false, false];
    let curve = layerwise_iou(&a, &b).unwrap();
    assert_eq!(curve, vec![1.0 / 3.0, 1.0]);
    assert!((mean_iou(&curve, w) - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(layerwise_iou(&SparseMask::empty(2, 4, w), &SparseMask::empty(2, 4, w)).unwrap(), vec![1.0, 1.0]);
    assert!(layerwise_iou(&a, &SparseMask::empty(3, 4, w)).is_err());
}

#[test]
fn snip_is_weight_times_gradient() {
    let m = common::small_model(11);
    let d = m.config.embed_dim;
    let mut grads = Params::zeros(&m.config);
    grads.layers[1].w_down[2 * d] = 4.0;
    let s = snip_from_grads(&m, &grads, all_layers(&m));
    assert_eq!(s.source, FlowSource::Snip);
    assert_eq!(s.layer(1)[2], (m.params.layers[1].w_down[2 * d] * 4.0).abs() / d as f64);
    assert!(s.layer(0).iter().all(|&x| x == 0.0));
}

#[test]
fn snip_scales_linearly_with_the_gradient() {
    let m = common::small_model(12);
    let pairs = vec![(vec![1, 2, 3], vec![4, 5]), (vec![6], vec![7])];
    let base = snip_score(&m, &pairs, all_layers(&m)).unwrap();
    let mut grads = Params::zeros(&m.config);
    for (p, y) in &pairs {
        m.nll_accumulate(p, y, 0.5, &mut grads).unwrap();
    }
    grads.scale(2.5);
    let scaled = snip_from_grads(&m, &grads, all_layers(&m));
    for (x, y) in base.scores.iter().flatten().zip(scaled.scores.iter().flatten()) {
        assert!((2.5 * x - y).abs() <= 1e-12 * y.abs().max(1e-12));
    }
    assert!(snip_score(&m, &[], all_layers(&m)).is_err());
}

#[test]
fn layer_windows() {
    let w = |s: LayerStrategy, l| {
        let w = s.window(l);
        (w.start, w.end)
    };
    assert_eq!(w(LayerStrategy::Default, 6), (3, 5));
    assert_eq!(w(LayerStrategy::Shallow, 6), (0, 1));
    assert_eq!(w(LayerStrategy::Middle, 6), (2, 3));
    assert_eq!(w(LayerStrategy::Last, 6), (5, 5));
    assert_eq!(w(LayerStrategy::Default, 32), (16, 31));
    assert_eq!(w(LayerStrategy::Shallow, 32), (0, 10));
    assert_eq!(w(LayerStrategy::Middle, 32), (11, 21));
    assert_eq!(w(LayerStrategy::Last, 32), (28, 31));
    for s in LayerStrategy::ALL {
        assert_eq!(LayerStrategy::parse(s.name()).unwrap(), s);
        for l in 1..40 {
            let win = s.window(l);
            assert!(win.start <= win.end && win.end < l, "{s:?} at {l}");
        }
    }
    assert!(LayerStrategy::parse("deep").is_err());
}
