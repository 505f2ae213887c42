mod common;

use astro_float::{BigFloat, Consts, RoundingMode};
use common::*;
use jpu_core::lm::{init_model, Intervention, ModelConfig, ModelState};
use jpu_core::pathfinder::{LayerWindow, SparseMask};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tokens(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..vocab)).collect()
}

#[test]
fn init_is_deterministic_and_validated() {
    let cfg = ModelConfig { vocab_size: 32, embed_dim: 32, num_layers: 4, ffn_hidden_dim: 64, ..Default::default() };
    let a = init_model(cfg.clone()).unwrap();
    let b = init_model(cfg.clone()).unwrap();
    assert_eq!(a.params.checksum(), b.params.checksum());
    assert_eq!(a.params.layers.len(), 4);
    let attr = a.attribute(&[1, 2, 3], 5).unwrap();
    assert_eq!(attr.layers.len(), 4);
    let other = init_model(ModelConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.params.checksum(), other.params.checksum());
    assert!(init_model(ModelConfig { embed_dim: 8, num_heads: 3, ffn_hidden_dim: 8, ..Default::default() }).is_err());
}

#[test]
fn forward_shapes_and_input_errors() {
    let m = small_model(0);
    assert_eq!(m.forward(&[3]).unwrap().len(), 16);
    assert_eq!(m.forward(&[3, 4, 5]).unwrap().len(), 48);
    assert!(m.forward(&[16]).is_err());
    assert!(m.forward(&[]).is_err());
    assert!(m.forward(&[0; 11]).is_err());
}

#[test]
fn forward_is_causal() {
    let m = small_model(7);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let n = rng.gen_range(2..=10);
        let toks = random_tokens(&mut rng, n, 16);
        let full = m.forward(&toks).unwrap();
        for cut in 1..n {
            let prefix = m.forward(&toks[..cut]).unwrap();
            assert_eq!(&full[..cut * 16], &prefix[..], "prefix {cut} of {toks:?}");
        }
        // change a future token
        let mut alt = toks.clone();
        alt[n - 1] = (alt[n - 1] + 1) % 16;
        let other = m.forward(&alt).unwrap();
        assert_eq!(&full[..(n - 1) * 16], &other[..(n - 1) * 16]);
    }
}

#[test]
fn perturbing_future_position_embedding_leaves_past_logits() {
    let m = small_model(2);
    let toks = [1, 5, 9, 2, 7];
    let before = m.forward(&toks).unwrap();
    let mut pert = m.clone();
    let d = pert.config.embed_dim;
    for w in &mut pert.params.pos_embed[3 * d..4 * d] {
        *w += 0.37;
    }
    let after = pert.forward(&toks).unwrap();
    assert_eq!(&before[..3 * 16], &after[..3 * 16]);
    assert_ne!(&before[3 * 16..], &after[3 * 16..]);
}

#[test]
fn uniform_model_loss_is_log_vocab() {
    let cfg = ModelConfig { vocab_size: 32, embed_dim: 8, ffn_hidden_dim: 8, num_layers: 1, max_seq_len: 8, ..Default::default() };
    let m = uniform_model(cfg);
    let loss = m.nll_loss(&[1, 2, 3], &[4, 5]).unwrap();
    assert!((loss - 32f64.ln()).abs() < 1e-12);
    assert!((loss - 3.466).abs() < 1e-3);
}

#[test]
fn certain_target_has_zero_loss() {
    let m = scripted_model(small_config(0), 4, 9);
    let loss = m.nll_loss(&[1, 2], &[4, 9]).unwrap();
    assert!((0.0..1e-15).contains(&loss), "{loss}");
}

#[test]
fn nll_rejects_bad_lengths() {
    let m = small_model(0);
    assert!(m.nll_loss(&[1, 2], &[]).is_err());
    assert!(m.nll_loss(&[1; 8], &[1, 2, 3]).is_err());
    assert!(m.nll_loss(&[1; 8], &[1, 2]).is_ok());
}

/// Mean target NLL recomputed from the model's logits with 256-bit
/// arithmetic.
fn bigfloat_nll(m: &ModelState, prompt: &[usize], target: &[usize]) -> f64 {
    let p = 256;
    let rm = RoundingMode::ToEven;
    let mut cc = Consts::new().unwrap();
    let mut seq = prompt.to_vec();
    seq.extend_from_slice(&target[..target.len() - 1]);
    let logits = m.forward(&seq).unwrap();
    let v = m.config.vocab_size;
    let mut total = BigFloat::from_f64(0.0, p);
    for (j, &tok) in target.iter().enumerate() {
        let row = &logits[(prompt.len() - 1 + j) * v..(prompt.len() + j) * v];
        let mut z = BigFloat::from_f64(0.0, p);
        for &l in row {
            z = z.add(&BigFloat::from_f64(l, p).exp(p, rm, &mut cc), p, rm);
        }
        let lse = z.ln(p, rm, &mut cc);
        total = total.add(&lse.sub(&BigFloat::from_f64(row[tok], p), p, rm), p, rm);
    }
    let mean = total.div(&BigFloat::from_f64(target.len() as f64, p), p, rm);
    mean.to_string().parse::<f64>().unwrap()
}

#[test]
fn nll_matches_arbitrary_precision_recomputation() {
    let m = small_model(11);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let prompt = random_tokens(&mut rng, 4, 16);
        let target = random_tokens(&mut rng, 3, 16);
        let fast = m.nll_loss(&prompt, &target).unwrap();
        let exact = bigfloat_nll(&m, &prompt, &target);
        assert!((fast - exact).abs() <= 1e-12 * exact.abs().max(1.0), "{fast} vs {exact}");
    }
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let m = small_model(3);
    let prompt = vec![1, 4, 7, 2, 11];
    let target = vec![3, 8, 1];
    let (_, grads) = m.nll_loss_grad(&prompt, &target, 1.0).unwrap();
    let loss = |s: &ModelState| s.nll_loss(&prompt, &target).unwrap();
    let gviews = grads.tensors();
    let mut checks = 0;
    for (ti, gv) in gviews.iter().enumerate() {
        for _ in 0..6 {
            let idx = rng.gen_range(0..gv.data.len());
            let numeric = fd_param(&m, ti, idx, &loss);
            assert!(grads_agree(gv.data[idx], numeric), "{}[{idx}]: {} vs {numeric}", gv.name, gv.data[idx]);
            checks += 1;
        }
    }
    assert!(checks >= 100);
}

#[test]
fn activation_gradients_match_finite_differences() {
    let m = small_model(4);
    let toks = vec![2, 9, 5, 14, 3, 6];
    let sink = 7;
    let attr = m.attribute(&toks, sink).unwrap();
    let sink_logit = |iv: Intervention| {
        let t = m.run(&toks, &iv).unwrap();
        t.logits_at(toks.len() - 1)[sink]
    };
    for trace in &attr.layers {
        let f = trace.width();
        for pos in [0, 3, toks.len() - 1] {
            for neuron in [0, 5, f - 1] {
                let nudge = |delta| Intervention { scale_last: None, nudge: Some((trace.layer_index, pos, neuron, delta)) };
                let numeric = (sink_logit(nudge(FD_STEP)) - sink_logit(nudge(-FD_STEP))) / (2.0 * FD_STEP);
                let analytic = trace.activation_grads[pos * f + neuron];
                assert!(grads_agree(analytic, numeric), "layer {} pos {pos} neuron {neuron}: {analytic} vs {numeric}", trace.layer_index);
            }
        }
    }
}

#[test]
fn zero_down_projection_zeroes_activation_grads() {
    let mut m = small_model(5);
    m.params.layers[1].w_down.iter_mut().for_each(|w| *w = 0.0);
    let attr = m.attribute(&[1, 2, 3], 4).unwrap();
    assert!(attr.layers[1].activation_grads.iter().all(|&g| g == 0.0));
    assert!(attr.layers[1].weight_norms.iter().all(|&w| w == 0.0));
}

#[test]
fn attribution_is_deterministic_and_shaped() {
    let m = small_model(6);
    let a = m.attribute(&[3, 1, 4, 1, 5], 9).unwrap();
    let b = m.attribute(&[3, 1, 4, 1, 5], 9).unwrap();
    assert_eq!(a, b);
    for t in &a.layers {
        assert_eq!(t.activations.len(), t.activation_grads.len());
        assert_eq!(t.weight_norms.len(), 16);
        assert_eq!(t.positions(), 5);
    }
    assert_eq!(a.hidden.vector.len(), 8);
    assert!(m.attribute(&[1], 16).is_err());
}

#[test]
fn masked_update_examples() {
    let m = small_model(8);
    let (_, rect) = m.nll_loss_grad(&[1, 2, 3], &[4, 5], 1.0).unwrap();
    let (_, util) = m.nll_loss_grad(&[6, 7], &[8], 1.0).unwrap();
    let all = LayerWindow::all(2);

    let none = SparseMask::empty(2, 16, all);
    let same = m.masked_update(&rect, &util, &none, 0.05, 0.0).unwrap();
    assert_eq!(same.params, m.params);
    assert_eq!(same.step_counter, m.step_counter + 1);

    let full = SparseMask::full(2, 16, all);
    let stepped = m.masked_update(&rect, &util, &full, 0.05, 0.0).unwrap();
    for ((a, b), g) in stepped.params.tensors().iter().zip(m.params.tensors()).zip(rect.tensors()) {
        let ffn = a.name.contains("w_gate") || a.name.contains("w_up") || a.name.contains("w_down");
        for i in 0..a.data.len() {
            let expect = if ffn { (b.data[i] - 0.05 * g.data[i]) as f32 as f64 } else { b.data[i] };
            assert_eq!(a.data[i], expect, "{}[{i}]", a.name);
        }
    }

    let mut wrong = SparseMask::empty(2, 15, all);
    wrong.bits[0].push(false);
    wrong.bits[1].truncate(3);
    assert!(m.masked_update(&rect, &util, &wrong, 0.05, 0.0).is_err());
}

#[test]
fn single_neuron_mask_touches_only_its_rows() {
    let m = small_model(10);
    let (_, rect) = m.nll_loss_grad(&[1, 2, 3, 9], &[4, 5], 1.0).unwrap();
    let util = rect.clone();
    let mut mask = SparseMask::empty(2, 16, LayerWindow::all(2));
    mask.bits[1][6] = true;
    let next = m.masked_update(&rect, &util, &mask, 0.5, 0.0).unwrap();
    let d = 8;
    for ((a, b), g) in next.params.tensors().iter().zip(m.params.tensors()).zip(rect.tensors()) {
        for i in 0..a.data.len() {
            let owned =
                a.layer == Some(1) && (a.name.ends_with("w_gate") || a.name.ends_with("w_up") || a.name.ends_with("w_down")) && i / d == 6;
            if owned {
                assert_eq!(a.data[i], (b.data[i] - 0.5 * g.data[i]) as f32 as f64);
                if g.data[i].abs() > 1e-6 {
                    assert_ne!(a.data[i], b.data[i], "{}[{i}] should move", a.name);
                }
            } else {
                assert_eq!(a.data[i], b.data[i], "{}[{i}] must not move", a.name);
            }
        }
    }
}

#[test]
fn greedy_decode_examples() {
    let m = small_model(12);
    assert!(m.greedy_decode(&[1, 2], 0).unwrap().is_empty());
    let a = m.greedy_decode(&[1, 2], 5).unwrap();
    assert_eq!(a, m.greedy_decode(&[1, 2], 5).unwrap());
    assert_eq!(a.len(), 5);
    // context is 10: at most 10 - 2 + 1 new tokens
    assert_eq!(m.greedy_decode(&[1, 2], 50).unwrap().len(), 9);
    let scripted = scripted_model(small_config(0), 13, 14);
    assert_eq!(scripted.greedy_decode(&[1, 2, 3], 2).unwrap(), vec![13, 14]);
}

#[test]
fn greedy_ties_go_to_lowest_id() {
    let m = uniform_model(small_config(1));
    assert_eq!(m.greedy_decode(&[5], 1).unwrap(), vec![0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn checkpoint_round_trip_is_bit_exact(seed in 0u64..1000, steps in 0usize..3) {
        let mut m = small_model(seed);
        for _ in 0..steps {
            let (_, g) = m.nll_loss_grad(&[1, 2, 3], &[4], 1.0).unwrap();
            m = m.sgd_step(&g, 0.1).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save_checkpoint(&path).unwrap();
        let back = ModelState::load_checkpoint(&path).unwrap();
        prop_assert_eq!(back.params.checksum(), m.params.checksum());
        prop_assert_eq!(back, m);
    }
}
