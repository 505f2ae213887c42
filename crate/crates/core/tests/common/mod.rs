#![allow(dead_code)]

use jpu_core::lm::{ModelConfig, ModelState};

/// A model under 10k parameters for exhaustive numeric checks.
pub fn small_config(seed: u64) -> ModelConfig {
    ModelConfig { vocab_size: 16, embed_dim: 8, num_layers: 2, ffn_hidden_dim: 16, num_heads: 2, max_seq_len: 10, seed }
}

pub fn small_model(seed: u64) -> ModelState {
    let m = ModelState::new(small_config(seed)).unwrap();
    assert!(m.config.num_parameters() <= 10_000);
    m
}

pub const FD_STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-7;

/// Relative agreement with an absolute floor near zero.
pub fn grads_agree(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= ABS_TOL || diff <= REL_TOL * analytic.abs().max(numeric.abs())
}

/// Central difference of `loss` w.r.t. parameter `(tensor, index)`.
pub fn fd_param(model: &ModelState, tensor: usize, index: usize, loss: &dyn Fn(&ModelState) -> f64) -> f64 {
    let mut plus = model.clone();
    plus.params.tensors_mut()[tensor].data[index] += FD_STEP;
    let mut minus = model.clone();
    minus.params.tensors_mut()[tensor].data[index] -= FD_STEP;
    (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP)
}

/// Uniform-logit model: the head is zero.
pub fn uniform_model(cfg: ModelConfig) -> ModelState {
    let mut m = ModelState::new(cfg).unwrap();
    m.params.head.iter_mut().for_each(|w| *w = 0.0);
    m
}

/// A model whose greedy continuation is `first` after any prompt token and
/// `second` after `first`, with near-certain probability.
pub fn scripted_model(cfg: ModelConfig, first: usize, second: usize) -> ModelState {
    let mut m = ModelState::new(cfg).unwrap();
    let d = m.config.embed_dim;
    let p = &mut m.params;
    p.pos_embed.iter_mut().for_each(|w| *w = 0.0);
    for layer in &mut p.layers {
        layer.wo.iter_mut().for_each(|w| *w = 0.0);
        layer.w_down.iter_mut().for_each(|w| *w = 0.0);
    }
    for (t, row) in p.tok_embed.chunks_mut(d).enumerate() {
        row.iter_mut().for_each(|w| *w = 0.0);
        row[if t == first { 1 } else { 0 }] = 1.0;
    }
    p.final_norm.iter_mut().for_each(|g| *g = 1.0);
    p.head.iter_mut().for_each(|w| *w = 0.0);
    p.head[first * d] = 20.0;
    p.head[second * d + 1] = 20.0;
    m
}

/// A model over the full synthetic vocabulary that is still cheap to train.
pub fn world_config(seed: u64) -> ModelConfig {
    ModelConfig { vocab_size: 64, embed_dim: 8, num_layers: 2, ffn_hidden_dim: 16, num_heads: 2, max_seq_len: 64, seed }
}

pub fn world_model(seed: u64) -> ModelState {
    ModelState::new(world_config(seed)).unwrap()
}
