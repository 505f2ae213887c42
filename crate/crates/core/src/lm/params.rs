use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;

/// Weights of one decoder block.
///
/// Matrices are row-major with one row per output unit, so `w_gate[i]`,
/// `w_up[i]` are the incoming rows of FFN neuron `i` and `w_down[i]` is its
/// outgoing row into the residual stream.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attn_norm: Vec<f64>,
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
    pub ffn_norm: Vec<f64>,
    pub w_gate: Vec<f64>,
    pub w_up: Vec<f64>,
    pub w_down: Vec<f64>,
}

/// All trainable arrays of the model. Also used as the container for
/// named gradients, which share names and shapes with the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub tok_embed: Vec<f64>,
    pub pos_embed: Vec<f64>,
    pub layers: Vec<LayerParams>,
    pub final_norm: Vec<f64>,
    pub head: Vec<f64>,
}

pub type Gradients = Params;

/// Which part of the network a named array belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Embedding,
    Attention,
    Norm,
    /// FFN matrix whose rows are owned by neurons: gate, up or down.
    Ffn(FfnMatrix),
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FfnMatrix {
    Gate,
    Up,
    Down,
}

#[derive(Debug)]
pub struct TensorView<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
    pub layer: Option<usize>,
    pub data: &'a [f64],
}

#[derive(Debug)]
pub struct TensorViewMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
    pub layer: Option<usize>,
    pub data: &'a mut Vec<f64>,
}

impl LayerParams {
    fn zeros(d: usize, f: usize) -> Self {
        Self {
            attn_norm: vec![0.0; d],
            wq: vec![0.0; d * d],
            wk: vec![0.0; d * d],
            wv: vec![0.0; d * d],
            wo: vec![0.0; d * d],
            ffn_norm: vec![0.0; d],
            w_gate: vec![0.0; f * d],
            w_up: vec![0.0; f * d],
            w_down: vec![0.0; f * d],
        }
    }
}

impl Params {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.embed_dim;
        Self {
            tok_embed: vec![0.0; cfg.vocab_size * d],
            pos_embed: vec![0.0; cfg.max_seq_len * d],
            layers: (0..cfg.num_layers).map(|_| LayerParams::zeros(d, cfg.ffn_hidden_dim)).collect(),
            final_norm: vec![0.0; d],
            head: vec![0.0; cfg.vocab_size * d],
        }
    }

    /// Seeded initialization. Values are rounded to `f32` so that a
    /// checkpoint round trip is exact.
    pub fn init(cfg: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.embed_dim;
        let f = cfg.ffn_hidden_dim;
        let mut p = Self::zeros(cfg);
        let fill = |v: &mut Vec<f64>, std: f64, rng: &mut ChaCha8Rng| {
            let normal = Normal::new(0.0, std).expect("positive std");
            for x in v.iter_mut() {
                *x = normal.sample(rng) as f32 as f64;
            }
        };
        let inv_d = 1.0 / (d as f64).sqrt();
        let inv_f = 1.0 / (f as f64).sqrt();
        let residual_scale = 1.0 / (2.0 * cfg.num_layers as f64).sqrt();
        fill(&mut p.tok_embed, 1.0, &mut rng);
        fill(&mut p.pos_embed, 0.5, &mut rng);
        for layer in &mut p.layers {
            layer.attn_norm.iter_mut().for_each(|g| *g = 1.0);
            layer.ffn_norm.iter_mut().for_each(|g| *g = 1.0);
            fill(&mut layer.wq, inv_d, &mut rng);
            fill(&mut layer.wk, inv_d, &mut rng);
            fill(&mut layer.wv, inv_d, &mut rng);
            fill(&mut layer.wo, inv_d * residual_scale, &mut rng);
            fill(&mut layer.w_gate, inv_d, &mut rng);
            fill(&mut layer.w_up, inv_d, &mut rng);
            fill(&mut layer.w_down, inv_f * residual_scale, &mut rng);
        }
        p.final_norm.iter_mut().for_each(|g| *g = 1.0);
        fill(&mut p.head, inv_d, &mut rng);
        p
    }

    pub fn tensors(&self) -> Vec<TensorView<'_>> {
        let d = self.final_norm.len();
        let v = self.head.len() / d;
        let t = self.pos_embed.len() / d;
        let mut out = vec![
            view("tok_embed", vec![v, d], ParamRole::Embedding, None, &self.tok_embed),
            view("pos_embed", vec![t, d], ParamRole::Embedding, None, &self.pos_embed),
        ];
        for (l, lp) in self.layers.iter().enumerate() {
            let f = lp.w_gate.len() / d;
            let n = |s: &str| format!("layers.{l}.{s}");
            out.push(view(&n("attn_norm"), vec![d], ParamRole::Norm, Some(l), &lp.attn_norm));
            out.push(view(&n("wq"), vec![d, d], ParamRole::Attention, Some(l), &lp.wq));
            out.push(view(&n("wk"), vec![d, d], ParamRole::Attention, Some(l), &lp.wk));
            out.push(view(&n("wv"), vec![d, d], ParamRole::Attention, Some(l), &lp.wv));
            out.push(view(&n("wo"), vec![d, d], ParamRole::Attention, Some(l), &lp.wo));
            out.push(view(&n("ffn_norm"), vec![d], ParamRole::Norm, Some(l), &lp.ffn_norm));
            out.push(view(&n("w_gate"), vec![f, d], ParamRole::Ffn(FfnMatrix::Gate), Some(l), &lp.w_gate));
            out.push(view(&n("w_up"), vec![f, d], ParamRole::Ffn(FfnMatrix::Up), Some(l), &lp.w_up));
            out.push(view(&n("w_down"), vec![f, d], ParamRole::Ffn(FfnMatrix::Down), Some(l), &lp.w_down));
        }
        out.push(view("final_norm", vec![d], ParamRole::Norm, None, &self.final_norm));
        out.push(view("head", vec![v, d], ParamRole::Head, None, &self.head));
        out
    }

    /// Same order and naming as [`Params::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_>> {
        let d = self.final_norm.len();
        let v = self.head.len() / d;
        let t = self.pos_embed.len() / d;
        let mut out = vec![
            view_mut("tok_embed", vec![v, d], ParamRole::Embedding, None, &mut self.tok_embed),
            view_mut("pos_embed", vec![t, d], ParamRole::Embedding, None, &mut self.pos_embed),
        ];
        for (l, lp) in self.layers.iter_mut().enumerate() {
            let f = lp.w_gate.len() / d;
            let n = |s: &str| format!("layers.{l}.{s}");
            out.push(view_mut(&n("attn_norm"), vec![d], ParamRole::Norm, Some(l), &mut lp.attn_norm));
            out.push(view_mut(&n("wq"), vec![d, d], ParamRole::Attention, Some(l), &mut lp.wq));
            out.push(view_mut(&n("wk"), vec![d, d], ParamRole::Attention, Some(l), &mut lp.wk));
            out.push(view_mut(&n("wv"), vec![d, d], ParamRole::Attention, Some(l), &mut lp.wv));
            out.push(view_mut(&n("wo"), vec![d, d], ParamRole::Attention, Some(l), &mut lp.wo));
            out.push(view_mut(&n("ffn_norm"), vec![d], ParamRole::Norm, Some(l), &mut lp.ffn_norm));
            out.push(view_mut(&n("w_gate"), vec![f, d], ParamRole::Ffn(FfnMatrix::Gate), Some(l), &mut lp.w_gate));
            out.push(view_mut(&n("w_up"), vec![f, d], ParamRole::Ffn(FfnMatrix::Up), Some(l), &mut lp.w_up));
            out.push(view_mut(&n("w_down"), vec![f, d], ParamRole::Ffn(FfnMatrix::Down), Some(l), &mut lp.w_down));
        }
        out.push(view_mut("final_norm", vec![d], ParamRole::Norm, None, &mut self.final_norm));
        out.push(view_mut("head", vec![v, d], ParamRole::Head, None, &mut self.head));
        out
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    /// Same names, same shapes.
    pub fn same_layout(&self, other: &Params) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.name == y.name && x.shape == y.shape)
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Params, scale: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (a, b) in dst.data.iter_mut().zip(src.data) {
                *a += scale * b;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x *= s);
        }
    }

    /// FNV-1a over the bit patterns of every value, in manifest order.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.tensors() {
            for x in t.data {
                for b in x.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

fn view<'a>(name: &str, shape: Vec<usize>, role: ParamRole, layer: Option<usize>, data: &'a [f64]) -> TensorView<'a> {
    TensorView { name: name.to_string(), shape, role, layer, data }
}

fn view_mut<'a>(name: &str, shape: Vec<usize>, role: ParamRole, layer: Option<usize>, data: &'a mut Vec<f64>) -> TensorViewMut<'a> {
    TensorViewMut { name: name.to_string(), shape, role, layer, data }
}
