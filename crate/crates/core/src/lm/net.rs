use super::config::ModelConfig;
use super::kernels::{axpy, dot, matmul_rows, matmul_rows_backward, rmsnorm, rmsnorm_backward, silu, silu_grad};
use super::params::{Gradients, Params};
use crate::error::{input_err, Result};

/// The toy causal LM: configuration, parameters and a count of applied updates.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: Params,
    pub step_counter: u64,
}

/// Edits applied to FFN activations during a forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Intervention {
    /// `(layer, alpha)`: multiply that layer's activations at the final
    /// position by `alpha` before the down projection.
    pub scale_last: Option<(usize, f64)>,
    /// `(layer, position, neuron, delta)`: add `delta` to one activation.
    pub nudge: Option<(usize, usize, usize, f64)>,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    x_in: Vec<f64>,
    a: Vec<f64>,
    rms_a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    o: Vec<f64>,
    x_mid: Vec<f64>,
    b: Vec<f64>,
    rms_b: Vec<f64>,
    gpre: Vec<f64>,
    up: Vec<f64>,
    pub(crate) h: Vec<f64>,
}

/// Everything a forward pass computed; input to [`ModelState::backward`].
#[derive(Debug, Clone)]
pub struct Trace {
    pub tokens: Vec<usize>,
    pub(crate) layers: Vec<LayerCache>,
    /// Residual stream after the last block, `n x d`.
    pub(crate) x_out: Vec<f64>,
    y: Vec<f64>,
    rms_f: Vec<f64>,
    /// `n x vocab` logits.
    pub logits: Vec<f64>,
    intervention: Intervention,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn logits_at(&self, pos: usize) -> &[f64] {
        let v = self.logits.len() / self.tokens.len();
        &self.logits[pos * v..(pos + 1) * v]
    }

    /// Residual stream after the final block at the last position.
    pub fn last_hidden(&self) -> &[f64] {
        self.hidden_at(self.tokens.len() - 1)
    }

    /// Residual stream after the last block at `pos`.
    pub fn hidden_at(&self, pos: usize) -> &[f64] {
        let d = self.x_out.len() / self.tokens.len();
        &self.x_out[pos * d..(pos + 1) * d]
    }

    /// FFN activations of `layer`, `n x ffn_hidden_dim`.
    pub fn activations(&self, layer: usize) -> &[f64] {
        &self.layers[layer].h
    }
}

/// Gradient seeds for a backward pass.
#[derive(Debug, Clone, Default)]
pub struct Seed {
    /// `(position, dL/dlogits row)` pairs.
    pub logit_rows: Vec<(usize, Vec<f64>)>,
    /// `(position, dL/d hidden)` pairs for the residual stream after the
    /// last block.
    pub hidden_rows: Vec<(usize, Vec<f64>)>,
}

#[derive(Debug, Clone, Copy)]
pub struct BackwardOptions {
    pub param_grads: bool,
    /// Without parameter gradients, stop after producing activation
    /// gradients for this layer.
    pub lowest_layer: usize,
}

impl Default for BackwardOptions {
    fn default() -> Self {
        Self { param_grads: true, lowest_layer: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct Backward {
    pub grads: Option<Gradients>,
    /// Per layer, dL/dh for every position (`n x f`); empty for layers
    /// below `lowest_layer`.
    pub activation_grads: Vec<Vec<f64>>,
}

impl ModelState {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config);
        Ok(Self { config, params, step_counter: 0 })
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(input_err("empty token sequence"));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(input_err(format!("sequence of {} tokens exceeds context {}", tokens.len(), self.config.max_seq_len)));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(input_err(format!("token id {t} out of range for vocab {}", self.config.vocab_size)));
        }
        Ok(())
    }

    /// Per-position logits, `len(tokens) x vocab_size`, row-major.
    pub fn forward(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        Ok(self.run(tokens, &Intervention::default())?.logits)
    }

    pub fn run(&self, tokens: &[usize], iv: &Intervention) -> Result<Trace> {
        super::work::charge(tokens.len() as u64);
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let (n, d, f, vsz) = (tokens.len(), cfg.embed_dim, cfg.ffn_hidden_dim, cfg.vocab_size);
        let nh = cfg.num_heads;
        let hd = cfg.head_dim();
        let inv_sqrt = 1.0 / (hd as f64).sqrt();
        let p = &self.params;

        let mut x = vec![0.0; n * d];
        for (t, &tok) in tokens.iter().enumerate() {
            let row = &mut x[t * d..(t + 1) * d];
            row.copy_from_slice(&p.tok_embed[tok * d..(tok + 1) * d]);
            axpy(row, 1.0, &p.pos_embed[t * d..(t + 1) * d]);
        }

        let mut layers = Vec::with_capacity(cfg.num_layers);
        for (l, lp) in p.layers.iter().enumerate() {
            let x_in = x.clone();
            let (a, rms_a) = rmsnorm(&x, &lp.attn_norm, n, d);
            let q = matmul_rows(&a, &lp.wq, n, d, d);
            let k = matmul_rows(&a, &lp.wk, n, d, d);
            let v = matmul_rows(&a, &lp.wv, n, d, d);
            let mut probs = vec![0.0; nh * n * n];
            let mut o = vec![0.0; n * d];
            for h in 0..nh {
                let off = h * hd;
                for t in 0..n {
                    let qt = &q[t * d + off..t * d + off + hd];
                    let pr = &mut probs[(h * n + t) * n..(h * n + t + 1) * n];
                    let mut max = f64::NEG_INFINITY;
                    for s in 0..=t {
                        pr[s] = dot(qt, &k[s * d + off..s * d + off + hd]) * inv_sqrt;
                        max = max.max(pr[s]);
                    }
                    let mut z = 0.0;
                    for s in pr.iter_mut().take(t + 1) {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    for s in 0..=t {
                        pr[s] /= z;
                        axpy(&mut o[t * d + off..t * d + off + hd], pr[s], &v[s * d + off..s * d + off + hd]);
                    }
                }
            }
            let attn = matmul_rows(&o, &lp.wo, n, d, d);
            axpy(&mut x, 1.0, &attn);
            let x_mid = x.clone();

            let (b, rms_b) = rmsnorm(&x, &lp.ffn_norm, n, d);
            let gpre = matmul_rows(&b, &lp.w_gate, n, d, f);
            let up = matmul_rows(&b, &lp.w_up, n, d, f);
            let mut hact: Vec<f64> = gpre.iter().zip(&up).map(|(&g, &u)| silu(g) * u).collect();
            if let Some((sl, alpha)) = iv.scale_last {
                if sl == l {
                    hact[(n - 1) * f..].iter_mut().for_each(|a| *a *= alpha);
                }
            }
            if let Some((nl, pos, neuron, delta)) = iv.nudge {
                if nl == l {
                    hact[pos * f + neuron] += delta;
                }
            }
            for t in 0..n {
                let xt = &mut x[t * d..(t + 1) * d];
                for i in 0..f {
                    let a_i = hact[t * f + i];
                    if a_i != 0.0 {
                        axpy(xt, a_i, &lp.w_down[i * d..(i + 1) * d]);
                    }
                }
            }
            layers.push(LayerCache { x_in, a, rms_a, q, k, v, probs, o, x_mid, b, rms_b, gpre, up, h: hact });
        }

        let (y, rms_f) = rmsnorm(&x, &p.final_norm, n, d);
        let logits = matmul_rows(&y, &p.head, n, d, vsz);
        Ok(Trace { tokens: tokens.to_vec(), layers, x_out: x, y, rms_f, logits, intervention: *iv })
    }

    pub fn backward(&self, trace: &Trace, seed: &Seed, opts: BackwardOptions) -> Backward {
        let mut grads = opts.param_grads.then(|| Params::zeros(&self.config));
        let activation_grads = self.backward_into(trace, seed, opts.lowest_layer, grads.as_mut());
        Backward { grads, activation_grads }
    }

    /// Backward pass that adds parameter gradients into `grads` when given.
    /// Returns per-layer activation gradients.
    pub fn backward_into(&self, trace: &Trace, seed: &Seed, lowest_layer: usize, mut grads: Option<&mut Gradients>) -> Vec<Vec<f64>> {
        super::work::charge(2 * trace.len() as u64);
        let cfg = &self.config;
        let n = trace.len();
        let (d, f, vsz) = (cfg.embed_dim, cfg.ffn_hidden_dim, cfg.vocab_size);
        let nh = cfg.num_heads;
        let hd = cfg.head_dim();
        let inv_sqrt = 1.0 / (hd as f64).sqrt();
        let p = &self.params;
        let param_grads = grads.is_some();

        let mut dy = vec![0.0; n * d];
        for (t, row) in &seed.logit_rows {
            let t = *t;
            let yt = &trace.y[t * d..(t + 1) * d];
            for v in 0..vsz {
                let g = row[v];
                if g == 0.0 {
                    continue;
                }
                axpy(&mut dy[t * d..(t + 1) * d], g, &p.head[v * d..(v + 1) * d]);
                if let Some(gr) = grads.as_mut() {
                    axpy(&mut gr.head[v * d..(v + 1) * d], g, yt);
                }
            }
        }
        let mut dx = vec![0.0; n * d];
        rmsnorm_backward(
            &dy,
            &trace.x_out,
            &trace.rms_f,
            &p.final_norm,
            n,
            d,
            &mut dx,
            grads.as_mut().map(|g| g.final_norm.as_mut_slice()),
        );
        for (t, dh) in &seed.hidden_rows {
            axpy(&mut dx[t * d..(t + 1) * d], 1.0, dh);
        }

        let lowest = if param_grads { 0 } else { lowest_layer.min(cfg.num_layers - 1) };
        let mut activation_grads = vec![Vec::new(); cfg.num_layers];
        for l in (lowest..cfg.num_layers).rev() {
            let lp = &p.layers[l];
            let c = &trace.layers[l];
            let mut lg = grads.as_mut().map(|g| &mut g.layers[l]);

            // FFN down projection: x_out = x_mid + sum_i h_i w_down[i]
            let mut dh = vec![0.0; n * f];
            for t in 0..n {
                let dxt = &dx[t * d..(t + 1) * d];
                for i in 0..f {
                    dh[t * f + i] = dot(dxt, &lp.w_down[i * d..(i + 1) * d]);
                    if let Some(g) = lg.as_deref_mut() {
                        let a_i = c.h[t * f + i];
                        if a_i != 0.0 {
                            axpy(&mut g.w_down[i * d..(i + 1) * d], a_i, dxt);
                        }
                    }
                }
            }
            let mut dh_eff = dh.clone();
            activation_grads[l] = dh;
            if l == lowest && !param_grads {
                break;
            }
            if let Some((sl, alpha)) = trace.intervention.scale_last {
                if sl == l {
                    dh_eff[(n - 1) * f..].iter_mut().for_each(|a| *a *= alpha);
                }
            }
            let mut dgpre = vec![0.0; n * f];
            let mut dup = vec![0.0; n * f];
            for idx in 0..n * f {
                let g = c.gpre[idx];
                dgpre[idx] = dh_eff[idx] * c.up[idx] * silu_grad(g);
                dup[idx] = dh_eff[idx] * silu(g);
            }
            let mut db = vec![0.0; n * d];
            matmul_rows_backward(&dgpre, &c.b, &lp.w_gate, n, d, f, &mut db, lg.as_deref_mut().map(|g| g.w_gate.as_mut_slice()));
            matmul_rows_backward(&dup, &c.b, &lp.w_up, n, d, f, &mut db, lg.as_deref_mut().map(|g| g.w_up.as_mut_slice()));
            rmsnorm_backward(&db, &c.x_mid, &c.rms_b, &lp.ffn_norm, n, d, &mut dx, lg.as_deref_mut().map(|g| g.ffn_norm.as_mut_slice()));

            // Attention: x_mid = x_in + wo . o
            let mut d_o = vec![0.0; n * d];
            matmul_rows_backward(&dx, &c.o, &lp.wo, n, d, d, &mut d_o, lg.as_deref_mut().map(|g| g.wo.as_mut_slice()));
            let mut dq = vec![0.0; n * d];
            let mut dk = vec![0.0; n * d];
            let mut dv = vec![0.0; n * d];
            let mut dp = vec![0.0; n];
            for h in 0..nh {
                let off = h * hd;
                for t in 0..n {
                    let pr = &c.probs[(h * n + t) * n..(h * n + t + 1) * n];
                    let dot_t = &d_o[t * d + off..t * d + off + hd];
                    let mut sum = 0.0;
                    for s in 0..=t {
                        dp[s] = dot(dot_t, &c.v[s * d + off..s * d + off + hd]);
                        sum += pr[s] * dp[s];
                    }
                    for s in 0..=t {
                        axpy(&mut dv[s * d + off..s * d + off + hd], pr[s], dot_t);
                        let ds = pr[s] * (dp[s] - sum) * inv_sqrt;
                        if ds != 0.0 {
                            axpy(&mut dq[t * d + off..t * d + off + hd], ds, &c.k[s * d + off..s * d + off + hd]);
                            axpy(&mut dk[s * d + off..s * d + off + hd], ds, &c.q[t * d + off..t * d + off + hd]);
                        }
                    }
                }
            }
            let mut da = vec![0.0; n * d];
            matmul_rows_backward(&dq, &c.a, &lp.wq, n, d, d, &mut da, lg.as_deref_mut().map(|g| g.wq.as_mut_slice()));
            matmul_rows_backward(&dk, &c.a, &lp.wk, n, d, d, &mut da, lg.as_deref_mut().map(|g| g.wk.as_mut_slice()));
            matmul_rows_backward(&dv, &c.a, &lp.wv, n, d, d, &mut da, lg.as_deref_mut().map(|g| g.wv.as_mut_slice()));
            rmsnorm_backward(&da, &c.x_in, &c.rms_a, &lp.attn_norm, n, d, &mut dx, lg.map(|g| g.attn_norm.as_mut_slice()));
        }

        if let Some(g) = grads.as_mut() {
            for (t, &tok) in trace.tokens.iter().enumerate() {
                axpy(&mut g.tok_embed[tok * d..(tok + 1) * d], 1.0, &dx[t * d..(t + 1) * d]);
                axpy(&mut g.pos_embed[t * d..(t + 1) * d], 1.0, &dx[t * d..(t + 1) * d]);
            }
        }
        activation_grads
    }
}
