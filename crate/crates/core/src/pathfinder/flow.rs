use super::{FlowRecord, FlowSource, LayerWindow};
use crate::error::{contract_err, Result};
use crate::lm::{Intervention, ModelState};

#[inline]
fn flow_term(weight_norm: f64, activation: f64, grad: f64) -> f64 {
    weight_norm * (activation * grad).abs()
}

/// Mean over `prompts` of `|W| * |A * dA|` at the final position, with dA
/// taken w.r.t. the sink token's logit.
pub fn flow_scores(
    model: &ModelState,
    prompts: &[Vec<usize>],
    sink_token: usize,
    window: LayerWindow,
    source: FlowSource,
) -> Result<FlowRecord> {
    let items: Vec<(&[usize], usize)> = prompts.iter().map(|p| (p.as_slice(), sink_token)).collect();
    flow_scores_per_sink(model, &items, window, source)
}

/// Like [`flow_scores`], with a sink token per prompt.
pub fn flow_scores_per_sink(
    model: &ModelState,
    items: &[(&[usize], usize)],
    window: LayerWindow,
    source: FlowSource,
) -> Result<FlowRecord> {
    if items.is_empty() {
        return Err(contract_err("flow requires a non-empty batch"));
    }
    if window.end >= model.config.num_layers {
        return Err(contract_err(format!("layer window {window} exceeds {} layers", model.config.num_layers)));
    }
    let f = model.config.ffn_hidden_dim;
    let mut scores = vec![vec![0.0; f]; window.len()];
    for &(prompt, sink) in items {
        let attr = model.attribute_with(prompt, sink, &Intervention::default(), window.start)?;
        for trace in attr.layers.iter().filter(|t| window.contains(t.layer_index)) {
            let acc = &mut scores[trace.layer_index - window.start];
            let acts = trace.final_activations();
            let grads = trace.final_grads();
            for i in 0..f {
                acc[i] += flow_term(trace.weight_norms[i], acts[i], grads[i]);
            }
        }
    }
    let n = items.len() as f64;
    scores.iter_mut().flatten().for_each(|s| *s /= n);
    Ok(FlowRecord { scores, source, window, num_layers: model.config.num_layers })
}

pub fn jailbreak_flow(model: &ModelState, prompts: &[Vec<usize>], sink_token: usize, window: LayerWindow) -> Result<FlowRecord> {
    flow_scores(model, prompts, sink_token, window, FlowSource::Jailbreak)
}

/// Flow on a reference utility batch, each prompt attributed to the first
/// token of its own response.
pub fn utility_flow(model: &ModelState, pairs: &[(Vec<usize>, Vec<usize>)], window: LayerWindow) -> Result<FlowRecord> {
    let mut items = Vec::with_capacity(pairs.len());
    for (p, y) in pairs {
        let sink = *y.first().ok_or_else(|| contract_err("utility pair with an empty response"))?;
        items.push((p.as_slice(), sink));
    }
    flow_scores_per_sink(model, &items, window, FlowSource::Utility)
}

/// Legendre `P_{n-1}(x)` and `P_n(x)` by the three-term recurrence.
fn legendre_pair(n: usize, x: f64) -> (f64, f64) {
    let (mut prev, mut cur) = (1.0, x);
    if n == 0 {
        return (0.0, 1.0);
    }
    for k in 1..n {
        let next = ((2 * k + 1) as f64 * x * cur - k as f64 * prev) / (k + 1) as f64;
        prev = cur;
        cur = next;
    }
    (prev, cur)
}

/// `(alpha, weight)` pairs of the `n`-point Gauss-Radau rule on `[0, 1]`
/// anchored at `alpha = 1`. Nodes interlace with the cumulative weights, so
/// the rule is a Riemann sum over a tagged partition whose last tag is the
/// right endpoint; with `n = 1` it is the single point `(1, 1)`. Exact for
/// polynomials up to degree `2n - 2`.
pub fn radau_points(n: usize) -> Vec<(f64, f64)> {
    if n == 1 {
        return vec![(1.0, 1.0)];
    }
    let nf = n as f64;
    let mut out = Vec::with_capacity(n);
    // Free nodes on [-1, 1] are the roots of P_{n-1} + P_n other than -1;
    // mirrored so the fixed node lands on +1.
    for i in 1..n {
        let mut x = -(2.0 * std::f64::consts::PI * i as f64 / (2.0 * nf - 1.0)).cos();
        for _ in 0..100 {
            let (pm, pn) = legendre_pair(n, x);
            let (pmm, _) = legendre_pair(n - 1, x);
            let f = pm + pn;
            let d_pn = nf * (x * pn - pm) / (x * x - 1.0);
            let d_pm = (nf - 1.0) * (x * pm - pmm) / (x * x - 1.0);
            let dx = f / (d_pn + d_pm);
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (pm, _) = legendre_pair(n, x);
        let w = (1.0 - x) / (nf * nf * pm * pm);
        out.push(((1.0 - x) / 2.0, w / 2.0));
    }
    out.push((1.0, 1.0 / (nf * nf)));
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

/// Integrated-gradient flow for one prompt: for each layer, the final
/// position's activation vector is scaled from zero to its value and the
/// sink-logit gradient is integrated over the scale with the `steps`-point
/// rule of [`radau_points`]. With `steps = 1` this is exactly the
/// first-order score.
pub fn integrated_flow_oracle(
    model: &ModelState,
    prompt: &[usize],
    sink_token: usize,
    window: LayerWindow,
    steps: usize,
) -> Result<FlowRecord> {
    if steps == 0 {
        return Err(contract_err("oracle needs at least one step"));
    }
    let f = model.config.ffn_hidden_dim;
    let points = radau_points(steps);
    let base = model.attribute_with(prompt, sink_token, &Intervention::default(), window.start)?;
    let mut scores = Vec::with_capacity(window.len());
    for layer in window.layers() {
        let trace = &base.layers[layer - window.start];
        let mut grad_sum = vec![0.0; f];
        for &(alpha, weight) in &points {
            let iv = Intervention { scale_last: Some((layer, alpha)), nudge: None };
            let attr = model.attribute_with(prompt, sink_token, &iv, layer)?;
            let g = attr.layers[0].final_grads();
            for i in 0..f {
                grad_sum[i] += weight * g[i];
            }
        }
        let acts = trace.final_activations();
        let row = (0..f).map(|i| flow_term(trace.weight_norms[i], acts[i], grad_sum[i])).collect();
        scores.push(row);
    }
    Ok(FlowRecord { scores, source: FlowSource::Jailbreak, window, num_layers: model.config.num_layers })
}

fn l1_normalized(layer: &[f64]) -> Vec<f64> {
    let sum: f64 = layer.iter().map(|s| s.abs()).sum();
    if sum == 0.0 {
        return vec![0.0; layer.len()];
    }
    layer.iter().map(|s| s / sum).collect()
}

/// Per layer: `jb / |jb|_1 - util / |util|_1`.
pub fn differential_flow(jb: &FlowRecord, util: &FlowRecord) -> Result<FlowRecord> {
    if jb.window != util.window || jb.scores.len() != util.scores.len() {
        return Err(contract_err("flow records cover different windows"));
    }
    let mut scores = Vec::with_capacity(jb.scores.len());
    for (a, b) in jb.scores.iter().zip(&util.scores) {
        if a.len() != b.len() {
            return Err(contract_err("flow records have different layer widths"));
        }
        let na = l1_normalized(a);
        let nb = l1_normalized(b);
        scores.push(na.iter().zip(&nb).map(|(x, y)| x - y).collect());
    }
    Ok(FlowRecord { scores, source: FlowSource::Differential, window: jb.window, num_layers: jb.num_layers })
}
