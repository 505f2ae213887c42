use crate::error::{JpuError, Result};
use crate::lm::ModelState;

pub const MIN_ANCHOR_SAMPLES: usize = 8;
pub const MAX_ANCHOR_SAMPLES: usize = 16;

/// `H_safe`: centroid of last-layer, final-position hidden states of bare
/// harmful prompts the model refuses.
#[derive(Debug, Clone, PartialEq)]
pub struct SafetyAnchor {
    pub centroid: Vec<f64>,
    pub sample_count: usize,
    pub frozen_at_iteration: u64,
    /// Too few refused prompts were found and the whole candidate set was
    /// used instead.
    pub fallback: bool,
}

/// Mean of the given vectors, summed in order.
pub fn centroid(vectors: &[Vec<f64>]) -> Vec<f64> {
    let d = vectors.first().map_or(0, Vec::len);
    let mut c = vec![0.0; d];
    for v in vectors {
        for (a, &x) in c.iter_mut().zip(v) {
            *a += x;
        }
    }
    let n = vectors.len().max(1) as f64;
    c.iter_mut().for_each(|a| *a /= n);
    c
}

/// Builds the anchor from the first [`MAX_ANCHOR_SAMPLES`] candidates (in
/// the given order) whose greedy first token is `refuse`. With fewer than
/// [`MIN_ANCHOR_SAMPLES`] refusals, all candidates are used and the anchor
/// is flagged.
pub fn compute_safety_anchor(model: &ModelState, candidates: &[Vec<usize>], refuse: usize, iteration: u64) -> Result<SafetyAnchor> {
    if candidates.is_empty() {
        return Err(crate::error::contract_err("safety anchor needs candidate prompts"));
    }
    let mut refused = Vec::with_capacity(MAX_ANCHOR_SAMPLES);
    for p in candidates {
        let trace = model.run(p, &Default::default())?;
        let v = model.config.vocab_size;
        let logits = &trace.logits[trace.logits.len() - v..];
        if crate::lm::argmax(logits) == refuse {
            refused.push(trace.last_hidden().to_vec());
            if refused.len() == MAX_ANCHOR_SAMPLES {
                break;
            }
        }
    }
    let fallback = refused.len() < MIN_ANCHOR_SAMPLES;
    if fallback {
        log::warn!("only {} refused prompts for the safety anchor; using all {} candidates", refused.len(), candidates.len());
        refused = candidates.iter().map(|p| Ok(model.hidden_snapshot(p)?.vector)).collect::<Result<_>>()?;
    }
    let c = centroid(&refused);
    if c.iter().any(|x| !x.is_finite()) {
        return Err(JpuError::Numeric { layer: model.config.num_layers, what: "anchor centroid".into() });
    }
    Ok(SafetyAnchor { centroid: c, sample_count: refused.len(), frozen_at_iteration: iteration, fallback })
}

/// `1 - cos(h, c)` and its gradient w.r.t. `h`.
pub fn cosine_distance(h: &[f64], c: &[f64]) -> Result<(f64, Vec<f64>)> {
    let hh: f64 = h.iter().map(|x| x * x).sum();
    let cc: f64 = c.iter().map(|x| x * x).sum();
    if hh == 0.0 || cc == 0.0 {
        return Err(JpuError::Numeric { layer: 0, what: "zero-norm vector in cosine distance".into() });
    }
    let hn = hh.sqrt();
    let cn = cc.sqrt();
    let dot: f64 = h.iter().zip(c).map(|(a, b)| a * b).sum();
    let cos = dot / (hn * cn);
    let grad = h.iter().zip(c).map(|(&hi, &ci)| -(ci / (hn * cn) - cos * hi / hh)).collect();
    Ok((1.0 - cos, grad))
}
