use rand::seq::index::sample;
use rand::Rng;

use super::{FlowRecord, LayerWindow};
use crate::error::{contract_err, Result};

/// Binary per-neuron mask over every FFN layer of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMask {
    /// `bits[layer][neuron]`; layers outside `window` are all clear.
    pub bits: Vec<Vec<bool>>,
    pub sparsity_p: f64,
    pub window: LayerWindow,
}

impl SparseMask {
    pub fn empty(num_layers: usize, width: usize, window: LayerWindow) -> Self {
        Self { bits: vec![vec![false; width]; num_layers], sparsity_p: 0.0, window }
    }

    pub fn full(num_layers: usize, width: usize, window: LayerWindow) -> Self {
        let mut m = Self::empty(num_layers, width, window);
        for l in window.layers() {
            m.bits[l].iter_mut().for_each(|b| *b = true);
        }
        m.sparsity_p = 1.0;
        m
    }

    pub fn count(&self) -> usize {
        self.bits.iter().flatten().filter(|&&b| b).count()
    }

    pub fn set_neurons(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (l, layer) in self.bits.iter().enumerate() {
            for (i, &b) in layer.iter().enumerate() {
                if b {
                    out.push((l, i));
                }
            }
        }
        out
    }

    /// CSV rows `layer,neuron,bit,mask,iteration` for the window layers.
    pub fn csv_rows(&self, iteration: usize) -> String {
        let mut out = String::new();
        for l in self.window.layers() {
            for (i, &b) in self.bits[l].iter().enumerate() {
                out.push_str(&format!("{l},{i},{},mask,{iteration}\n", b as u8));
            }
        }
        out
    }
}

/// Number of neurons a mask of sparsity `p` selects out of `total`.
pub fn mask_size(p: f64, total: usize) -> Result<usize> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(contract_err(format!("sparsity {p} outside (0, 1]")));
    }
    let k = (p * total as f64).round() as usize;
    if k == 0 {
        return Err(contract_err(format!("sparsity {p} selects no neurons out of {total}")));
    }
    Ok(k.min(total))
}

/// Global top-`round(p * N)` selection over the window. Ties go to the
/// lower `(layer, neuron)`.
pub fn build_mask(diff: &FlowRecord, p: f64) -> Result<SparseMask> {
    let total = diff.total_neurons();
    let k = mask_size(p, total)?;
    let mut ranked: Vec<(f64, usize, usize)> = Vec::with_capacity(total);
    for (off, layer) in diff.scores.iter().enumerate() {
        for (i, &s) in layer.iter().enumerate() {
            ranked.push((s, diff.window.start + off, i));
        }
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let width = diff.scores.first().map_or(0, Vec::len);
    let mut mask = SparseMask::empty(diff.num_layers, width, diff.window);
    mask.sparsity_p = p;
    for &(_, l, i) in ranked.iter().take(k) {
        mask.bits[l][i] = true;
    }
    Ok(mask)
}

/// `count` neurons drawn uniformly without replacement from the window.
pub fn random_mask<R: Rng + ?Sized>(num_layers: usize, width: usize, window: LayerWindow, count: usize, rng: &mut R) -> Result<SparseMask> {
    let total = window.len() * width;
    if count == 0 || count > total {
        return Err(contract_err(format!("cannot draw {count} of {total} neurons")));
    }
    let mut mask = SparseMask::empty(num_layers, width, window);
    mask.sparsity_p = count as f64 / total as f64;
    for idx in sample(rng, total, count) {
        mask.bits[window.start + idx / width][idx % width] = true;
    }
    Ok(mask)
}

/// Per-layer `|a & b| / |a | b|`; layers where both are empty score 1.
pub fn layerwise_iou(a: &SparseMask, b: &SparseMask) -> Result<Vec<f64>> {
    if a.bits.len() != b.bits.len() || a.bits.iter().zip(&b.bits).any(|(x, y)| x.len() != y.len()) {
        return Err(contract_err("masks have different dimensions"));
    }
    Ok(a.bits
        .iter()
        .zip(&b.bits)
        .map(|(x, y)| {
            let inter = x.iter().zip(y).filter(|(p, q)| **p && **q).count();
            let union = x.iter().zip(y).filter(|(p, q)| **p || **q).count();
            if union == 0 {
                1.0
            } else {
                inter as f64 / union as f64
            }
        })
        .collect())
}

pub fn mean_iou(curve: &[f64], layers: LayerWindow) -> f64 {
    layers.layers().map(|l| curve[l]).sum::<f64>() / layers.len() as f64
}
