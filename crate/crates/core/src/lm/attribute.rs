use super::net::{BackwardOptions, Intervention, ModelState, Seed};
use crate::error::{input_err, JpuError, Result};

/// FFN instrumentation for one layer of one attribution pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub layer_index: usize,
    /// `positions x ffn_hidden_dim` activations (A).
    pub activations: Vec<f64>,
    /// Gradient of the attribution scalar w.r.t. each activation (dA).
    pub activation_grads: Vec<f64>,
    /// L1 norm of each neuron's outgoing (down-projection) row (|W|).
    pub weight_norms: Vec<f64>,
}

impl LayerTrace {
    pub fn width(&self) -> usize {
        self.weight_norms.len()
    }

    pub fn positions(&self) -> usize {
        self.activations.len() / self.width()
    }

    pub fn final_activations(&self) -> &[f64] {
        let f = self.width();
        &self.activations[self.activations.len() - f..]
    }

    pub fn final_grads(&self) -> &[f64] {
        let f = self.width();
        &self.activation_grads[self.activation_grads.len() - f..]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnapshotSource {
    Current,
    Anchor,
}

/// Last-layer hidden state at the final input position.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenSnapshot {
    pub vector: Vec<f64>,
    pub source: SnapshotSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attribution {
    pub layers: Vec<LayerTrace>,
    pub hidden: HiddenSnapshot,
}

impl ModelState {
    /// Instrumented pass with the sink token's final-position logit as the
    /// attribution scalar.
    pub fn attribute(&self, tokens: &[usize], sink_token: usize) -> Result<Attribution> {
        self.attribute_with(tokens, sink_token, &Intervention::default(), 0)
    }

    /// As [`ModelState::attribute`], under an activation intervention, with
    /// traces only for layers `>= lowest_layer`.
    pub fn attribute_with(&self, tokens: &[usize], sink_token: usize, iv: &Intervention, lowest_layer: usize) -> Result<Attribution> {
        if sink_token >= self.config.vocab_size {
            return Err(input_err(format!("sink token {sink_token} out of range")));
        }
        let trace = self.run(tokens, iv)?;
        let n = tokens.len();
        let mut row = vec![0.0; self.config.vocab_size];
        row[sink_token] = 1.0;
        let seed = Seed { logit_rows: vec![(n - 1, row)], hidden_rows: Vec::new() };
        let bw = self.backward(&trace, &seed, BackwardOptions { param_grads: false, lowest_layer });
        let d = self.config.embed_dim;
        let mut layers = Vec::new();
        for (l, grads) in bw.activation_grads.into_iter().enumerate().skip(lowest_layer) {
            if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
                return Err(JpuError::Numeric { layer: l, what: format!("activation gradient {bad} is {}", grads[bad]) });
            }
            let w_down = &self.params.layers[l].w_down;
            let weight_norms = w_down.chunks(d).map(|r| r.iter().map(|w| w.abs()).sum()).collect();
            layers.push(LayerTrace { layer_index: l, activations: trace.activations(l).to_vec(), activation_grads: grads, weight_norms });
        }
        let hidden = HiddenSnapshot { vector: trace.last_hidden().to_vec(), source: SnapshotSource::Current };
        Ok(Attribution { layers, hidden })
    }

    pub fn hidden_snapshot(&self, tokens: &[usize]) -> Result<HiddenSnapshot> {
        let trace = self.run(tokens, &Intervention::default())?;
        Ok(HiddenSnapshot { vector: trace.last_hidden().to_vec(), source: SnapshotSource::Current })
    }
}
