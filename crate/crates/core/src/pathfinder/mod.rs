//! Jailbreak-path identification: per-neuron flow scores toward a sink
//! token, an integrated-gradient reference, differential flow, sparse masks
//! and the SNIP / IoU diagnostics.

mod flow;
mod mask;
mod snip;

pub use flow::{differential_flow, flow_scores, flow_scores_per_sink, integrated_flow_oracle, jailbreak_flow, radau_points, utility_flow};
pub use mask::{build_mask, layerwise_iou, mask_size, mean_iou, random_mask, SparseMask};
pub use snip::{snip_from_grads, snip_score};

use crate::error::{config_err, Result};

/// Inclusive range of layer indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LayerWindow {
    pub start: usize,
    pub end: usize,
}

impl LayerWindow {
    pub fn new(start: usize, end: usize, num_layers: usize) -> Result<Self> {
        if start > end || end >= num_layers {
            return Err(config_err(format!("layer window {start}..={end} invalid for {num_layers} layers")));
        }
        Ok(Self { start, end })
    }

    pub fn all(num_layers: usize) -> Self {
        Self { start: 0, end: num_layers - 1 }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, layer: usize) -> bool {
        (self.start..=self.end).contains(&layer)
    }

    pub fn layers(&self) -> std::ops::RangeInclusive<usize> {
        self.start..=self.end
    }
}

impl std::fmt::Display for LayerWindow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}-{}", self.start, self.end)
    }
}

/// Which layers path identification looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum LayerStrategy {
    /// Intermediate through last: `ceil(L/2) ..= L-1`.
    #[default]
    Default,
    /// `[0, ceil(L/3))`
    Shallow,
    /// `[ceil(L/3), ceil(2L/3))`
    Middle,
    /// The final `max(1, round(L/8))` layers.
    Last,
}

impl LayerStrategy {
    pub const ALL: [LayerStrategy; 4] = [Self::Default, Self::Shallow, Self::Middle, Self::Last];

    pub fn window(self, num_layers: usize) -> LayerWindow {
        let l = num_layers;
        let (start, end_excl) = match self {
            Self::Default => (l.div_ceil(2).min(l - 1), l),
            Self::Shallow => (0, l.div_ceil(3).max(1)),
            Self::Middle => {
                let s = l.div_ceil(3).min(l - 1);
                (s, (2 * l).div_ceil(3).max(s + 1))
            }
            Self::Last => {
                let k = ((l as f64 / 8.0).round() as usize).max(1);
                (l - k.min(l), l)
            }
        };
        LayerWindow { start, end: end_excl - 1 }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Default => "default",
            Self::Shallow => "shallow",
            Self::Middle => "middle",
            Self::Last => "last",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| config_err(format!("unknown layer strategy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowSource {
    Jailbreak,
    Utility,
    Differential,
    Snip,
}

impl FlowSource {
    pub fn name(self) -> &'static str {
        match self {
            Self::Jailbreak => "jailbreak",
            Self::Utility => "utility",
            Self::Differential => "differential",
            Self::Snip => "snip",
        }
    }
}

/// Per-neuron scores for the layers of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowRecord {
    /// `scores[k]` belongs to layer `window.start + k`.
    pub scores: Vec<Vec<f64>>,
    pub source: FlowSource,
    pub window: LayerWindow,
    pub num_layers: usize,
}

impl FlowRecord {
    pub fn layer(&self, layer: usize) -> &[f64] {
        &self.scores[layer - self.window.start]
    }

    pub fn total_neurons(&self) -> usize {
        self.scores.iter().map(Vec::len).sum()
    }

    /// CSV rows `layer,neuron,score,source,iteration`, no header.
    pub fn csv_rows(&self, iteration: usize) -> String {
        let mut out = String::new();
        for (k, layer) in self.scores.iter().enumerate() {
            for (i, s) in layer.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    self.window.start + k,
                    i,
                    crate::harness::fmt_sig(*s),
                    self.source.name(),
                    iteration
                ));
            }
        }
        out
    }
}

pub const FLOW_CSV_HEADER: &str = "layer,neuron,value,source,iteration";
