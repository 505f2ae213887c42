//! The rectification objective, the static unlearning baseline, and the
//! outer training loop that ties mining, path finding and masked updates
//! together.

mod anchor;
mod baseline;
mod loss;
mod train;

pub use anchor::{centroid, compute_safety_anchor, cosine_distance, SafetyAnchor, MAX_ANCHOR_SAMPLES, MIN_ANCHOR_SAMPLES};
pub use baseline::{train_baseline, BaselineConfig, BaselineOutcome};
pub use loss::{
    anchor_alignment_loss, baseline_unlearn_grads, baseline_unlearn_loss, rectification_grads, refusal_behavior_loss, total_loss,
    utility_grads, LossBundle,
};
pub use train::{train, IterationRecord, TrainOutcome, TrainStatus, ITERATION_HEADER};

use crate::buffer::{MiningMode, StepConfig};
use crate::error::{config_err, Result};
use crate::pathfinder::LayerStrategy;

/// How the per-iteration neuron mask is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskSource {
    /// Top-p differential flow.
    Flow,
    /// Uniformly random neurons of the same count.
    Random,
    /// Top-p SNIP saliency of the refusal loss.
    Snip,
}

impl MaskSource {
    pub fn name(self) -> &'static str {
        match self {
            Self::Flow => "flow",
            Self::Random => "random",
            Self::Snip => "snip",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "flow" => Ok(Self::Flow),
            "random" => Ok(Self::Random),
            "snip" => Ok(Self::Snip),
            _ => Err(config_err(format!("unknown mask source {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub eta: f64,
    pub beta: f64,
    pub lambda: f64,
    /// Mask sparsity `p`.
    pub sparsity: f64,
    /// Refusal-loss threshold `tau` for parents.
    pub threshold: f64,
    pub max_iterations: usize,
    /// Sampled-buffer refusal rate that counts as converged.
    pub convergence_rate: f64,
    /// Consecutive converged iterations before stopping.
    pub patience: usize,
    pub utility_batch: usize,
    pub mining_batch: usize,
    pub offspring_per_parent: usize,
    pub mining: MiningMode,
    pub mask_source: MaskSource,
    pub layers: LayerStrategy,
    pub seed: u64,
    /// Write a checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: usize,
    /// Stop once this much model work has been spent; 0 disables.
    pub work_budget: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: 0.05,
            beta: 4.0,
            lambda: 1.0,
            sparsity: 0.05,
            threshold: 0.5,
            max_iterations: 300,
            convergence_rate: 0.95,
            patience: 3,
            utility_batch: 32,
            mining_batch: 16,
            offspring_per_parent: 1,
            mining: MiningMode::OnPolicy,
            mask_source: MaskSource::Flow,
            layers: LayerStrategy::Default,
            seed: 0,
            checkpoint_every: 0,
            work_budget: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(config_err("eta must be positive"));
        }
        if !(self.sparsity > 0.0 && self.sparsity <= 1.0) {
            return Err(config_err("sparsity p must lie in (0, 1]"));
        }
        if !(self.threshold >= 0.0) {
            return Err(config_err("threshold must be non-negative"));
        }
        if !(self.beta >= 0.0 && self.lambda >= 0.0) {
            return Err(config_err("loss weights must be non-negative"));
        }
        if self.utility_batch == 0 || self.mining_batch == 0 {
            return Err(config_err("batch sizes must be at least 1"));
        }
        if self.patience == 0 {
            return Err(config_err("patience must be at least 1"));
        }
        Ok(())
    }

    pub fn step_config(&self) -> StepConfig {
        StepConfig {
            batch_size: self.mining_batch,
            threshold: self.threshold,
            offspring_per_parent: self.offspring_per_parent,
            mode: self.mining,
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || config_err(format!("train.{key}: cannot parse {value:?}"));
        macro_rules! num {
            ($field:expr) => {
                $field = value.parse().map_err(|_| bad())?
            };
        }
        match key {
            "eta" => num!(self.eta),
            "beta" => num!(self.beta),
            "lambda" => num!(self.lambda),
            "p" | "sparsity" => num!(self.sparsity),
            "threshold" | "tau" => num!(self.threshold),
            "max_iterations" => num!(self.max_iterations),
            "convergence_rate" => num!(self.convergence_rate),
            "patience" => num!(self.patience),
            "utility_batch" => num!(self.utility_batch),
            "mining_batch" => num!(self.mining_batch),
            "offspring_per_parent" => num!(self.offspring_per_parent),
            "seed" => num!(self.seed),
            "checkpoint_every" => num!(self.checkpoint_every),
            "work_budget" => num!(self.work_budget),
            "mining" => self.mining = MiningMode::parse(value)?,
            "mask_source" => self.mask_source = MaskSource::parse(value)?,
            "layers" => self.layers = LayerStrategy::parse(value)?,
            _ => return Err(config_err(format!("unknown train key {key:?}"))),
        }
        Ok(())
    }
}
