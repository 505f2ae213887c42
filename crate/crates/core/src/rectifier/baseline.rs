use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::baseline_unlearn_grads;
use super::train::utility_sample;
use crate::corpus::World;
use crate::error::{config_err, JpuError, Result};
use crate::lm::{work_units, ModelState};

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineConfig {
    pub eta: f64,
    pub lambda: f64,
    pub forget_batch: usize,
    pub retain_batch: usize,
    pub seed: u64,
    /// Hard stop regardless of budget.
    pub max_steps: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { eta: 0.05, lambda: 1.0, forget_batch: 16, retain_batch: 32, seed: 0, max_steps: 10_000 }
    }
}

#[derive(Debug, Clone)]
pub struct BaselineOutcome {
    pub model: ModelState,
    pub steps: usize,
    pub losses: Vec<f64>,
    pub work_units: u64,
    pub diverged: bool,
}

/// Full-parameter training on the static unlearning objective until
/// `budget_units` of model work have been spent.
pub fn train_baseline(model: &ModelState, world: &World, cfg: &BaselineConfig, budget_units: u64) -> Result<BaselineOutcome> {
    if !(cfg.eta > 0.0) || cfg.forget_batch == 0 || cfg.retain_batch == 0 {
        return Err(config_err("baseline needs a positive learning rate and non-empty batches"));
    }
    let start = work_units();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xba5e_11e0);
    let y_ref = world.vocab.refusal_target();
    let mut state = model.clone();
    let mut losses = Vec::new();
    let mut diverged = false;
    while work_units() - start < budget_units && losses.len() < cfg.max_steps {
        let n = cfg.forget_batch.min(world.forget.len());
        let mut idx = sample(&mut rng, world.forget.len(), n).into_vec();
        idx.sort_unstable();
        let forget: Vec<Vec<usize>> = idx.into_iter().map(|i| world.forget[i].prompt.clone()).collect();
        let retain = utility_sample(world, cfg.retain_batch, &mut rng);
        let next = match baseline_unlearn_grads(&state, &forget, &retain, &y_ref, cfg.lambda) {
            Ok((loss, grads)) => {
                losses.push(loss);
                state.sgd_step(&grads, cfg.eta)?
            }
            Err(JpuError::Numeric { .. }) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        if !next.params.all_finite() {
            diverged = true;
            break;
        }
        state = next;
    }
    Ok(BaselineOutcome { model: state, steps: losses.len(), losses, work_units: work_units() - start, diverged })
}
