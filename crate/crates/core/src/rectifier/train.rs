use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::anchor::compute_safety_anchor;
use super::loss::{total_loss, utility_grads, LossBundle};
use super::{MaskSource, TrainConfig};
use crate::buffer::{step_buffer, Buffer};
use crate::corpus::World;
use crate::error::{JpuError, Result};
use crate::harness::fmt_sig;
use crate::lm::{work_units, ModelState, Params};
use crate::pathfinder::{build_mask, differential_flow, jailbreak_flow, mask_size, random_mask, snip_score, utility_flow, SparseMask};

pub const ITERATION_HEADER: &str =
    "iteration\tparents\toffspring\tL_h\tL_s\tL_u\ttotal\tmask_size\tbuffer_refusal_rate\tskipped\twall_time";

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: u64,
    pub parents: usize,
    pub offspring: usize,
    pub loss: LossBundle,
    pub mask_size: usize,
    pub buffer_refusal_rate: f64,
    pub skipped: bool,
    pub anchor_fallback: bool,
    /// Seconds spent in the iteration. Not reproducible; left out of
    /// [`IterationRecord::deterministic_line`].
    pub wall_time: f64,
}

impl IterationRecord {
    /// Tab-separated record without the wall time.
    pub fn deterministic_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.iteration,
            self.parents,
            self.offspring,
            fmt_sig(self.loss.refusal),
            fmt_sig(self.loss.anchor),
            fmt_sig(self.loss.utility),
            fmt_sig(self.loss.total),
            self.mask_size,
            fmt_sig(self.buffer_refusal_rate),
            u8::from(self.skipped)
        )
    }

    pub fn line(&self) -> String {
        format!("{}\t{}", self.deterministic_line(), fmt_sig(self.wall_time))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainStatus {
    Converged {
        iteration: u64,
    },
    MaxIterations,
    /// The work budget ran out.
    BudgetSpent {
        iteration: u64,
    },
    /// A non-finite value appeared; the returned model is the last good one.
    Diverged {
        iteration: u64,
        what: String,
    },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelState,
    pub records: Vec<IterationRecord>,
    pub status: TrainStatus,
    /// Mask of the last rectifying iteration.
    pub last_mask: Option<SparseMask>,
    /// Model work spent, see [`crate::lm::work_units`].
    pub work_units: u64,
}

/// Draws `n` retain pairs without replacement (all of them if fewer).
pub(crate) fn utility_sample(world: &World, n: usize, rng: &mut ChaCha8Rng) -> Vec<(Vec<usize>, Vec<usize>)> {
    let n = n.min(world.retain.len());
    let mut idx = sample(rng, world.retain.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| (world.retain[i].prompt.clone(), world.retain[i].response.clone())).collect()
}

fn is_numeric(e: &JpuError) -> bool {
    matches!(e, JpuError::Numeric { .. })
}

/// The outer loop: mine, locate, rectify, until the sampled buffer is
/// refused consistently or the iteration budget runs out.
pub fn train(
    model: &ModelState,
    world: &World,
    buffer: &mut Buffer,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start_units = work_units();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a1d_c0de);
    let v = &world.vocab;
    let y_ref = v.refusal_target();
    let (nl, f) = (model.config.num_layers, model.config.ffn_hidden_dim);
    let window = cfg.layers.window(nl);
    let k = mask_size(cfg.sparsity, window.len() * f)?;
    let step_cfg = cfg.step_config();
    let mut candidates: Vec<Vec<usize>> = world.forget.iter().map(|p| p.prompt.clone()).collect();

    let mut state = model.clone();
    let mut records = Vec::new();
    let mut last_mask = None;
    let mut streak = 0;
    let mut status = TrainStatus::MaxIterations;
    for it in 0..cfg.max_iterations as u64 {
        let t0 = Instant::now();
        let step = (|| -> Result<(ModelState, IterationRecord, Option<SparseMask>)> {
            let batch = step_buffer(buffer, &state, v, &step_cfg, it, &mut rng)?;
            let util = utility_sample(world, cfg.utility_batch, &mut rng);
            let (next, loss, mask, fallback) = if batch.skip() {
                let (lu, ug) = utility_grads(&state, &util)?;
                let empty = SparseMask::empty(nl, f, window);
                let next = state.masked_update(&Params::zeros(&state.config), &ug, &empty, cfg.eta, cfg.lambda)?;
                (next, LossBundle::new(0.0, 0.0, lu, cfg.beta, cfg.lambda), None, false)
            } else {
                let prompts = batch.prompts();
                let mask = match cfg.mask_source {
                    MaskSource::Flow => {
                        let jb = jailbreak_flow(&state, &prompts, v.sure, window)?;
                        let ut = utility_flow(&state, &util, window)?;
                        build_mask(&differential_flow(&jb, &ut)?, cfg.sparsity)?
                    }
                    MaskSource::Random => random_mask(nl, f, window, k, &mut rng)?,
                    MaskSource::Snip => {
                        let pairs: Vec<_> = prompts.iter().map(|p| (p.clone(), y_ref.clone())).collect();
                        build_mask(&snip_score(&state, &pairs, window)?, cfg.sparsity)?
                    }
                };
                candidates.shuffle(&mut rng);
                let anchor = compute_safety_anchor(&state, &candidates, v.refuse, it)?;
                let (bundle, rect, ug) = total_loss(&state, &prompts, &y_ref, &anchor, &util, cfg.beta, cfg.lambda)?;
                let next = state.masked_update(&rect, &ug, &mask, cfg.eta, cfg.lambda)?;
                (next, bundle, Some(mask), anchor.fallback)
            };
            if !loss.is_finite() || !next.params.all_finite() {
                return Err(JpuError::Numeric { layer: nl, what: "non-finite loss or parameters after update".into() });
            }
            let record = IterationRecord {
                iteration: it,
                parents: batch.parents.len(),
                offspring: batch.offspring.len(),
                loss,
                mask_size: mask.as_ref().map_or(0, SparseMask::count),
                buffer_refusal_rate: batch.sampled_refusal_rate,
                skipped: batch.skip(),
                anchor_fallback: fallback,
                wall_time: 0.0,
            };
            Ok((next, record, mask))
        })();
        let (next, mut record, mask) = match step {
            Ok(x) => x,
            Err(e) if is_numeric(&e) => {
                log::warn!("training diverged at iteration {it}: {e}");
                status = TrainStatus::Diverged { iteration: it, what: e.to_string() };
                break;
            }
            Err(e) => return Err(e),
        };
        record.wall_time = t0.elapsed().as_secs_f64();
        log::debug!("{}", record.line());
        state = next;
        if mask.is_some() {
            last_mask = mask;
        }
        let converged_now = record.buffer_refusal_rate >= cfg.convergence_rate;
        records.push(record);
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every as u64 == 0 {
                state.save_checkpoint(dir.join(format!("iter_{:05}.ckpt", it + 1)))?;
            }
        }
        streak = if converged_now { streak + 1 } else { 0 };
        if streak >= cfg.patience {
            status = TrainStatus::Converged { iteration: it };
            break;
        }
        if cfg.work_budget > 0 && work_units() - start_units >= cfg.work_budget {
            status = TrainStatus::BudgetSpent { iteration: it };
            break;
        }
    }
    Ok(TrainOutcome { model: state, records, status, last_mask, work_units: work_units() - start_units })
}
