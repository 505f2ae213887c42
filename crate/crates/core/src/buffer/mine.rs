use std::collections::BTreeSet;

use rand::seq::index::sample_weighted;
use rand::Rng;

use super::mutate::mutate;
use super::{Buffer, BufferEntry, COOLDOWN_ITERATIONS};
use crate::corpus::Vocab;
use crate::error::{config_err, contract_err, Result};
use crate::lm::ModelState;

/// Whether mining evolves the buffer or replays it as a fixed set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MiningMode {
    OnPolicy,
    Static,
}

impl MiningMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::OnPolicy => "on_policy",
            Self::Static => "static",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "on_policy" | "dynamic" => Ok(Self::OnPolicy),
            "static" => Ok(Self::Static),
            _ => Err(config_err(format!("unknown mining mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepConfig {
    pub batch_size: usize,
    pub threshold: f64,
    pub offspring_per_parent: usize,
    pub mode: MiningMode,
}

impl Default for StepConfig {
    fn default() -> Self {
        Self { batch_size: 16, threshold: 0.5, offspring_per_parent: 1, mode: MiningMode::OnPolicy }
    }
}

/// `B_t`: the parents that still beat the refusal threshold and their
/// offspring.
#[derive(Debug, Clone, PartialEq)]
pub struct OnPolicyBatch {
    pub iteration: u64,
    pub parents: Vec<BufferEntry>,
    pub offspring: Vec<BufferEntry>,
    /// Number of buffer entries sampled and scored.
    pub sampled: usize,
    /// Share of the sampled entries whose loss was at or below threshold.
    pub sampled_refusal_rate: f64,
}

impl OnPolicyBatch {
    /// No parents survived: the rectification step should be skipped.
    pub fn skip(&self) -> bool {
        self.parents.is_empty()
    }

    pub fn len(&self) -> usize {
        self.parents.len() + self.offspring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every jailbreak prompt in the batch, parents first.
    pub fn prompts(&self) -> Vec<Vec<usize>> {
        self.parents.iter().chain(&self.offspring).map(|e| e.jailbreak_prompt.clone()).collect()
    }
}

/// Mean per-token NLL of `y_ref` after `J`, cached on the entry.
pub fn refusal_loss(model: &ModelState, entry: &mut BufferEntry, y_ref: &[usize]) -> Result<f64> {
    let loss = model.nll_loss(&entry.jailbreak_prompt, y_ref)?;
    entry.last_refusal_loss = Some(loss);
    Ok(loss)
}

/// Entries whose cached loss is strictly above `threshold`.
pub fn filter_parents(scored: &[BufferEntry], threshold: f64) -> Result<Vec<BufferEntry>> {
    let mut parents = Vec::new();
    for e in scored {
        let loss = e.last_refusal_loss.ok_or_else(|| contract_err("filter_parents on an unscored entry"))?;
        if loss > threshold {
            parents.push(e.clone());
        }
    }
    Ok(parents)
}

/// One mining round: sample, score, filter, mutate, write back.
///
/// Sampling is without replacement, with half weight for entries refused
/// within the last few iterations. Offspring join the buffer provisionally
/// (while it is below its cap) and, when next scored, either stay, taking
/// the place of the weakest entry of their attack type, or are dropped if
/// they do not beat their parent's loss.
pub fn step_buffer<R: Rng>(
    buffer: &mut Buffer,
    model: &ModelState,
    vocab: &Vocab,
    cfg: &StepConfig,
    iteration: u64,
    rng: &mut R,
) -> Result<OnPolicyBatch> {
    if cfg.batch_size == 0 || cfg.batch_size > buffer.len() {
        return Err(contract_err(format!("mining batch of {} from a buffer of {}", cfg.batch_size, buffer.len())));
    }
    for e in &mut buffer.entries {
        e.cooldown = e.cooldown.saturating_sub(1);
    }
    let weights: Vec<f64> = buffer.entries.iter().map(|e| if e.cooldown > 0 { 0.5 } else { 1.0 }).collect();
    let mut picked = sample_weighted(rng, buffer.len(), |i| weights[i], cfg.batch_size)
        .map_err(|e| contract_err(format!("buffer sampling failed: {e}")))?
        .into_vec();
    picked.sort_unstable();

    let y_ref = vocab.refusal_target();
    let mut refused = 0usize;
    let mut removals = BTreeSet::new();
    let mut parents = Vec::new();
    for &i in &picked {
        let loss = refusal_loss(model, &mut buffer.entries[i], &y_ref)?;
        let pending = buffer.entries[i].pending_parent_loss.take();
        if !loss.is_finite() {
            return Err(crate::JpuError::Numeric { layer: model.config.num_layers, what: "refusal loss".into() });
        }
        if loss <= cfg.threshold {
            refused += 1;
            buffer.entries[i].cooldown = COOLDOWN_ITERATIONS;
        } else {
            parents.push(buffer.entries[i].clone());
        }
        if let Some(pp) = pending {
            if loss > pp {
                let kind = buffer.entries[i].attack_type();
                let victim = buffer
                    .entries
                    .iter()
                    .enumerate()
                    .filter(|(j, e)| {
                        *j != i
                            && !removals.contains(j)
                            && e.attack_type() == kind
                            && e.pending_parent_loss.is_none()
                            && e.last_refusal_loss.is_some()
                    })
                    .min_by(|(_, a), (_, b)| a.last_refusal_loss.unwrap().total_cmp(&b.last_refusal_loss.unwrap()))
                    .map(|(j, _)| j);
                if let Some(j) = victim {
                    removals.insert(j);
                }
            } else {
                removals.insert(i);
            }
        }
    }
    for &j in removals.iter().rev() {
        buffer.entries.remove(j);
    }

    let mut offspring = Vec::new();
    if cfg.mode == MiningMode::OnPolicy {
        for p in &parents {
            let parent_loss = p.last_refusal_loss.expect("parents are scored");
            for _ in 0..cfg.offspring_per_parent {
                let child = mutate(p, vocab, iteration, buffer.max_prompt_len, rng)?;
                if child.unmutated {
                    continue;
                }
                if buffer.len() < buffer.cap {
                    let mut provisional = child.clone();
                    provisional.pending_parent_loss = Some(parent_loss);
                    buffer.entries.push(provisional);
                }
                offspring.push(child);
            }
        }
    }
    Ok(OnPolicyBatch { iteration, parents, offspring, sampled: picked.len(), sampled_refusal_rate: refused as f64 / picked.len() as f64 })
}
