//! The adaptive jailbreak buffer: lazily sampled seeds, refusal-loss
//! scoring, threshold filtering and homologous mutation.

mod mine;
mod mutate;
mod persist;

pub use mine::{filter_parents, refusal_loss, step_buffer, MiningMode, OnPolicyBatch, StepConfig};
pub use mutate::{mutate, mutate_with, mutation_alphabet, MutationKind, MutationRecord, MAX_MUTATION_ATTEMPTS};
pub use persist::{buffer_from_tsv, buffer_to_tsv};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{apply_template, AttackType, Template, World};
use crate::error::{config_err, Result};

pub const DEFAULT_BUFFER_SIZE: usize = 200;
/// Upper bound on the buffer, including provisional offspring.
pub const DEFAULT_BUFFER_CAP: usize = 400;
/// Iterations of halved sampling weight after an entry was refused.
pub const COOLDOWN_ITERATIONS: u32 = 5;

/// One buffer element `(T, Q, J, H)` plus mining bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct BufferEntry {
    pub template: Template,
    pub query: Vec<usize>,
    pub jailbreak_prompt: Vec<usize>,
    pub history: Vec<MutationRecord>,
    pub last_refusal_loss: Option<f64>,
    /// `J` was left-truncated to fit the context.
    pub truncated: bool,
    /// Mutation failed and this is a plain copy of its parent.
    pub unmutated: bool,
    /// Set on offspring written back provisionally: the parent's loss
    /// that this entry has to beat when it is next scored.
    pub pending_parent_loss: Option<f64>,
    pub cooldown: u32,
}

impl BufferEntry {
    /// Builds an entry with `J = T(Q)`, left-truncated to `max_prompt_len`.
    pub fn new(template: Template, query: Vec<usize>, max_prompt_len: usize) -> Result<Self> {
        let (jailbreak_prompt, truncated) = instantiate(&template, &query, max_prompt_len)?;
        Ok(Self {
            template,
            query,
            jailbreak_prompt,
            history: Vec::new(),
            last_refusal_loss: None,
            truncated,
            unmutated: false,
            pending_parent_loss: None,
            cooldown: 0,
        })
    }

    pub fn attack_type(&self) -> AttackType {
        self.template.attack_type
    }
}

/// `J` for `(T, Q)`: the template applied to the query as the template
/// presents it. Overlong prompts lose tokens from the left, prefix first.
pub(crate) fn instantiate(template: &Template, query: &[usize], max_len: usize) -> Result<(Vec<usize>, bool)> {
    let full = apply_template(template, &template.prepare_query(query), usize::MAX)?;
    if full.len() <= max_len {
        return Ok((full, false));
    }
    if max_len == 0 {
        return Err(config_err("context too small for any prompt"));
    }
    Ok((full[full.len() - max_len..].to_vec(), true))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Buffer {
    pub entries: Vec<BufferEntry>,
    pub initial_size: usize,
    pub cap: usize,
    pub max_prompt_len: usize,
}

impl Buffer {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn prompts(&self) -> Vec<Vec<usize>> {
        self.entries.iter().map(|e| e.jailbreak_prompt.clone()).collect()
    }
}

/// Options for [`init_buffer_with`].
#[derive(Debug, Clone, PartialEq)]
pub struct BufferInit {
    pub size: usize,
    pub cap: usize,
    /// Restrict the seeds to these attack types; `None` keeps all.
    pub attack_types: Option<Vec<AttackType>>,
    pub max_prompt_len: usize,
}

impl Default for BufferInit {
    fn default() -> Self {
        Self { size: DEFAULT_BUFFER_SIZE, cap: DEFAULT_BUFFER_CAP, attack_types: None, max_prompt_len: 62 }
    }
}

/// 200 pool templates, each instantiated on a harmful query drawn from the
/// held-out slice of D_f.
pub fn init_buffer(world: &World, seed: u64) -> Result<Buffer> {
    init_buffer_with(world, seed, &BufferInit::default())
}

pub fn init_buffer_with(world: &World, seed: u64, init: &BufferInit) -> Result<Buffer> {
    if world.templates.len() < init.size {
        return Err(config_err(format!("buffer needs {} templates, the pool has {}", init.size, world.templates.len())));
    }
    if init.cap < init.size {
        return Err(config_err("buffer cap is below its initial size"));
    }
    let queries = world.buffer_query_indices();
    if queries.is_empty() {
        return Err(config_err("no harmful queries available for the buffer"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb0ff_5eed);
    let mut entries = Vec::with_capacity(init.size);
    for t in &world.templates[..init.size] {
        let q = world.forget[queries[rng.gen_range(0..queries.len())]].query().to_vec();
        if init.attack_types.as_ref().is_none_or(|k| k.contains(&t.attack_type)) {
            entries.push(BufferEntry::new(t.clone(), q, init.max_prompt_len)?);
        }
    }
    if entries.is_empty() {
        return Err(config_err("attack-type filter leaves the buffer empty"));
    }
    let initial_size = entries.len();
    Ok(Buffer { entries, initial_size, cap: init.cap.max(initial_size), max_prompt_len: init.max_prompt_len })
}
