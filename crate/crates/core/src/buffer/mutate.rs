use std::fmt;

use rand::Rng;

use super::{instantiate, BufferEntry};
use crate::corpus::{AttackType, Vocab, MAX_QUERY_LEN};
use crate::error::{input_err, Result};

pub const MAX_MUTATION_ATTEMPTS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MutationKind {
    Substitute,
    Insert,
    Delete,
}

impl MutationKind {
    pub const ALL: [MutationKind; 3] = [MutationKind::Substitute, MutationKind::Insert, MutationKind::Delete];

    pub fn name(self) -> &'static str {
        match self {
            Self::Substitute => "substitute",
            Self::Insert => "insert",
            Self::Delete => "delete",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "substitute" => Ok(Self::Substitute),
            "insert" => Ok(Self::Insert),
            "delete" => Ok(Self::Delete),
            _ => Err(input_err(format!("unknown mutation kind {s:?}"))),
        }
    }
}

/// One edit of a query. For deletions `token` is the removed token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MutationRecord {
    pub kind: MutationKind,
    pub position: usize,
    pub token: usize,
    pub iteration: u64,
}

impl fmt::Display for MutationRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}:{}", self.kind.name(), self.position, self.token, self.iteration)
    }
}

impl MutationRecord {
    /// Applies the edit to `query`, checking bounds.
    pub fn apply(&self, query: &[usize]) -> Result<Vec<usize>> {
        let mut q = query.to_vec();
        match self.kind {
            MutationKind::Substitute if self.position < q.len() => q[self.position] = self.token,
            MutationKind::Insert if self.position <= q.len() => q.insert(self.position, self.token),
            MutationKind::Delete if self.position < q.len() => {
                q.remove(self.position);
            }
            _ => return Err(input_err(format!("mutation {self} out of bounds for a query of {}", q.len()))),
        }
        Ok(q)
    }
}

/// Tokens a mutation may write into a query of the given attack type:
/// harm and context words plus that type's own wrapper vocabulary.
pub fn mutation_alphabet(vocab: &Vocab, kind: AttackType) -> Vec<usize> {
    let own = match kind {
        AttackType::A => vocab.wrap_a.clone(),
        AttackType::B => vocab.wrap_b.clone(),
        AttackType::C => vocab.suffix_c.clone(),
    };
    vocab.harm.clone().chain(vocab.context.clone()).chain(own).collect()
}

fn propose<R: Rng>(query: &[usize], kind: MutationKind, alphabet: &[usize], iteration: u64, rng: &mut R) -> Option<MutationRecord> {
    let n = query.len();
    let (position, token) = match kind {
        MutationKind::Substitute => {
            let pos = rng.gen_range(0..n);
            let tok = alphabet[rng.gen_range(0..alphabet.len())];
            if tok == query[pos] {
                return None;
            }
            (pos, tok)
        }
        MutationKind::Insert => {
            if n >= MAX_QUERY_LEN {
                return None;
            }
            (rng.gen_range(0..=n), alphabet[rng.gen_range(0..alphabet.len())])
        }
        MutationKind::Delete => {
            if n <= 1 {
                return None;
            }
            let pos = rng.gen_range(0..n);
            (pos, query[pos])
        }
    };
    Some(MutationRecord { kind, position, token, iteration })
}

/// One homologous mutation of `parent.query`; see [`mutate_with`].
pub fn mutate<R: Rng>(parent: &BufferEntry, vocab: &Vocab, iteration: u64, max_prompt_len: usize, rng: &mut R) -> Result<BufferEntry> {
    mutate_with(parent, vocab, None, iteration, max_prompt_len, rng)
}

/// Draws up to [`MAX_MUTATION_ATTEMPTS`] edits (of `kind` if given) and
/// applies the first one that keeps a HARM token in the query. When none
/// does, returns a copy of the parent flagged `unmutated`.
pub fn mutate_with<R: Rng>(
    parent: &BufferEntry,
    vocab: &Vocab,
    kind: Option<MutationKind>,
    iteration: u64,
    max_prompt_len: usize,
    rng: &mut R,
) -> Result<BufferEntry> {
    let alphabet = mutation_alphabet(vocab, parent.attack_type());
    for _ in 0..MAX_MUTATION_ATTEMPTS {
        let k = kind.unwrap_or_else(|| MutationKind::ALL[rng.gen_range(0..3)]);
        let Some(rec) = propose(&parent.query, k, &alphabet, iteration, rng) else {
            continue;
        };
        let query = rec.apply(&parent.query)?;
        if vocab.harm_count(&query) == 0 {
            continue;
        }
        let (jailbreak_prompt, truncated) = instantiate(&parent.template, &query, max_prompt_len)?;
        let mut history = parent.history.clone();
        history.push(rec);
        return Ok(BufferEntry {
            template: parent.template.clone(),
            query,
            jailbreak_prompt,
            history,
            last_refusal_loss: None,
            truncated,
            unmutated: false,
            pending_parent_loss: None,
            cooldown: 0,
        });
    }
    let mut clone = parent.clone();
    clone.unmutated = true;
    clone.last_refusal_loss = None;
    clone.pending_parent_loss = None;
    clone.cooldown = 0;
    Ok(clone)
}
