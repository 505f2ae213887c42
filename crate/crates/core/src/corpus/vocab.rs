use std::ops::Range;

use crate::error::{config_err, Result};

/// The synthetic token space. Ids are laid out in fixed contiguous blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    pub size: usize,
    pub bos: usize,
    pub eos: usize,
    pub refuse: usize,
    pub sure: usize,
    pub harm: Range<usize>,
    pub benign: Range<usize>,
    /// Shared, label-neutral context words.
    pub context: Range<usize>,
    /// Wrapper tokens of type A templates.
    pub wrap_a: Range<usize>,
    /// Wrapper tokens of type B templates.
    pub wrap_b: Range<usize>,
    /// Suffix tokens of type C templates.
    pub suffix_c: Range<usize>,
    /// Tokens of ordinary (non-refusal, non-harmful) responses.
    pub response: Range<usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self {
            size: 64,
            bos: 0,
            eos: 1,
            refuse: 2,
            sure: 3,
            harm: 4..12,
            benign: 12..20,
            context: 20..32,
            wrap_a: 32..38,
            wrap_b: 38..44,
            suffix_c: 44..54,
            response: 54..64,
        }
    }
}

impl Vocab {
    pub fn for_size(size: usize) -> Result<Self> {
        let v = Vocab::default();
        if size != v.size {
            return Err(config_err(format!("the synthetic world needs a vocabulary of {}, got {size}", v.size)));
        }
        Ok(v)
    }

    pub fn is_harm(&self, t: usize) -> bool {
        self.harm.contains(&t)
    }

    pub fn is_benign(&self, t: usize) -> bool {
        self.benign.contains(&t)
    }

    pub fn harm_count(&self, seq: &[usize]) -> usize {
        seq.iter().filter(|&&t| self.is_harm(t)).count()
    }

    /// `y_ref`: the fixed refusal target.
    pub fn refusal_target(&self) -> Vec<usize> {
        vec![self.refuse, self.eos]
    }

    /// `y_f` for a harmful query: SURE, then the query's first and last
    /// HARM tokens as payload.
    pub fn harmful_response(&self, query: &[usize]) -> Vec<usize> {
        let mut harm = query.iter().copied().filter(|&t| self.is_harm(t));
        let first = harm.next().unwrap_or(self.harm.start);
        let last = harm.next_back().unwrap_or(first);
        vec![self.sure, first, last, self.eos]
    }

    /// Ordinary answer to a non-harmful query: two response tokens keyed
    /// by the first and last content tokens.
    pub fn general_response(&self, query: &[usize]) -> Vec<usize> {
        let key = |t: usize| self.response.start + (t * 7) % self.response.len();
        let content: Vec<usize> =
            query.iter().copied().filter(|&t| self.is_benign(t) || self.context.contains(&t) || self.is_harm(t)).collect();
        let first = content.first().copied().unwrap_or(self.bos);
        let last = content.last().copied().unwrap_or(self.bos);
        vec![key(first), key(last), self.eos]
    }

    /// Ids of the special tokens, for the disjointness invariant.
    pub fn specials(&self) -> [usize; 4] {
        [self.bos, self.eos, self.refuse, self.sure]
    }
}
