use super::net::ModelState;
use crate::error::{input_err, Result};

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl ModelState {
    /// Greedy continuation of `prompt`, at most `max_new` tokens and never
    /// past the context window.
    pub fn greedy_decode(&self, prompt: &[usize], max_new: usize) -> Result<Vec<usize>> {
        if prompt.is_empty() {
            return Err(input_err("empty prompt"));
        }
        self.check_tokens(prompt)?;
        let mut seq = prompt.to_vec();
        let mut out = Vec::with_capacity(max_new);
        while out.len() < max_new {
            let logits = self.forward(&seq)?;
            let v = self.config.vocab_size;
            let next = argmax(&logits[logits.len() - v..]);
            out.push(next);
            if seq.len() == self.config.max_seq_len {
                break;
            }
            seq.push(next);
        }
        Ok(out)
    }

    /// First greedy token after `prompt`.
    pub fn first_token(&self, prompt: &[usize]) -> Result<usize> {
        let logits = self.forward(prompt)?;
        let v = self.config.vocab_size;
        Ok(argmax(&logits[logits.len() - v..]))
    }
}
