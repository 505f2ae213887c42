//! Token-level losses and their logit-space gradient seeds.

use super::kernels::log_softmax;
use super::net::{BackwardOptions, ModelState, Seed, Trace};
use super::params::Gradients;
use crate::error::{input_err, Result};

/// The sequence actually fed to the model when scoring `target` after
/// `prompt`: the last target token is never an input.
pub fn scoring_input(prompt: &[usize], target: &[usize]) -> Vec<usize> {
    let mut seq = Vec::with_capacity(prompt.len() + target.len());
    seq.extend_from_slice(prompt);
    seq.extend_from_slice(&target[..target.len().saturating_sub(1)]);
    seq
}

pub(crate) fn check_pair(model: &ModelState, prompt: &[usize], target: &[usize]) -> Result<()> {
    if prompt.is_empty() {
        return Err(input_err("empty prompt"));
    }
    if target.is_empty() {
        return Err(input_err("empty target"));
    }
    if prompt.len() + target.len() > model.config.max_seq_len {
        return Err(input_err(format!(
            "prompt ({}) + target ({}) exceeds context {}",
            prompt.len(),
            target.len(),
            model.config.max_seq_len
        )));
    }
    Ok(())
}

/// Mean NLL of `target` given a trace over [`scoring_input`], plus the
/// logit-gradient rows of `weight * loss`.
pub fn nll_from_trace(trace: &Trace, prompt_len: usize, target: &[usize], weight: f64) -> (f64, Vec<(usize, Vec<f64>)>) {
    let m = target.len() as f64;
    let mut loss = 0.0;
    let mut rows = Vec::with_capacity(target.len());
    for (j, &tok) in target.iter().enumerate() {
        let pos = prompt_len - 1 + j;
        let lp = log_softmax(trace.logits_at(pos));
        loss -= lp[tok];
        if weight != 0.0 {
            let mut g: Vec<f64> = lp.iter().map(|&l| l.exp() * weight / m).collect();
            g[tok] -= weight / m;
            rows.push((pos, g));
        }
    }
    (loss / m, rows)
}

impl ModelState {
    /// Mean per-target-token negative log-likelihood.
    pub fn nll_loss(&self, prompt: &[usize], target: &[usize]) -> Result<f64> {
        check_pair(self, prompt, target)?;
        let trace = self.run(&scoring_input(prompt, target), &Default::default())?;
        Ok(nll_from_trace(&trace, prompt.len(), target, 0.0).0)
    }

    /// Loss and parameter gradients of `weight * nll_loss`.
    pub fn nll_loss_grad(&self, prompt: &[usize], target: &[usize], weight: f64) -> Result<(f64, Gradients)> {
        check_pair(self, prompt, target)?;
        let trace = self.run(&scoring_input(prompt, target), &Default::default())?;
        let (loss, rows) = nll_from_trace(&trace, prompt.len(), target, weight);
        let bw = self.backward(&trace, &Seed { logit_rows: rows, hidden_rows: Vec::new() }, BackwardOptions::default());
        Ok((loss, bw.grads.expect("param grads requested")))
    }
}

impl ModelState {
    /// Adds the gradient of `weight * nll_loss` into `grads`; returns the
    /// unweighted loss.
    pub fn nll_accumulate(&self, prompt: &[usize], target: &[usize], weight: f64, grads: &mut Gradients) -> Result<f64> {
        check_pair(self, prompt, target)?;
        let trace = self.run(&scoring_input(prompt, target), &Default::default())?;
        let (loss, rows) = nll_from_trace(&trace, prompt.len(), target, weight);
        self.backward_into(&trace, &Seed { logit_rows: rows, hidden_rows: Vec::new() }, 0, Some(grads));
        Ok(loss)
    }
}
