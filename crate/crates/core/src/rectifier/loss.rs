use super::anchor::{cosine_distance, SafetyAnchor};
use crate::error::{contract_err, JpuError, Result};
use crate::lm::{nll_from_trace, scoring_input, Gradients, ModelState, Params, Seed};

/// Components of the per-iteration objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBundle {
    /// `L_h`: refusal-target NLL on the jailbreak batch.
    pub refusal: f64,
    /// `L_s`: cosine distance of the batch's hidden states to the anchor.
    pub anchor: f64,
    /// `L_u`: NLL on the utility batch.
    pub utility: f64,
    pub beta: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn new(refusal: f64, anchor: f64, utility: f64, beta: f64, lambda: f64) -> Self {
        Self { refusal, anchor, utility, beta, lambda, total: refusal + beta * anchor + lambda * utility }
    }

    pub fn is_finite(&self) -> bool {
        self.refusal.is_finite() && self.anchor.is_finite() && self.utility.is_finite() && self.total.is_finite()
    }
}

fn non_empty<T>(xs: &[T], what: &str) -> Result<()> {
    if xs.is_empty() {
        Err(contract_err(format!("{what} batch is empty")))
    } else {
        Ok(())
    }
}

/// Mean over prompts of the NLL of `y_ref`.
pub fn refusal_behavior_loss(model: &ModelState, prompts: &[Vec<usize>], y_ref: &[usize]) -> Result<f64> {
    non_empty(prompts, "jailbreak")?;
    let mut sum = 0.0;
    for p in prompts {
        sum += model.nll_loss(p, y_ref)?;
    }
    Ok(sum / prompts.len() as f64)
}

/// Mean over prompts of `1 - cos(H_curr(J), H_safe)`.
pub fn anchor_alignment_loss(model: &ModelState, prompts: &[Vec<usize>], anchor: &SafetyAnchor) -> Result<f64> {
    non_empty(prompts, "jailbreak")?;
    let mut sum = 0.0;
    for p in prompts {
        let h = model.hidden_snapshot(p)?;
        sum += cosine_distance(&h.vector, &anchor.centroid)?.0;
    }
    Ok(sum / prompts.len() as f64)
}

/// Loss and gradients of `L_h + beta * L_s` over the jailbreak prompts.
/// One pass per prompt serves both terms: the hidden state after `J` is the
/// same whether or not the target tokens follow it.
pub fn rectification_grads(
    model: &ModelState,
    prompts: &[Vec<usize>],
    y_ref: &[usize],
    anchor: Option<&SafetyAnchor>,
    beta: f64,
) -> Result<(f64, f64, Gradients)> {
    non_empty(prompts, "jailbreak")?;
    let n = prompts.len() as f64;
    let mut grads = Params::zeros(&model.config);
    let (mut lh, mut ls) = (0.0, 0.0);
    for p in prompts {
        if p.len() + y_ref.len() > model.config.max_seq_len {
            return Err(contract_err("jailbreak prompt does not leave room for the refusal target"));
        }
        let trace = model.run(&scoring_input(p, y_ref), &Default::default())?;
        let (loss, rows) = nll_from_trace(&trace, p.len(), y_ref, 1.0 / n);
        lh += loss;
        let mut hidden_rows = Vec::new();
        if let Some(a) = anchor {
            let (dist, g) = cosine_distance(trace.hidden_at(p.len() - 1), &a.centroid)?;
            ls += dist;
            if beta != 0.0 {
                hidden_rows.push((p.len() - 1, g.into_iter().map(|x| x * beta / n).collect()));
            }
        }
        model.backward_into(&trace, &Seed { logit_rows: rows, hidden_rows }, 0, Some(&mut grads));
    }
    Ok((lh / n, ls / n, grads))
}

/// Mean NLL over `pairs` and its gradient.
pub fn utility_grads(model: &ModelState, pairs: &[(Vec<usize>, Vec<usize>)]) -> Result<(f64, Gradients)> {
    non_empty(pairs, "utility")?;
    let w = 1.0 / pairs.len() as f64;
    let mut grads = Params::zeros(&model.config);
    let mut loss = 0.0;
    for (p, y) in pairs {
        loss += model.nll_accumulate(p, y, w, &mut grads)?;
    }
    Ok((loss * w, grads))
}

/// The full objective with its two gradient sets: `rect_grads` for
/// `L_h + beta * L_s` and `util_grads` for `L_u` (unweighted; `lambda` is
/// applied by the update).
pub fn total_loss(
    model: &ModelState,
    prompts: &[Vec<usize>],
    y_ref: &[usize],
    anchor: &SafetyAnchor,
    utility: &[(Vec<usize>, Vec<usize>)],
    beta: f64,
    lambda: f64,
) -> Result<(LossBundle, Gradients, Gradients)> {
    let (lh, ls, rect) = rectification_grads(model, prompts, y_ref, Some(anchor), beta)?;
    let (lu, util) = utility_grads(model, utility)?;
    let bundle = LossBundle::new(lh, ls, lu, beta, lambda);
    if !bundle.is_finite() {
        return Err(JpuError::Numeric { layer: model.config.num_layers, what: "non-finite loss".into() });
    }
    Ok((bundle, rect, util))
}

/// Static unlearning objective: refusal NLL on bare harmful prompts plus
/// `lambda` times NLL on retain pairs.
pub fn baseline_unlearn_loss(
    model: &ModelState,
    forget: &[Vec<usize>],
    retain: &[(Vec<usize>, Vec<usize>)],
    y_ref: &[usize],
    lambda: f64,
) -> Result<f64> {
    non_empty(retain, "retain")?;
    let lh = refusal_behavior_loss(model, forget, y_ref)?;
    let mut lu = 0.0;
    for (p, y) in retain {
        lu += model.nll_loss(p, y)?;
    }
    Ok(lh + lambda * lu / retain.len() as f64)
}

/// [`baseline_unlearn_loss`] with its full-parameter gradient.
pub fn baseline_unlearn_grads(
    model: &ModelState,
    forget: &[Vec<usize>],
    retain: &[(Vec<usize>, Vec<usize>)],
    y_ref: &[usize],
    lambda: f64,
) -> Result<(f64, Gradients)> {
    let (lh, _, mut grads) = rectification_grads(model, forget, y_ref, None, 0.0)?;
    let (lu, ug) = utility_grads(model, retain)?;
    grads.add_scaled(&ug, lambda);
    let total = lh + lambda * lu;
    if !total.is_finite() {
        return Err(JpuError::Numeric { layer: model.config.num_layers, what: "non-finite baseline loss".into() });
    }
    Ok((total, grads))
}
