use super::net::ModelState;
use super::params::{Gradients, ParamRole};
use crate::error::{contract_err, Result};
use crate::pathfinder::SparseMask;

impl ModelState {
    /// One soft update: `theta - eta * (rect * mask + lambda * util)`.
    ///
    /// The mask scopes the rectification gradient to the gate, up and down
    /// rows of masked FFN neurons; everything else sees only the utility
    /// term. Results are rounded to `f32`.
    pub fn masked_update(
        &self,
        rect_grads: &Gradients,
        util_grads: &Gradients,
        mask: &SparseMask,
        eta: f64,
        lambda: f64,
    ) -> Result<ModelState> {
        if !self.params.same_layout(rect_grads) || !self.params.same_layout(util_grads) {
            return Err(contract_err("gradient layout does not match parameters"));
        }
        let f = self.config.ffn_hidden_dim;
        let d = self.config.embed_dim;
        if mask.bits.len() != self.config.num_layers || mask.bits.iter().any(|l| l.len() != f) {
            return Err(contract_err("mask dimensions do not match the FFN layout"));
        }
        let mut next = self.clone();
        let rect = rect_grads.tensors();
        let util = util_grads.tensors();
        for ((dst, r), u) in next.params.tensors_mut().into_iter().zip(&rect).zip(&util) {
            match (dst.role, dst.layer) {
                (ParamRole::Ffn(_), Some(l)) => {
                    for (i, row) in dst.data.chunks_mut(d).enumerate() {
                        let masked = mask.bits[l][i];
                        let off = i * d;
                        for (j, w) in row.iter_mut().enumerate() {
                            let step = if masked { r.data[off + j] + lambda * u.data[off + j] } else { lambda * u.data[off + j] };
                            *w = (*w - eta * step) as f32 as f64;
                        }
                    }
                }
                _ => {
                    for (w, g) in dst.data.iter_mut().zip(u.data) {
                        *w = (*w - eta * (lambda * g)) as f32 as f64;
                    }
                }
            }
        }
        next.step_counter += 1;
        Ok(next)
    }

    /// Unmasked gradient step, `theta - eta * grads`, rounded to `f32`.
    pub fn sgd_step(&self, grads: &Gradients, eta: f64) -> Result<ModelState> {
        if !self.params.same_layout(grads) {
            return Err(contract_err("gradient layout does not match parameters"));
        }
        let mut next = self.clone();
        for (dst, g) in next.params.tensors_mut().into_iter().zip(grads.tensors()) {
            for (w, gv) in dst.data.iter_mut().zip(g.data) {
                *w = (*w - eta * gv) as f32 as f64;
            }
        }
        next.step_counter += 1;
        Ok(next)
    }
}
