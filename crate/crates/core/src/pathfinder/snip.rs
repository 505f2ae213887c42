use super::{FlowRecord, FlowSource, LayerWindow};
use crate::error::{contract_err, Result};
use crate::lm::{Gradients, ModelState, Params};

/// SNIP saliency per FFN neuron: mean over the neuron's outgoing row of
/// `|w * dL/dw|`, where `L` is the mean response NLL over `pairs`.
pub fn snip_score(model: &ModelState, pairs: &[(Vec<usize>, Vec<usize>)], window: LayerWindow) -> Result<FlowRecord> {
    if pairs.is_empty() {
        return Err(contract_err("SNIP requires a non-empty batch"));
    }
    let mut grads: Gradients = Params::zeros(&model.config);
    let w = 1.0 / pairs.len() as f64;
    for (prompt, response) in pairs {
        model.nll_accumulate(prompt, response, w, &mut grads)?;
    }
    Ok(snip_from_grads(model, &grads, window))
}

/// SNIP saliency from precomputed parameter gradients.
pub fn snip_from_grads(model: &ModelState, grads: &Gradients, window: LayerWindow) -> FlowRecord {
    let d = model.config.embed_dim;
    let scores = window
        .layers()
        .map(|l| {
            let w = &model.params.layers[l].w_down;
            let g = &grads.layers[l].w_down;
            w.chunks(d).zip(g.chunks(d)).map(|(wr, gr)| wr.iter().zip(gr).map(|(a, b)| (a * b).abs()).sum::<f64>() / d as f64).collect()
        })
        .collect();
    FlowRecord { scores, source: FlowSource::Snip, window, num_layers: model.config.num_layers }
}
