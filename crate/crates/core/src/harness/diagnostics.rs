use crate::corpus::{AttackType, World};
use crate::error::Result;
use crate::lm::ModelState;
use crate::pathfinder::{build_mask, flow_scores, layerwise_iou, FlowRecord, FlowSource, LayerWindow, SparseMask};

/// Per-layer selection fraction for path-overlap masks.
pub const IOU_SPARSITY: f64 = 0.1;

/// The last quarter of the layers (rounded up, at least one).
pub fn final_quarter(num_layers: usize) -> LayerWindow {
    let n = num_layers.div_ceil(4).max(1);
    LayerWindow { start: num_layers - n, end: num_layers - 1 }
}

/// Top-`p` neurons of each layer by sink flow, selected layer by layer.
pub fn path_mask(model: &ModelState, prompts: &[Vec<usize>], sink: usize, p: f64) -> Result<SparseMask> {
    let nl = model.config.num_layers;
    let flow = flow_scores(model, prompts, sink, LayerWindow::all(nl), FlowSource::Jailbreak)?;
    let mut mask = SparseMask::empty(nl, model.config.ffn_hidden_dim, flow.window);
    mask.sparsity_p = p;
    for l in 0..nl {
        let single = FlowRecord {
            scores: vec![flow.layer(l).to_vec()],
            source: flow.source,
            window: LayerWindow { start: l, end: l },
            num_layers: nl,
        };
        let m = build_mask(&single, p)?;
        mask.bits[l] = m.bits[l].clone();
    }
    Ok(mask)
}

/// Layer-wise IoU between the paths of templated attacks (of one type, or
/// all) and of the bare evaluation queries, both traced to the SURE sink.
pub fn iou_curve(model: &ModelState, world: &World, kind: Option<AttackType>) -> Result<Vec<f64>> {
    let sure = world.vocab.sure;
    let jb = path_mask(model, &world.attack_prompts(kind), sure, IOU_SPARSITY)?;
    let direct = path_mask(model, &world.direct_harm_probes(), sure, IOU_SPARSITY)?;
    layerwise_iou(&jb, &direct)
}
