//! Decoder-only toy language model with hand-written reverse-mode
//! differentiation and per-neuron FFN instrumentation.
//!
//! Block layout (pre-norm):
//!
//! ```text
//! x += Wo . attn(rms(x))
//! x += Wdown^T . (silu(Wgate . rms(x)) * (Wup . rms(x)))
//! ```
//!
//! Arithmetic is `f64`; stored parameters are kept `f32`-representable.

mod attribute;
mod checkpoint;
mod config;
mod decode;
pub mod kernels;
mod net;
mod objective;
mod params;
mod update;
mod work;

pub use attribute::{Attribution, HiddenSnapshot, LayerTrace, SnapshotSource};
pub use checkpoint::{FORMAT_VERSION, MAGIC};
pub use config::ModelConfig;
pub use decode::argmax;
pub use net::{Backward, BackwardOptions, Intervention, ModelState, Seed, Trace};
pub use objective::{nll_from_trace, scoring_input};
pub use params::{FfnMatrix, Gradients, LayerParams, ParamRole, Params, TensorView};
pub use work::work_units;

/// `init_model`: validated, seeded construction.
pub fn init_model(config: ModelConfig) -> crate::Result<ModelState> {
    ModelState::new(config)
}
