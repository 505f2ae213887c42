//! The synthetic world: token space, labeled pairs, jailbreak templates and
//! the recipe that turns a random model into a "safety-aligned" one.

mod pretrain;
mod serialize;
mod vocab;
mod world;

pub use pretrain::{pretrain_base, PremiseReport, PretrainConfig, Pretrained};
pub use serialize::{parse_tokens, world_from_tsv, world_to_tsv, write_tokens};
pub use vocab::Vocab;
pub use world::{apply_template, AttackPrompt, AttackType, Label, LabeledPair, Template, World, WorldSizes, MAX_QUERY_LEN};

/// `build_world(seed, sizes)`.
pub fn build_world(seed: u64, sizes: &WorldSizes) -> crate::Result<World> {
    World::build(seed, sizes)
}
