//! The seeded graph neural network: positional embedding, weighted
//! attentional aggregation, and the pooling → filtering → unpooling
//! processing unit, stacked into the two-stage forward pass.

pub mod net;
pub mod weights;

pub use net::{
    att_generic, attentional_pooling, attentional_unpooling, embed_generic, embed_positions,
    forward, forward_generic, seed_filtering, unit_forward_generic, weighted_attention, AttnRole,
    AttnShape, ForwardConfig, ForwardOutput, InlierScores, PhaseTimings, StagedForward,
};
pub use weights::{AttentionIds, LinearIds, MlpIds, ModelLayout, ModelShape, ModelWeights, UnitIds};
