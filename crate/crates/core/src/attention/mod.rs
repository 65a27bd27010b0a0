//! Prompts, token alignment, attention editing and the toy transformer backend.

pub mod control;
pub mod prompt;
pub mod toy;

pub use control::{
    edit_cross_attention, edit_cross_map, edit_self_attention, edit_self_map,
    inject_cross_columns, AttentionMaps, ControlSchedule, LayerAttention, TauDirection,
};
pub use prompt::{compute_alignment, tokenize, word_id, AlignmentMap, Prompt, Tokenizer};
pub use toy::{AttentionHook, AttentionKind, AttentionSite, ToyDenoiser, ToyDenoiserConfig};
