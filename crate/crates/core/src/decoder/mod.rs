//! Iterative non-autoregressive decoding driven by a mask scheduling function,
//! and forward-pass accounting against one-token-per-pass generation.

mod decode;
mod schedule;

pub use decode::{
    count_forward_passes, iterative_decode, iterative_decode_batch, select_tokens, top_p_filter, CountingPredictor,
    DecodeOutput, DecodeState, ForwardPassCount, TokenPredictor,
};
pub use schedule::{gamma, tokens_to_mask, MaskSchedule, ScheduleKind, EXP_SHARPNESS};
