//! Masked visual modeling: variable-ratio masking of future-frame tokens and
//! the training loop minimizing the masked-token negative log-likelihood.

mod corpus;
mod mask;
mod train;

pub use corpus::{tokenize_dataset, TokenCorpus};
pub use mask::{mask_count, sample_mask, MaskMode, MaskPlan};
pub use train::{
    apply_plan, context_grid, eval_plan, future_positions, masked_nll, mvm_loss, train, Conditioning, MetricRow,
    TrainConfig, TrainReport, METRICS_HEADER,
};
