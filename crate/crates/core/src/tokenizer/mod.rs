//! Per-frame discrete autoencoder: convolutional encoder, nearest-neighbour
//! codebook quantization with a straight-through gradient, and decoder.

mod codebook;
mod model;
mod train;

pub use codebook::Codebook;
pub use model::{vq_losses, FrameTokens, TokenizerConfig, TokenizerModel, VqLosses};
pub use train::{train_tokenizer, TokenizerReport, TokenizerTrainConfig};
