//! Bidirectional transformer over token videos with alternating spatial and
//! spatiotemporal window attention.

mod attention;
mod config;
mod grid;
mod transformer;

pub use attention::{Linear, WindowAttention};
pub use config::{Geometry, ModelConfig, Window};
pub use grid::TokenGrid;
pub use transformer::{Block, Dropout, FeedForward, MaskVit, Norm};
