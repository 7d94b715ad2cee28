//! Fixtures shared by the benchmarks.

use vidmask_core::model::{MaskVit, ModelConfig, TokenGrid, Window};
use vidmask_core::Generator;

/// Randomly initialised model over `frames × grid × grid` tokens.
pub fn model(frames: usize, grid: usize, embed_dim: usize) -> MaskVit {
    let config = ModelConfig {
        embed_dim,
        heads: 4,
        ff_dim: 4 * embed_dim,
        blocks: 2,
        frames,
        grid_height: grid,
        grid_width: grid,
        spatial_window: Window::new(1, grid, grid),
        st_window: Window::new(frames, 4, 4),
        dropout: 0.0,
        codebook_size: 256,
        action_dim: 0,
    };
    MaskVit::new(config, &mut Generator::new(7)).expect("bench model")
}

/// Grid with `context` random frames and the rest masked.
pub fn context_grid(model: &MaskVit, context: usize, seed: u64) -> TokenGrid {
    let cfg = model.config();
    let mut gen = Generator::new(seed);
    let tokens: Vec<usize> = (0..context * cfg.grid_height * cfg.grid_width)
        .map(|_| gen.below(cfg.codebook_size))
        .collect();
    TokenGrid::with_masked_future(cfg.geometry(), cfg.codebook_size, context, false, &tokens).expect("bench grid")
}
