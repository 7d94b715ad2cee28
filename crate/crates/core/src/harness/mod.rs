pub mod config;
pub mod dump;
pub mod eval;
pub mod metrics;
pub mod synth;
