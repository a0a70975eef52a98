//! Knowledge-base question answering with aspect-attention ranking.

pub mod autodiff;
pub mod candidates;
pub mod dataset;
pub mod kb;
pub mod model;
pub mod par;
pub mod templates;
pub mod metrics;
pub mod synth;
pub mod train;
pub mod export;
