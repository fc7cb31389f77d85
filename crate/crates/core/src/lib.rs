//! Data, graphs, models, objectives and training for denoising pre-training.

pub mod data;
pub mod graph;
pub mod model;
pub mod objectives;
pub mod oracle;
pub mod tat;
pub mod train;
