//! Single-block Universal Transformer with memory tokens and adaptive
//! computation time, plus the micro-Sudoku data and training loop.

pub mod act;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod model;
pub mod params;
pub mod run;
pub mod sudoku;
pub mod train;

pub use config::{ActConfig, DataConfig, ModelConfig, RunConfig, TrainConfig};
pub use error::{Result, UtmError};
pub use params::ModelParams;
