//! Early time-series classification with dual enhancement, soft shapelet
//! sparsification and a mixture-of-experts / Inception fusion head, built
//! on a small reverse-mode autodiff engine.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod dualpath;
pub mod enhancement;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod shapelet;
pub mod tensor;
pub mod topk;
pub mod training;
pub mod verify;

pub use autodiff::{Graph, Var};
pub use config::RunConfig;
pub use data::{MetricsReport, SeriesBatch, SynthConfig};
pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use params::{ParamGroup, VarGroup};
pub use tensor::Tensor;
