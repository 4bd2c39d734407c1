//! Dual-scale navigation model: encoders, pretraining objectives and the
//! fine-tuned agent, built on a small reverse-mode autodiff engine.

// dense kernels index rows and columns the way the math is written
#![allow(clippy::needless_range_loop)]

pub mod agent;
pub mod checkpoint;
pub mod config;
pub mod encoders;
pub mod error;
pub mod forward;
pub mod graph;
pub mod params;
pub mod pretrain;
pub mod state;
pub mod tensor;

pub use config::{Config, EncoderConfig, FinetuneConfig, MapConfig, PretrainConfig, PseudoLabel};
pub use encoders::{CellInputs, Model, NodeInputs};
pub use error::{ModelError, Result};
pub use graph::{Graph, MulCount, Var};
pub use params::{AdamW, Grads, ParamId, ParamStore, Schedule};
pub use tensor::Mat;
