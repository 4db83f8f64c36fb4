pub mod ablation;
pub mod attack;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod models;
pub mod optim;
pub mod pipeline;
pub mod pretrain;
pub mod report;
pub mod seed;
pub mod tensor;
pub mod timing;

pub use error::{Error, Result};
