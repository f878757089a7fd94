//! Sequential sentence encoders with latent chunk detection, plus LSTM,
//! BLSTM and Tree-LSTM baselines, the task heads that consume them, and the
//! training, checkpointing and visualization machinery around them.

pub mod cells;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod model;
pub mod optim;
pub mod params;
pub mod run;
pub mod synthetic;
pub mod tensor;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tensor::{Graph, Tensor, Var};
