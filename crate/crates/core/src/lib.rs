pub mod config;
pub mod datapipe;
pub mod diffgraph;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod layers;
pub mod models;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
