pub mod attention;
pub mod audio;
pub mod autograd;
pub mod bench;
pub mod checkpoint;
pub mod chunker;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
mod kernels;
pub mod model;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
pub use model::{build_model, Manner, ModelConfig, Variant};
pub use nn::{Ctx, ParameterTree};
pub use checkpoint::Checkpoint;
pub use config::RunConfig;
