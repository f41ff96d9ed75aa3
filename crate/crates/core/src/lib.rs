pub mod absorption;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod streaming;
pub mod tensor;
pub mod tokenizer;

pub use autograd::{Graph, Normalization, Var};
pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
