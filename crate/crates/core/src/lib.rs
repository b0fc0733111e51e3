//! Competing ratio loss (CRL) and its baseline family (CEL, BCE, CCE, NLLR),
//! with a small deterministic harness for training and evaluating
//! classifiers against them.

pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod models;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
pub use losses::{LossKind, LossSpec};
pub use models::{build_model, Architecture, Model, Preset};
pub use tensor::Tensor;
pub use optim::{fit, EpochLog, OptimSpec};
