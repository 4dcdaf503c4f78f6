pub mod autodiff;
pub mod bslm;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod layers;
pub mod nmt;
pub mod optim;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use autodiff::{finite_diff_check, GradTable, Graph, ParamId, ParamStore, Var};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
