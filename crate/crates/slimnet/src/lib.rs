pub mod error;
pub mod evaluator;
pub mod factorization;
pub mod report;
pub mod selector;
pub mod flops;
pub mod fusion;
pub mod model;
pub mod serialize;
pub mod svd;
pub mod tensor;

pub use error::{Error, Result};
