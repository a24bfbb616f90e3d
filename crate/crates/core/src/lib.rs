pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod graph;
pub mod layers;
pub mod models;
pub mod optim;
pub mod revision;
pub mod training;

pub use autodiff::{DenseMatrix, SparseMatrix, Tape, Var};
pub use error::{Error, Result};
