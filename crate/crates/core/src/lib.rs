pub mod baselines;
pub mod checkpoint;
pub mod continual;
pub mod data_io;
pub mod ensemble;
pub mod error;
pub mod gradcheck;
pub mod optimizer;
pub mod rng;
pub mod runlog;
pub mod soft_knn;
pub mod types;

pub use error::{DeeError, Result};
