pub mod ccrm;
pub mod cli;
pub mod dataio;
pub mod encoders;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod mgcie;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{CfcmlError, Result};
pub use graph::{Graph, Var};
pub use tensor::Matrix;
