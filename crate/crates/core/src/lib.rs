pub mod attention;
pub mod cli;
pub mod diff;
pub mod error;
pub mod io;
pub mod linalg;
pub mod loss;
pub mod manifold;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod params;
pub mod selfcheck;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
