pub mod bootstrap;
pub mod dataset;
pub mod dgp;
pub mod error;
pub mod glmm;
pub mod net;
pub mod netgen;
pub mod optim;
pub mod rng;
pub mod sampler;
pub mod study;
pub mod weights;

pub use error::{Error, Result};
