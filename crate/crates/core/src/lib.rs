pub mod bounds;
pub mod config;
pub mod covariance;
pub mod error;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod pruner;
pub mod spectral;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{Activation, Layer, LayerKind, Network, Shape};
pub use numerics::{Matrix, SymmetricSpectrum};
