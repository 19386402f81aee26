pub mod attention;
pub mod checkpoint;
pub mod error;
pub mod frontline;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod patches;
pub mod raster;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, Variant};
pub use tensor::{FeatureMap, Real};
