pub mod checkpoint;
pub mod codec;
pub mod conditioning;
pub mod dit;
pub mod eval;
pub mod error;
pub mod imageio;
pub mod model;
pub mod params;
pub mod synth;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
