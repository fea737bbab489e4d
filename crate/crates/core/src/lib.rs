//! Single-stage open-set domain adaptation for cross-scene hyperspectral
//! classification.
//!
//! The pipeline trains an attention-based spectral/spatial encoder on a
//! labeled source scene while pulling its spectral and spatial features
//! toward an unlabeled target scene with separate MMD terms. At inference a
//! second, frozen encoder of the same architecture provides a reference
//! embedding; the squared cosine agreement between the two embeddings is
//! modelled with a 1-D Gaussian mixture and samples in the highest-mean
//! component are rejected as unknown.

pub mod alignment;
pub mod data;
pub mod encoder;
pub mod error;
pub mod heap;
pub mod map;
pub mod metrics;
pub mod nn;
pub mod openset;
pub mod pipeline;
pub mod rng;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
