//! Few-shot texture image generation: cross-attention fusion of a base
//! exemplar with reference exemplars, modulated layer normalization driven
//! by per-reference control weights, adversarial training, and a low-data
//! classification harness over the generated images.

pub mod checkpoint;
pub mod classify;
pub mod cli;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ppm;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;
