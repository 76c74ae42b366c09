//! Deterministic CNN engine: tensors, layers, a model graph, seeded training,
//! Grad-CAM and reproducibility tooling. Every float32 result is bit-exact
//! across runs and thread counts.

pub mod data;
pub mod error;
pub mod gradcam;
pub mod graph;
pub mod harness;
pub mod layers;
pub mod real;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod weights;
pub mod zoo;

pub use error::{Error, Result};
pub use graph::{GraphBuilder, ModelGraph};
pub use rng::DetRng;
pub use tensor::{Shape, Tensor};
