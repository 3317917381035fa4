//! Convolutional network engine for two-class satellite damage assessment.
//!
//! The crate is self-contained: tensors, layers, optimization, data loading,
//! training, and checkpointing are all implemented here. The only external
//! decode path is the `image` crate for JPEG/PNG/PPM input.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod optim;
pub mod reference;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use layers::{ConvSpec, Layer, Mode};
pub use model::{ArchId, BuildFlags, Model, NetPlan};
pub use tensor::{Elem, Shape, Tensor};
