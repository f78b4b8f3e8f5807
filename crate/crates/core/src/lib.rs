//! Single-sketch 3D modeling: a template mesh is deformed to match the
//! silhouette implied by a binary sketch, supervised through a
//! differentiable silhouette renderer and regularized adversarially by
//! rendering the shape from randomly sampled viewpoints.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod evalkit;
pub mod geometry;
pub mod losses;
pub mod networks;
pub mod pipeline;
pub mod rasterizer;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
