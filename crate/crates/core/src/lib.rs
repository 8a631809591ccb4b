//! Multi-resolution neural materials.
//!
//! A material maps a surface position, a Gaussian footprint radius and a
//! pair of directions to RGB reflectance through a neural texture pyramid,
//! an optional learned UV offset and a small decoder network. The crate
//! also contains a heightfield-based reference generator for training data,
//! the trainer, and a small CPU renderer.

pub mod datagen;
pub mod error;
pub mod evaluate;
pub mod image;
pub mod io;
pub mod material;
pub mod mlp;
pub mod offset;
pub mod pyramid;
pub mod render;
pub mod scalar;
pub mod texture;
pub mod trainer;

pub use error::{Error, FormatError, Result};
pub use io::{load_material, save_material};
pub use material::{sample_outgoing, MbtfMaterial, ModelShape, Query};
pub use mlp::Mlp;
pub use offset::{Direction, OffsetModule};
pub use pyramid::{level_of_detail, KernelSize, NeuralPyramid};
pub use scalar::Real;
pub use texture::{FeatureTexture, Uv};

/// Single-precision material, the on-disk representation.
pub type Material = MbtfMaterial<f32>;
pub type Material64 = MbtfMaterial<f64>;
pub type Texture = FeatureTexture<f32>;
pub type Pyramid = NeuralPyramid<f32>;
pub type Network = Mlp<f32>;
