pub mod bands;
pub mod classes;
pub mod dataset;
pub mod evaluate;
pub mod imaging;
pub mod mapgen;
pub mod model;
pub mod raster;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod trainer;

pub use classes::{ClassLabel, NUM_CLASSES};
pub use scalar::Scalar;

pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type RasterGrid32 = raster::RasterGrid<f32>;
pub type RasterGrid64 = raster::RasterGrid<f64>;
pub type Stacks32 = bands::ModalityStacks<f32>;
pub type Stacks64 = bands::ModalityStacks<f64>;
