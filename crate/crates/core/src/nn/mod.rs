//! Learned building blocks and their parameter storage.

mod blocks;
mod layers;
mod params;
mod skm;

pub use blocks::{DepthRb, Fusion, LocalContext};
pub use layers::{leaky, Conv, Deconv, LEAKY_SLOPE};
pub use params::{ParamBuilder, ParamId, ParamStore};
pub use skm::{Skm, SkmLayers};
