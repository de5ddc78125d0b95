//! Bird's-eye-view rasterization, the BEV feature encoder, and per-object
//! pooling.

mod encoder;
mod grid;
mod pool;
mod tensor;

pub use encoder::{
    encode, encode_backward, encode_with_cache, EncoderCache, EncoderParams, KERNEL,
};
pub use grid::{rasterize, GridSpec, INPUT_CHANNELS};
pub use pool::{
    footprint, pool_object, pool_object_backward, pool_object_backward_into, Footprint,
    ObjectFeature,
};
pub use tensor::Tensor3;

/// Rasterized network input, `H x W x 3`.
pub type InputGrid = Tensor3;
/// Encoder output, `H x W x d`.
pub type BevFeatures = Tensor3;
