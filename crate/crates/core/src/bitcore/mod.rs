//! Bit-packed ±1 tensors and exact XNOR-popcount arithmetic.
//!
//! Activations are packed along the channel axis (channels-last lanes),
//! filters along their input-channel axis, so an im2col row is a plain
//! concatenation of per-tap lanes and a GEMM row is a run of words.
//! All kernels are integer-only and deterministic.

mod analysis;
mod conv;
mod dot;
mod tensor;

pub use analysis::{speedup_ratio, LayerDims};
pub use conv::{
    binary_conv2d, im2col, output_len, pack_filters, packed_gemm, ConvGeometry, IntTensor,
    PackedColumns, PadValue,
};
pub use dot::{and_popcount_dot, fixed_point_dot, xnor_popcount_dot};
pub use tensor::{BitTensor, Encoding, Lane};
