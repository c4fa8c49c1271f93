//! Reverse-mode training engine for quantized convolutional networks.

pub mod ops;
pub mod layers;
pub mod optim;
pub mod train;
