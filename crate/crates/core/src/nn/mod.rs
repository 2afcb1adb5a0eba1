//! Layers built on the tape: convolution, LeakyReLU, pooling/upsampling and
//! the convolutional GRU cell.

mod activation;
pub mod conv;
pub mod gru;
mod pool;

pub use conv::{ConvGeometry, ConvSpec};
pub use gru::GruParams;
