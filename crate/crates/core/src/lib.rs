//! Deep cross-scale fusion network for single-image rain removal.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`tape`]), the layers the network needs ([`nn`]), the network itself
//! ([`model`]), SSIM/PSNR ([`metrics`]), training ([`train`]) and file
//! formats ([`io`]).

pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Element, Shape, Tensor};
