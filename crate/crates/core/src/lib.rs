//! Fixed-basis coefficient-to-coefficient operator learning.
//!
//! Input and output functions are encoded as coefficients in fixed bases
//! (random-feature or finite-element), and a one-hidden-layer network is
//! trained to map input coefficients to output coefficients under the
//! relative L2 loss of the reconstructed output functions.

pub mod basis;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod io;
pub mod linalg;
pub mod neuralop;
pub mod rng;

pub use error::{Error, ErrorKind, Result, Stage};
