//! 3D nearby sparse attention and a desk-scale 3D transformer encoder-decoder.
//!
//! Modules, bottom-up:
//!
//! - [`tensor`]: dense `f64` matrices, rank-4 grids and a reverse-mode tape.
//! - [`codec`]: codebook quantisation, the VQ objective with straight-through
//!   gradients, and builders for text, image, video and sketch representations.
//! - [`attention`]: coordinate projection, nearby neighbourhoods, attention masks
//!   (nearby, axial, block, full), gathered sparse attention and its dense oracle.
//! - [`model`]: positional tables, encoder, causal decoder, output head, sampling.
//! - [`train`]: the three-task objective, Adam and the toy training loop.
//! - [`bench`]: exact pair counts, complexity formulas and timing.
//! - [`io`]: the `N3DT`, `N3TG` and `N3CK` binary formats, PGM and CSV writers.

pub mod attention;
pub mod bench;
pub mod codec;
pub mod error;
pub mod io;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Dims3, Matrix, Tensor4};
