//! Depth-selectivity dissection and interpretable training for small
//! monocular depth estimation networks.
//!
//! The crate is `no_std` + `alloc`. File formats, the CLI and anything touching
//! the filesystem live in the `depth-dissect` companion crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod bins;
pub mod dissect;
pub mod error;
pub mod eval;
pub mod graph;
pub mod kernels;
pub mod net;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Reduction, Var};
pub use tensor::{Scalar, Shape, Tensor};
