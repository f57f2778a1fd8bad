// Index loops read closer to the math in the numeric kernels.
#![allow(clippy::needless_range_loop)]

pub mod diagnostics;
pub mod dsp;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod trainer;
pub mod transfer;

pub use error::{Error, ErrorKind, Result};
