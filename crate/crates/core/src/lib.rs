// Argument checks are written `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod evalkit;
pub mod evstream;
pub mod frame;
pub mod losses;
pub mod net;
pub mod seed;
pub mod semantics;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
