//! Cross-modal contrastive pre-training of an IMU encoder against frozen
//! video/text anchor embeddings, with retrieval and activity-recognition
//! evaluation.

// `!(x > 0.0)` is how parameters reject NaN along with non-positive values,
// and the kernels index several parallel buffers per loop.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

mod binio;
pub mod cli;
pub mod contrastive;
pub mod encoder;
pub mod error;
pub mod evaluate;
pub mod signal;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
