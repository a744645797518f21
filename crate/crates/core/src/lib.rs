//! Sequence alignment losses for weakly-correlated video/text pairs.

pub mod augment;
pub mod dtw;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod loss;
pub mod matrix;
pub mod s2dtw;
pub mod seqcore;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::Matrix;
