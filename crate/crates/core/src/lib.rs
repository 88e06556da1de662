//! Phase recognition for cataract surgery workflows.
//!
//! The pipeline runs downstream of an image backbone: per-frame tool
//! presence vectors (21 classes) or precomputed feature vectors feed a
//! multi-label tool head and LSTM/GRU phase classifiers over 14 surgical
//! phases. A Markov-chain workflow simulator produces desk-scale datasets
//! with known ground truth so that training and evaluation are verifiable
//! without the original videos.

pub mod checkpoint;
pub mod dataio;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod optim;
pub mod pipeline;
pub mod recurrent;
pub mod simgen;

pub use error::{Error, Result};
pub use numerics::{DenseLayer, Matrix};

/// Number of tool classes annotated per frame.
pub const NUM_TOOLS: usize = 21;
/// Number of surgical phase classes.
pub const NUM_PHASES: usize = 14;
