//! Masked motion prediction for self-supervised 3D skeleton action
//! representation learning.

pub mod data;
pub mod error;
pub mod harness;
pub mod masking;
pub mod model;
pub mod numerics;
pub mod report;

pub use data::{Corpus, SkeletonSequence};
pub use error::{Error, Result};
pub use masking::{MaskPlan, Padding};
pub use model::{ArchConfig, Checkpoint, ModelParams, Stream};
pub use numerics::DenseArray;
