//! Skeleton sequences, the on-disk corpus format, temporal crop/resize views
//! and a synthetic action corpus generator.

mod augment;
mod corpus;
mod format;
mod synthetic;

pub use augment::{crop_and_resize, test_view, training_view, TEST_CROP_PROPORTION};
pub use corpus::{load_corpus, load_corpus_with, Corpus, ManifestEntry, SplitRule, MANIFEST_FILE, SPLIT_FILE};
pub use format::{read_manifest, read_sequence, write_manifest, write_sequence};
pub use synthetic::{generate_synthetic_corpus, ClassSignature, SequenceDraws, SyntheticCorpus, SyntheticCorpusConfig};

use crate::error::{Error, Result};
use crate::numerics::DenseArray;

/// A T×V×C array of joint coordinates with optional labels for split
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSequence {
    pub id: String,
    pub frames: DenseArray,
    pub label: Option<usize>,
    pub subject: Option<u32>,
    pub view: Option<u32>,
}

impl SkeletonSequence {
    pub fn new(id: impl Into<String>, frames: DenseArray) -> Result<Self> {
        validate_frames(&frames)?;
        Ok(Self {
            id: id.into(),
            frames,
            label: None,
            subject: None,
            view: None,
        })
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn num_joints(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.frames.shape()[2]
    }
}

pub(crate) fn validate_frames(frames: &DenseArray) -> Result<()> {
    match frames.shape() {
        [t, v, c] if *t >= 1 && *v >= 1 && *c >= 1 => {}
        other => {
            return Err(Error::Data(format!(
                "skeleton sequence must be T×V×C with positive extents, got {other:?}"
            )))
        }
    }
    if !frames.is_finite() {
        return Err(Error::Data("skeleton sequence contains non-finite coordinates".into()));
    }
    Ok(())
}
