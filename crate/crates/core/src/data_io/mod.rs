//! Feature and label ingestion, on-disk formats and the synthetic dataset
//! generator.

mod features;
mod manifest;
mod synth;

use std::collections::BTreeSet;

pub use features::{
    read_features, read_features_text, write_features, FeatureSequence, DEFAULT_FPS,
    DEFAULT_FRAMES_PER_SEGMENT, FEATURE_MAGIC, FEATURE_VERSION,
};
pub use manifest::{
    parse_manifest, read_manifest, Dataset, DatasetManifest, LabeledVideo, ManifestEntry,
};
pub use synth::{generate_synthetic, SynthConfig, SyntheticDataset, SyntheticVideo};

/// Video-level supervision: the set of class indices present in a video.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct VideoLabelSet(BTreeSet<usize>);

impl VideoLabelSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, class: usize) -> bool {
        self.0.insert(class)
    }

    pub fn contains(&self, class: usize) -> bool {
        self.0.contains(&class)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    /// `y_c ∈ {0, 1}` for `c` in `0..num_classes`.
    pub fn indicator(&self, num_classes: usize) -> Vec<bool> {
        (0..num_classes).map(|c| self.contains(c)).collect()
    }
}

impl FromIterator<usize> for VideoLabelSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}
