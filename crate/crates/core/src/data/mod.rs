//! Data containers and dataset plumbing.
//!
//! A dataset is a set of images, each described by a fixed number of
//! region feature vectors, plus captions tied to images by a manifest.
//! Captions are token-id sequences framed by start/end sentinels.

mod features;
mod manifest;
mod synthetic;

pub use features::{load_features, write_features, FeatureReader};
pub use manifest::DatasetManifest;
pub use synthetic::{
    concept_table, generate_synthetic, nearest_concept, token_features, SyntheticSpec, MAX_VOCAB,
};

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Token id of the start sentinel every sentence opens with.
pub const START_TOKEN: u32 = 0;
/// Token id of the end sentinel every sentence closes with.
pub const END_TOKEN: u32 = 1;
/// First token id available for content words.
pub const FIRST_CONTENT_TOKEN: u32 = 2;

/// Region features of one image: `k` rows of `d_raw` channels.
///
/// Invariants enforced at construction: at least one region, all values
/// finite, no all-zero row (rows feed cosine denominators downstream).
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSet {
    image_id: String,
    features: Array2<f32>,
}

impl RegionSet {
    pub fn new(image_id: impl Into<String>, features: Array2<f32>) -> Result<Self> {
        let image_id = image_id.into();
        if features.nrows() == 0 || features.ncols() == 0 {
            return Err(Error::data(format!(
                "region set {image_id}: empty feature matrix"
            )));
        }
        for (i, row) in features.outer_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::data(format!(
                    "region set {image_id}: non-finite value in region {i}"
                )));
            }
            if row.iter().all(|v| *v == 0.0) {
                return Err(Error::data(format!(
                    "region set {image_id}: region {i} is all-zero"
                )));
            }
        }
        Ok(RegionSet { image_id, features })
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    /// Number of regions.
    pub fn k(&self) -> usize {
        self.features.nrows()
    }

    /// Raw feature dimension.
    pub fn d_raw(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> ArrayView2<'_, f32> {
        self.features.view()
    }

    /// Features widened to f64, the precision all pipeline math runs in.
    pub fn features_f64(&self) -> Array2<f64> {
        self.features.mapv(|v| v as f64)
    }

    /// Relabel, keeping features. Used when ids come from a manifest
    /// rather than from the feature file (which stores none).
    pub fn with_image_id(mut self, image_id: impl Into<String>) -> Self {
        self.image_id = image_id.into();
        self
    }
}

/// One caption: a token-id sequence including both sentinels, plus
/// optional per-token tags used to group diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceSet {
    caption_id: String,
    image_id: String,
    token_ids: Vec<u32>,
    token_tags: Option<Vec<String>>,
}

impl SentenceSet {
    pub fn new(
        caption_id: impl Into<String>,
        image_id: impl Into<String>,
        token_ids: Vec<u32>,
        vocab_size: u32,
        token_tags: Option<Vec<String>>,
    ) -> Result<Self> {
        let caption_id = caption_id.into();
        let image_id = image_id.into();
        if token_ids.len() < 3 {
            return Err(Error::data(format!(
                "sentence {caption_id}: needs at least one content token between sentinels"
            )));
        }
        if token_ids[0] != START_TOKEN {
            return Err(Error::data(format!(
                "sentence {caption_id}: does not open with the start sentinel"
            )));
        }
        if *token_ids.last().unwrap() != END_TOKEN {
            return Err(Error::data(format!(
                "sentence {caption_id}: does not close with the end sentinel"
            )));
        }
        if let Some(bad) = token_ids.iter().find(|id| **id >= vocab_size) {
            return Err(Error::data(format!(
                "sentence {caption_id}: token id {bad} outside vocabulary of size {vocab_size}"
            )));
        }
        if let Some(tags) = &token_tags {
            if tags.len() != token_ids.len() {
                return Err(Error::data(format!(
                    "sentence {caption_id}: {} tags for {} tokens",
                    tags.len(),
                    token_ids.len()
                )));
            }
        }
        Ok(SentenceSet {
            caption_id,
            image_id,
            token_ids,
            token_tags,
        })
    }

    pub fn caption_id(&self) -> &str {
        &self.caption_id
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    /// All token ids, sentinels included.
    pub fn token_ids(&self) -> &[u32] {
        &self.token_ids
    }

    /// Sequence length including sentinels.
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    /// Content length, sentinels excluded.
    pub fn content_len(&self) -> usize {
        self.token_ids.len() - 2
    }

    pub fn is_empty(&self) -> bool {
        false // construction guarantees at least three tokens
    }

    pub fn token_tags(&self) -> Option<&[String]> {
        self.token_tags.as_deref()
    }
}
