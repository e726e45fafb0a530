//! Dataset manifest: which caption belongs to which image.
//!
//! Serialized as UTF-8 text, one `key=value` or record per line:
//!
//! ```text
//! split=test
//! captions_per_image=5
//! pair=<image_id>\t<caption_id>
//! ```
//!
//! Pair order is meaningful: evaluation matrices follow it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    split: String,
    captions_per_image: u32,
    /// (image_id, caption_id) in file order.
    pairs: Vec<(String, String)>,
    /// caption_id -> index into `pairs`. Caption ids are unique, so the
    /// caption -> image lookup is total over known captions.
    by_caption: BTreeMap<String, usize>,
    /// Unique image ids in first-appearance order.
    images: Vec<String>,
}

impl DatasetManifest {
    pub fn new(
        split: impl Into<String>,
        captions_per_image: u32,
        pairs: Vec<(String, String)>,
    ) -> Result<Self> {
        let split = split.into();
        if split.is_empty() || split.contains(['\n', '\t', '=']) {
            return Err(Error::config(format!("bad split name {split:?}")));
        }
        if captions_per_image == 0 {
            return Err(Error::config("captions_per_image must be positive"));
        }
        if pairs.is_empty() {
            return Err(Error::config("manifest has no pairs"));
        }
        let mut by_caption = BTreeMap::new();
        let mut images = Vec::new();
        let mut seen_images = BTreeMap::new();
        for (idx, (image_id, caption_id)) in pairs.iter().enumerate() {
            for id in [image_id, caption_id] {
                if id.is_empty() || id.contains(['\n', '\t']) {
                    return Err(Error::config(format!("bad id {id:?} in manifest pair")));
                }
            }
            if by_caption.insert(caption_id.clone(), idx).is_some() {
                return Err(Error::data(format!(
                    "caption {caption_id} appears twice in manifest"
                )));
            }
            if seen_images.insert(image_id.clone(), ()).is_none() {
                images.push(image_id.clone());
            }
        }
        let manifest = DatasetManifest {
            split,
            captions_per_image,
            pairs,
            by_caption,
            images,
        };
        for image in &manifest.images {
            let got = manifest.captions_of(image).len() as u32;
            if got != manifest.captions_per_image {
                return Err(Error::data(format!(
                    "image {image} has {got} captions, manifest declares {}",
                    manifest.captions_per_image
                )));
            }
        }
        Ok(manifest)
    }

    pub fn split(&self) -> &str {
        &self.split
    }

    pub fn captions_per_image(&self) -> u32 {
        self.captions_per_image
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    /// Unique image ids in first-appearance order.
    pub fn images(&self) -> &[String] {
        &self.images
    }

    /// Caption ids in pair order.
    pub fn captions(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|(_, c)| c.as_str())
    }

    /// The image a known caption belongs to.
    pub fn image_of(&self, caption_id: &str) -> Option<&str> {
        self.by_caption
            .get(caption_id)
            .map(|idx| self.pairs[*idx].0.as_str())
    }

    /// All captions of an image, in pair order.
    pub fn captions_of(&self, image_id: &str) -> Vec<&str> {
        self.pairs
            .iter()
            .filter(|(i, _)| i == image_id)
            .map(|(_, c)| c.as_str())
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("split={}\n", self.split));
        out.push_str(&format!("captions_per_image={}\n", self.captions_per_image));
        for (image_id, caption_id) in &self.pairs {
            out.push_str(&format!("pair={image_id}\t{caption_id}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut split = None;
        let mut captions_per_image = None;
        let mut pairs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::format(format!("manifest line {}: not key=value", lineno + 1))
            })?;
            match key {
                "split" => split = Some(value.to_string()),
                "captions_per_image" => {
                    let n = value.parse::<u32>().map_err(|_| {
                        Error::format(format!(
                            "manifest line {}: captions_per_image is not a number",
                            lineno + 1
                        ))
                    })?;
                    captions_per_image = Some(n);
                }
                "pair" => {
                    let (image_id, caption_id) = value.split_once('\t').ok_or_else(|| {
                        Error::format(format!(
                            "manifest line {}: pair needs image<TAB>caption",
                            lineno + 1
                        ))
                    })?;
                    pairs.push((image_id.to_string(), caption_id.to_string()));
                }
                other => {
                    return Err(Error::format(format!(
                        "manifest line {}: unknown key {other:?}",
                        lineno + 1
                    )))
                }
            }
        }
        let split = split.ok_or_else(|| Error::format("manifest missing split="))?;
        let cpi =
            captions_per_image.ok_or_else(|| Error::format("manifest missing captions_per_image="))?;
        DatasetManifest::new(split, cpi, pairs)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::format(format!("{}: cannot read manifest: {e}", path.display()))
        })?;
        Self::from_text(&text)
    }
}
