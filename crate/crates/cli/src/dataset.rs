//! A data directory on disk: region features, caption token features,
//! the pairing manifest, and optional token tags.
//!
//! `gen-synthetic` writes one of these; `train` and `eval` read them.
//! Feature files carry matrices only, so identities and pairing come
//! from the manifest: `regions.xmrf` rows follow `manifest.images()`
//! order and `captions.xmrf` rows follow `manifest.pairs()` order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use ndarray::Array2;
use xmatch_core::data::{load_features, DatasetManifest, SentenceSet};
use xmatch_core::Error;

pub const REGIONS_FILE: &str = "regions.xmrf";
pub const CAPTIONS_FILE: &str = "captions.xmrf";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const TAGS_FILE: &str = "tags.txt";

pub struct Dataset {
    pub manifest: DatasetManifest,
    /// One matrix per image, in `manifest.images()` order.
    pub image_features: Vec<Array2<f64>>,
    /// One matrix per caption, in `manifest.pairs()` order.
    pub caption_features: Vec<Array2<f64>>,
    /// Token tags by caption id, when `tags.txt` is present.
    pub tags: Option<BTreeMap<String, Vec<String>>>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::read(&dir.join(MANIFEST_FILE))
            .with_context(|| format!("reading {}", dir.join(MANIFEST_FILE).display()))?;
        let regions = load_features(&dir.join(REGIONS_FILE))
            .with_context(|| format!("reading {}", dir.join(REGIONS_FILE).display()))?;
        let captions = load_features(&dir.join(CAPTIONS_FILE))
            .with_context(|| format!("reading {}", dir.join(CAPTIONS_FILE).display()))?;
        if regions.len() != manifest.images().len() {
            return Err(Error::data(format!(
                "{} region sets for {} manifest images",
                regions.len(),
                manifest.images().len()
            ))
            .into());
        }
        if captions.len() != manifest.pairs().len() {
            return Err(Error::data(format!(
                "{} caption feature sets for {} manifest pairs",
                captions.len(),
                manifest.pairs().len()
            ))
            .into());
        }
        let image_features: Vec<Array2<f64>> = regions.iter().map(|r| r.features_f64()).collect();
        let caption_features: Vec<Array2<f64>> = captions.iter().map(|c| c.features_f64()).collect();

        let tags_path = dir.join(TAGS_FILE);
        let tags = if tags_path.exists() {
            Some(read_tags(&tags_path)?)
        } else {
            None
        };

        Ok(Dataset {
            manifest,
            image_features,
            caption_features,
            tags,
        })
    }

    /// Shared feature width of both sides.
    pub fn feature_dim(&self) -> Result<usize> {
        let d = self.image_features[0].ncols();
        if let Some(c) = self.caption_features.iter().find(|c| c.ncols() != d) {
            return Err(Error::data(format!(
                "caption features are {} wide but region features are {d} wide",
                c.ncols()
            ))
            .into());
        }
        Ok(d)
    }

    /// Row index into `image_features` for each image id.
    pub fn image_index(&self) -> BTreeMap<&str, usize> {
        self.manifest
            .images()
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect()
    }

    /// For each caption (in pair order), the row of its paired image.
    pub fn paired_image_rows(&self) -> Vec<usize> {
        let index = self.image_index();
        self.manifest
            .pairs()
            .iter()
            .map(|(img, _)| index[img.as_str()])
            .collect()
    }

    /// Parallel (image, caption) feature lists with pair `i` matching
    /// pair `i`, as the trainer expects. Images paired with several
    /// captions are repeated.
    pub fn training_pairs(&self) -> (Vec<Array2<f64>>, Vec<Array2<f64>>) {
        let rows = self.paired_image_rows();
        let images = rows
            .iter()
            .map(|&r| self.image_features[r].clone())
            .collect();
        (images, self.caption_features.clone())
    }

    /// Token tags for each caption in pair order; errors when the tag
    /// table is absent or misses a caption.
    pub fn tags_in_pair_order(&self) -> Result<Vec<Vec<String>>> {
        let table = self.tags.as_ref().ok_or_else(|| {
            Error::data(format!("no {TAGS_FILE} next to the features; diagnostics need token tags"))
        })?;
        let mut out = Vec::with_capacity(self.manifest.pairs().len());
        for (_, caption_id) in self.manifest.pairs() {
            let tags = table.get(caption_id).ok_or_else(|| {
                Error::data(format!("{TAGS_FILE} has no entry for caption {caption_id}"))
            })?;
            out.push(tags.clone());
        }
        Ok(out)
    }
}

/// Read a tag table: one `caption_id<TAB>tag,tag,...` line per caption.
pub fn read_tags(path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, tags) = line.split_once('\t').ok_or_else(|| {
            Error::format(format!(
                "{} line {}: expected caption_id<TAB>tags",
                path.display(),
                lineno + 1
            ))
        })?;
        let tags: Vec<String> = tags.split(',').map(|t| t.to_string()).collect();
        if out.insert(id.to_string(), tags).is_some() {
            return Err(Error::format(format!(
                "{} line {}: duplicate caption id {id:?}",
                path.display(),
                lineno + 1
            ))
            .into());
        }
    }
    Ok(out)
}

/// Write the tag table for generated sentences.
pub fn write_tags(path: &Path, sentences: &[SentenceSet]) -> Result<()> {
    let mut out = String::new();
    for s in sentences {
        let tags = s.token_tags().ok_or_else(|| {
            Error::data(format!("sentence {} carries no token tags", s.caption_id()))
        })?;
        out.push_str(s.caption_id());
        out.push('\t');
        out.push_str(&tags.join(","));
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tag_table_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(TAGS_FILE);
        let sentences = vec![
            SentenceSet::new(
                "c0",
                "i0",
                vec![0, 2, 1],
                4,
                Some(vec!["<start>".into(), "content".into(), "<end>".into()]),
            )
            .unwrap(),
            SentenceSet::new(
                "c1",
                "i1",
                vec![0, 3, 1],
                4,
                Some(vec!["<start>".into(), "content".into(), "<end>".into()]),
            )
            .unwrap(),
        ];
        write_tags(&path, &sentences).unwrap();
        let table = read_tags(&path).unwrap();
        assert_eq!(table.len(), 2);
        assert_eq!(
            table["c0"],
            vec!["<start>".to_string(), "content".into(), "<end>".into()]
        );
    }

    #[test]
    fn tag_lines_without_tab_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(TAGS_FILE);
        fs::write(&path, "c0 content\n").unwrap();
        let err = read_tags(&path).unwrap_err();
        assert!(err.to_string().contains("TAB"));
    }
}
