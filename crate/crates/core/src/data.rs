//! In-memory training data. `TrainImages` deliberately carries no labels:
//! poisoning targets unlabeled data, and the training path is firewalled
//! from the manifest's bookkeeping label field by construction.

use std::path::Path;

use image::RgbImage;

use crate::error::{Error, Result};
use crate::imgproc::load_rgb8;
use crate::manifest::{clean_twin_relpath, DatasetManifest};

/// Decoded training images keyed by manifest order. No label field exists
/// here; the probe side uses `LabeledImages` instead.
pub struct TrainImages {
    pub ids: Vec<String>,
    pub images: Vec<RgbImage>,
    /// Clean twins for poisoned entries, when materialized.
    pub clean_twins: Vec<Option<RgbImage>>,
    pub is_poisoned: Vec<bool>,
    pub manifest_hash: String,
}

impl TrainImages {
    pub fn load(manifest: &DatasetManifest, root: &Path) -> Result<TrainImages> {
        manifest.validate()?;
        let mut ids = Vec::with_capacity(manifest.entries.len());
        let mut images = Vec::with_capacity(manifest.entries.len());
        let mut clean_twins = Vec::with_capacity(manifest.entries.len());
        let mut is_poisoned = Vec::with_capacity(manifest.entries.len());
        for entry in &manifest.entries {
            let img = load_rgb8(&root.join(&entry.relative_path))?;
            let twin = if entry.is_poisoned {
                let twin_path = root.join(clean_twin_relpath(entry));
                if twin_path.exists() {
                    Some(load_rgb8(&twin_path)?)
                } else {
                    None
                }
            } else {
                None
            };
            ids.push(entry.image_id.clone());
            images.push(img);
            clean_twins.push(twin);
            is_poisoned.push(entry.is_poisoned);
        }
        Ok(TrainImages {
            ids,
            images,
            clean_twins,
            is_poisoned,
            manifest_hash: manifest.content_hash(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Images plus labels, for the probe/eval side only.
pub struct LabeledImages {
    pub ids: Vec<String>,
    pub images: Vec<RgbImage>,
    pub labels: Vec<usize>,
    pub classes: Vec<String>,
    pub manifest_hash: String,
}

impl LabeledImages {
    pub fn load(manifest: &DatasetManifest, root: &Path) -> Result<LabeledImages> {
        manifest.validate()?;
        let mut ids = Vec::with_capacity(manifest.entries.len());
        let mut images = Vec::with_capacity(manifest.entries.len());
        let mut labels = Vec::with_capacity(manifest.entries.len());
        for entry in &manifest.entries {
            ids.push(entry.image_id.clone());
            images.push(load_rgb8(&root.join(&entry.relative_path))?);
            labels.push(entry.label);
        }
        Ok(LabeledImages {
            ids,
            images,
            labels,
            classes: manifest.classes.clone(),
            manifest_hash: manifest.content_hash(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Refuse any manifest that carries poisoned entries. Used by the probe's
/// labeled-subset loader and the distillation data path.
pub fn assert_clean(manifest: &DatasetManifest, context: &str) -> Result<()> {
    let poisoned = manifest.poisoned_ids();
    if !poisoned.is_empty() {
        let sample: Vec<_> = poisoned.iter().take(5).cloned().collect();
        return Err(Error::Data(format!(
            "{context} requires clean data but {} poisoned entries are present (e.g. {})",
            poisoned.len(),
            sample.join(", ")
        )));
    }
    Ok(())
}
