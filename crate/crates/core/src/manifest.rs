//! Dataset manifests: the authoritative record of every image, its split,
//! bookkeeping label, and poison state.
//!
//! A manifest is built once by scanning a class-per-subdirectory folder and
//! is immutable afterwards; poisoning operations return new manifests.
//! Serialization is canonical JSON with a stable field order, so the content
//! hash of a manifest is reproducible and downstream artifacts can pin it.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgproc::read_dimensions;
use crate::trigger::{PlacementRecord, TriggerSpec};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub relative_path: String,
    /// Class index for probe/eval bookkeeping only. The SSL training path
    /// never reads it.
    pub label: usize,
    pub split: Split,
    pub width: u32,
    pub height: u32,
    pub is_poisoned: bool,
    pub placement: Option<PlacementRecord>,
    pub trigger_id: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub dataset_name: String,
    pub split: Split,
    /// Ordered class names; entry labels index into this list.
    pub classes: Vec<String>,
    /// The trigger used by poisoned entries, if any.
    pub trigger: Option<TriggerSpec>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn class_index(&self, name: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Config(format!("unknown class '{name}'")))
    }

    pub fn poisoned_count(&self) -> usize {
        self.entries.iter().filter(|e| e.is_poisoned).count()
    }

    pub fn poisoned_ids(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| e.is_poisoned)
            .map(|e| e.image_id.clone())
            .collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.classes.len()];
        for e in &self.entries {
            counts[e.label] += 1;
        }
        counts
    }

    /// Structural invariants: unique ids, poison flags consistent with
    /// placement/trigger fields, in-bounds placements.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(&e.image_id) {
                return Err(Error::Data(format!("duplicate image_id {}", e.image_id)));
            }
            if e.label >= self.classes.len() {
                return Err(Error::Data(format!(
                    "entry {} has label {} outside the {}-class list",
                    e.image_id,
                    e.label,
                    self.classes.len()
                )));
            }
            if e.split != self.split {
                return Err(Error::Data(format!(
                    "entry {} has split {} in a {} manifest",
                    e.image_id, e.split, self.split
                )));
            }
            if e.is_poisoned {
                let placement = e.placement.ok_or_else(|| {
                    Error::Data(format!("poisoned entry {} lacks a placement", e.image_id))
                })?;
                if e.trigger_id.is_none() {
                    return Err(Error::Data(format!(
                        "poisoned entry {} lacks a trigger_id",
                        e.image_id
                    )));
                }
                let trigger = self.trigger.as_ref().ok_or_else(|| {
                    Error::Data("manifest has poisoned entries but no trigger record".into())
                })?;
                let p = trigger.patch_size;
                if placement.x + p > e.width || placement.y + p > e.height {
                    return Err(Error::Placement {
                        image_id: e.image_id.clone(),
                        x: placement.x,
                        y: placement.y,
                        width: e.width,
                        height: e.height,
                        patch_size: p,
                    });
                }
            } else if e.placement.is_some() || e.trigger_id.is_some() {
                return Err(Error::Data(format!(
                    "clean entry {} carries placement or trigger fields",
                    e.image_id
                )));
            }
        }
        Ok(())
    }

    /// Hash of the canonical JSON serialization, prefixed with the scheme.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("manifest serialization cannot fail");
        crate::rng::sha256_hex(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = ManifestFile {
            content_hash: self.content_hash(),
            manifest: self.clone(),
        };
        let json = serde_json::to_string_pretty(&file).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let file: ManifestFile =
            serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))?;
        let stored = file.content_hash;
        let actual = file.manifest.content_hash();
        if stored != actual {
            return Err(Error::Provenance(format!(
                "manifest {} content hash mismatch: file says {stored}, content is {actual}",
                path.display()
            )));
        }
        file.manifest.validate()?;
        Ok(file.manifest)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFile {
    content_hash: String,
    manifest: DatasetManifest,
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
        Some(ref ext) if ["png", "jpg", "jpeg", "bmp"].contains(&ext.as_str())
    )
}

/// Scan `root/<split>/<class>/<file>` into a manifest. Deterministic: classes
/// and entries are sorted by name. Non-image files are skipped with a log
/// line; empty class directories produce a warning and an empty class.
pub fn build_manifest(root: &Path, dataset_name: &str, split: Split) -> Result<DatasetManifest> {
    let split_dir = root.join(split.to_string());
    let mut classes: Vec<String> = Vec::new();
    for entry in std::fs::read_dir(&split_dir).map_err(|e| Error::io(&split_dir, e))? {
        let entry = entry.map_err(|e| Error::io(&split_dir, e))?;
        if entry.path().is_dir() {
            classes.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    classes.sort();

    let mut entries = Vec::new();
    for (label, class) in classes.iter().enumerate() {
        let class_dir = split_dir.join(class);
        let mut files: Vec<PathBuf> = Vec::new();
        for f in std::fs::read_dir(&class_dir).map_err(|e| Error::io(&class_dir, e))? {
            let f = f.map_err(|e| Error::io(&class_dir, e))?;
            let path = f.path();
            if path.is_file() {
                if is_image_file(&path) {
                    files.push(path);
                } else {
                    log::info!("skipping non-image file {}", path.display());
                }
            }
        }
        if files.is_empty() {
            log::warn!("class directory {} holds no images", class_dir.display());
        }
        files.sort();
        for path in files {
            let (width, height) = read_dimensions(&path)?;
            let file_name = path.file_name().unwrap().to_string_lossy().into_owned();
            let stem = path.file_stem().unwrap().to_string_lossy().into_owned();
            entries.push(ManifestEntry {
                image_id: format!("{split}/{class}/{stem}"),
                relative_path: format!("{split}/{class}/{file_name}"),
                label,
                split,
                width,
                height,
                is_poisoned: false,
                placement: None,
                trigger_id: None,
            });
        }
    }

    let manifest = DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        dataset_name: dataset_name.to_string(),
        split,
        classes,
        trigger: None,
        entries,
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Conventional location of the clean twin of a poisoned entry inside a
/// materialized tree.
pub fn clean_twin_relpath(entry: &ManifestEntry) -> String {
    format!("clean_twins/{}", entry.relative_path)
}

/// Conventional manifest file name for a split.
pub fn manifest_file_name(split: Split) -> String {
    format!("manifest_{split}.json")
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::RgbImage;

    fn write_tree(root: &Path, split: &str, classes: &[&str], per_class: usize, side: u32) {
        for class in classes {
            let dir = root.join(split).join(class);
            std::fs::create_dir_all(&dir).unwrap();
            for i in 0..per_class {
                let img = RgbImage::from_pixel(side, side, image::Rgb([i as u8, 10, 20]));
                img.save(dir.join(format!("img_{i:03}.png"))).unwrap();
            }
        }
    }

    #[test]
    fn scan_produces_sorted_clean_entries() {
        let dir = tempfile::tempdir().unwrap();
        write_tree(dir.path(), "train", &["b_class", "a_class"], 3, 8);
        let m = build_manifest(dir.path(), "toy", Split::Train).unwrap();
        assert_eq!(m.classes, vec!["a_class", "b_class"]);
        assert_eq!(m.entries.len(), 6);
        assert!(m.entries.iter().all(|e| !e.is_poisoned));
        assert_eq!(m.entries[0].label, 0);
        assert_eq!(m.entries[3].label, 1);
        assert_eq!(m.entries[0].width, 8);
    }

    #[test]
    fn rescan_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        write_tree(dir.path(), "train", &["x", "y"], 2, 6);
        let a = build_manifest(dir.path(), "toy", Split::Train).unwrap();
        let b = build_manifest(dir.path(), "toy", Split::Train).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        assert_eq!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn non_image_files_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        write_tree(dir.path(), "train", &["x"], 2, 6);
        std::fs::write(dir.path().join("train/x/notes.txt"), "hello").unwrap();
        let m = build_manifest(dir.path(), "toy", Split::Train).unwrap();
        assert_eq!(m.entries.len(), 2);
    }

    #[test]
    fn save_load_roundtrip_checks_hash() {
        let dir = tempfile::tempdir().unwrap();
        write_tree(dir.path(), "val", &["x"], 2, 6);
        let m = build_manifest(dir.path(), "toy", Split::Val).unwrap();
        let path = dir.path().join("manifest_val.json");
        m.save(&path).unwrap();
        let loaded = DatasetManifest::load(&path).unwrap();
        assert_eq!(m, loaded);

        // Tampering with the stored file must be caught.
        let text = std::fs::read_to_string(&path).unwrap();
        let tampered = text.replace("img_000", "img_zzz");
        std::fs::write(&path, tampered).unwrap();
        match DatasetManifest::load(&path) {
            Err(Error::Provenance(_)) => {}
            other => panic!("expected provenance error, got {other:?}"),
        }
    }

    #[test]
    fn validate_rejects_inconsistent_poison_fields() {
        let dir = tempfile::tempdir().unwrap();
        write_tree(dir.path(), "train", &["x"], 1, 6);
        let mut m = build_manifest(dir.path(), "toy", Split::Train).unwrap();
        m.entries[0].is_poisoned = true;
        assert!(m.validate().is_err());
    }
}
