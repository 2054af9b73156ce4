//! Dataset manifests and region annotations as versioned JSON. Image
//! paths are stored relative to the manifest's directory.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use indret_core::evalkit::{RoiAnnotation, RoiBox};
use indret_core::patching::GridSpec;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestImage {
    pub id: String,
    pub path: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestQuery {
    pub id: String,
    pub image_id: String,
    pub relevant: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GridDims {
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub resolution: usize,
    pub grid: GridDims,
    pub images: Vec<ManifestImage>,
    pub queries: Vec<ManifestQuery>,
    /// Directory the relative image paths resolve against. Not
    /// serialized; filled in by `load`.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn grid_spec(&self) -> Result<GridSpec> {
        GridSpec::new(self.grid.rows, self.grid.cols).map_err(AppError::Core)
    }

    pub fn image_path(&self, id: &str) -> Result<PathBuf> {
        let img = self
            .images
            .iter()
            .find(|i| i.id == id)
            .ok_or_else(|| AppError::Validation(format!("unknown image id {id}")))?;
        Ok(self.base_dir.join(&img.path))
    }

    fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(AppError::Validation(format!(
                "unsupported manifest format_version {}",
                self.format_version
            )));
        }
        let mut ids = BTreeSet::new();
        for img in &self.images {
            if !ids.insert(img.id.as_str()) {
                return Err(AppError::Validation(format!(
                    "duplicate image id {}",
                    img.id
                )));
            }
        }
        let mut qids = BTreeSet::new();
        for q in &self.queries {
            if !qids.insert(q.id.as_str()) {
                return Err(AppError::Validation(format!("duplicate query id {}", q.id)));
            }
            if !ids.contains(q.image_id.as_str()) {
                return Err(AppError::Validation(format!(
                    "query {} references unknown image {}",
                    q.id, q.image_id
                )));
            }
            if q.relevant.is_empty() {
                return Err(AppError::Validation(format!(
                    "query {} has an empty relevance set",
                    q.id
                )));
            }
            for r in &q.relevant {
                if !ids.contains(r.as_str()) {
                    return Err(AppError::Validation(format!(
                        "query {} references unknown target {}",
                        q.id, r
                    )));
                }
            }
        }
        self.grid_spec()?;
        Ok(())
    }
}

pub fn save_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    manifest.validate()?;
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| AppError::Persistence(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Parses and validates; dangling references are rejected with the
/// offending id named. Image files themselves must exist on disk.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path)?;
    let mut manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| AppError::Validation(e.to_string()))?;
    manifest.base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    manifest.validate()?;
    for img in &manifest.images {
        let p = manifest.base_dir.join(&img.path);
        if !p.is_file() {
            return Err(AppError::Validation(format!(
                "image {} missing on disk at {}",
                img.id,
                p.display()
            )));
        }
    }
    Ok(manifest)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AnnotationRegion {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AnnotationEntry {
    pub image_id: String,
    pub regions: Vec<AnnotationRegion>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AnnotationFile {
    pub format_version: u32,
    pub annotations: Vec<AnnotationEntry>,
}

pub fn save_annotations(path: &Path, anns: &[RoiAnnotation]) -> Result<()> {
    let file = AnnotationFile {
        format_version: FORMAT_VERSION,
        annotations: anns
            .iter()
            .map(|a| AnnotationEntry {
                image_id: a.image_id.clone(),
                regions: a
                    .regions
                    .iter()
                    .map(|b| AnnotationRegion {
                        x0: b.x0,
                        y0: b.y0,
                        x1: b.x1,
                        y1: b.y1,
                    })
                    .collect(),
            })
            .collect(),
    };
    let text =
        serde_json::to_string_pretty(&file).map_err(|e| AppError::Persistence(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_annotations(path: &Path) -> Result<Vec<RoiAnnotation>> {
    let text = std::fs::read_to_string(path)?;
    let file: AnnotationFile =
        serde_json::from_str(&text).map_err(|e| AppError::Validation(e.to_string()))?;
    if file.format_version != FORMAT_VERSION {
        return Err(AppError::Validation(format!(
            "unsupported annotation format_version {}",
            file.format_version
        )));
    }
    file.annotations
        .iter()
        .map(|a| {
            let regions = a
                .regions
                .iter()
                .map(|r| {
                    RoiBox::new(r.x0, r.y0, r.x1, r.y1).map_err(|e| {
                        AppError::Validation(format!("image {}: {e}", a.image_id))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(RoiAnnotation {
                image_id: a.image_id.clone(),
                regions,
            })
        })
        .collect()
}
