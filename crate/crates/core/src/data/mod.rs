//! Dataset types: an annotation index with a class table, backed either by
//! the synthetic shapes generator or by PASCAL VOC XML annotations.

mod input;
mod synth;
mod voc;

pub use input::{prepare_input, to_array, LetterboxTransform};
pub use synth::{
    derive_rng, load_dataset_dir, synth_generate, write_dataset, ColorDef, ShapeKind, SynthConfig,
};
pub use voc::load_voc;

use crate::geometry::BBox;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const INDEX_FORMAT: &str = "fsrw-index-v1";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("{file}: malformed XML: {message}")]
    Xml { file: String, message: String },
    #[error("{file}: missing element <{element}>")]
    MissingElement { file: String, element: String },
    #[error("{file}: element <{element}> holds '{got}', expected a number")]
    BadValue { file: String, element: String, got: String },
    #[error("{file}: unknown class '{name}'")]
    UnknownClass { file: String, name: String },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
}

/// One annotated object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub bbox: BBox,
    #[serde(default)]
    pub difficult: bool,
}

/// One image entry: identifier, pixel dimensions and its objects. `file` is
/// the image path relative to the index when the dataset lives on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub objects: Vec<Annotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
}

/// The annotation index: class-name table plus per-image records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub format: String,
    pub class_names: Vec<String>,
    pub records: Vec<ImageRecord>,
}

impl DatasetIndex {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        for rec in &self.records {
            for obj in &rec.objects {
                obj.bbox.validate()?;
                if obj.bbox.class_id >= self.class_names.len() {
                    return Err(DataError::Invalid(format!(
                        "record {}: class id {} has no name entry",
                        rec.id, obj.bbox.class_id
                    )));
                }
            }
        }
        Ok(())
    }

    /// (record index, object index) pairs for every annotation of a class.
    pub fn class_instances(&self, class_id: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (ri, rec) in self.records.iter().enumerate() {
            for (oi, obj) in rec.objects.iter().enumerate() {
                if obj.bbox.class_id == class_id {
                    out.push((ri, oi));
                }
            }
        }
        out
    }
}

/// A dataset held in memory: the index plus decoded RGB images, aligned by
/// record order.
pub struct Dataset {
    pub index: DatasetIndex,
    pub images: Vec<image::RgbImage>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.index.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.records.is_empty()
    }
}
