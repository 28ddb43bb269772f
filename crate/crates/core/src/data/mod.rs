//! Synthetic multi-annotator data: scenes, tendency manipulation, datasets.

mod dataset;
pub mod morph;
pub mod scene;

pub use dataset::{build_dataset, synthesize_record, Dataset, DatasetSpec, Manifest, Record, RecordEntry, Split, Splits, MANIFEST_FILE, MANIFEST_VERSION};
pub use morph::{dilate, erode, manipulate, simplify, MorphParams, StructuringElement, Tendency};
pub use scene::{generate_scene, SceneSpec, ShapeKind};
