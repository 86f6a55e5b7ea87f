//! Images, annotations, the synthetic scene generator and dataset statistics.

pub mod annotations;
pub mod raster;
pub mod stats;
pub mod synth;

pub use annotations::{Annotation, AnnotationSet, Category, ImageInfo, Violation};
pub use raster::Raster;
pub use synth::{generate_dataset, generate_scene, scene_rng, ClassLaw, CountLaw, LoadedDataset, Manifest, SceneConfig, SynthDataset};
