//! Procedural foggy street scenes and paired dataset storage.

mod dataset;
mod raster;
mod scene;

pub use dataset::{
    build_dataset, generate_split, load_dataset, Access, AirlightJitter, Dataset, DatasetConfig, Manifest,
    ManifestEntry, Range, SampleFiles, SceneSample, Split, MANIFEST_FILE, MANIFEST_VERSION,
};
pub use raster::{DepthMap, LabelMap, Raster};
pub(crate) use raster::write_png;
pub use scene::{
    airlight_field, apply_fog, apply_fog_field, gen_scene, transmittance, SceneConfig, CLASS_GROUND, CLASS_NAMES,
    CLASS_SKY, FAR_DEPTH,
};
