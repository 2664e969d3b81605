//! Deterministic two-domain shape-detection benchmark.
//!
//! Class identity is geometry only (disk, square, triangle, ring, cross);
//! the domain shift changes palette, background texture, outlines and
//! contrast while leaving every box untouched. Target-domain samples
//! expose image-level tags; their boxes are quarantined in an
//! evaluation-only channel.

mod dataset;
mod ppm;
mod scene;

pub use dataset::{
    dataset_build, load_manifest, load_split, DatasetManifest, LoadedSample, Split, SplitCounts,
};
pub use ppm::{read_ppm, write_pgm, write_ppm};
pub use scene::{
    apply_domain_shift, generate_scene, render_sample, Image, PixelBox, Sample, SceneObject,
    SceneSpec, ShapeClass, ShiftConfig,
};
