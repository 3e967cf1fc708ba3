//! Synthetic stand-in for compressed-video quality datasets.
//!
//! Procedural reference clips are degraded by three compression-like
//! families at a grid of strengths; each degraded clip is labeled with a
//! deterministic score that falls with strength. Train and test splits never
//! share a reference clip.

mod augment;
mod dataset;
mod distort;
mod io;
mod pristine;

pub use augment::{dihedral, DIHEDRAL_VARIANTS};
pub use dataset::{
    build_dataset, manifest, pristine_crops, sample_crop, train_contents, DataConfig, DatasetSplit,
    Geometry, LabeledClip, ManifestRecord, Split,
};
pub use distort::{apply_distortion, dropped_frames, mos_proxy, CodecSim, DistortionRecipe};
pub use io::{read_clip_cache, read_manifest, write_clip_cache, write_manifest};
pub use pristine::{generate_pristine, Pattern, PristineClipSpec};
