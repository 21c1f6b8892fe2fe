//! Manifests, patching, split protocols and batch loading.

mod dataset;
mod manifest;
mod patch;
mod split;
pub mod synth;

pub use dataset::{flip_horizontal, load_image, load_mask, Dataset, Sample, SampleKind};
pub use manifest::{Label, Manifest, Record, Split};
pub use patch::{
    apply_roi_mask, extract_patches, reassemble, reflect_index, reflect_pad, resize, roi_box, PadMode, Patch,
    PatchSpec, RoiBox, MIN_PATCH,
};
pub use split::{build_one_vs_all_split, build_split, sample_subset, scan_dataset, split_validation, Protocol, SourceImage};
