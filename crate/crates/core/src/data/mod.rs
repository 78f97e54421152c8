//! Dataset records, on-disk layout, preprocessing and augmentation.

mod augment;
pub mod io;
mod manifest;
mod preprocess;

pub use augment::{
    apply_depth_aug, apply_seg_aug, augment_depth, augment_seg, DepthAugConfig, DepthAugParams, Displacement,
    SegAugConfig, SegAugParams,
};
pub(crate) use augment::gaussian_smooth;
pub use manifest::{
    batch_order, class_presence_stats, ClassPresence, Dataset, DatasetManifest, SegRecord, Split, StereoRecord,
    MANIFEST_FILE, MANIFEST_VERSION,
};
pub use preprocess::{preprocess_raw, resize_bilinear_window, SourceKind, TARGET_SIZE};

use crate::grid::{ImageGrid, LabelMask};

/// Rectified stereo pair.
#[derive(Clone, Debug, PartialEq)]
pub struct StereoSample {
    pub left: ImageGrid,
    pub right: ImageGrid,
    pub scene_id: String,
    pub frame_index: u32,
}

/// Image with a dense label annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub image: ImageGrid,
    pub mask: LabelMask,
    pub knee_id: String,
    pub frame_index: u32,
}

/// Loads a dataset root and returns its validated manifest.
pub fn load_manifest(root: &std::path::Path) -> crate::Result<DatasetManifest> {
    Ok(Dataset::open(root)?.manifest)
}
