//! Volume ingestion, slicing, cropping, normalization and datasets.

pub mod io;
pub mod prepare;
pub mod store;
pub mod synth;
mod volume;

pub use prepare::{prepare_dataset, PrepareManifest, PrepareSummary};
pub use store::{batch_images, batch_labels, content_hash, stack_labels, Dataset, DatasetManifest, Split, VolumeRecord};
pub use synth::{generate_border_bias, PositionRule, SynthConfig, SynthDataset};
pub use volume::{
    center_crop, center_crop_mask, concat_modalities, crop_offsets, normalize_intensity, normalize_values, restack, slice_volume, Image,
    NormMode, NormScope, Plane, Slice, SliceSample, Volume,
};
