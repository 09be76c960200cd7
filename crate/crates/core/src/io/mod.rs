//! On-disk formats: MSED tensors, id lists, label CSVs and JSON manifests.

mod manifest;
mod msed;

pub use manifest::{
    default_class_names, load_features, read_ids, read_labels_csv, write_ids, write_labels_csv, DatasetManifest,
    FeatureEntry, FeatureManifest, LoadedFeatures, SubjectEntry,
};
pub use msed::{decode_msed, encode_msed, read_msed, read_msed_expect, write_msed, Dtype, MAGIC, VERSION};
