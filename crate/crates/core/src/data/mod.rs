//! Annotations, timelines, feature files and synthetic corpora.

mod annotation;
mod dataset;
mod features;
mod synthetic;
mod text;
mod timeline;

pub use annotation::{load_annotations, parse_annotations, write_annotations, Annotation};
pub use dataset::{
    load_manifest, prepare_all, split_by_index, write_manifest, Batch, PreparedSample, Sample,
    ANNOTATIONS_FILE, FEATURE_EXT,
};
pub use features::{read_features, write_features, FeatureMatrix, FEATURE_MAGIC, FEATURE_VERSION};
pub use synthetic::{
    generate_synthetic, PositionMode, SyntheticConfig, SyntheticGenerator, SyntheticSample,
};
pub use text::{tokenize, HashEmbedder};
pub use timeline::{index_to_time, make_labels, resample_features, time_to_index, SpanLabels};
