//! Feature and annotation I/O, modality fusion, synthetic data.

mod annotations;
mod features;
mod synthetic;

pub use annotations::{
    load_annotations, load_predictions, parse_annotations, parse_predictions, save_annotations,
    write_predictions, Annotations, Detection, Event, Predictions, VideoAnnotation,
    VideoPredictions, DEFAULT_NUM_CLASSES,
};
pub use features::{
    fuse_features, fuse_optional, load_features, save_features, FeatureSequence, Modality,
    TSLF_MAGIC, TSLF_VERSION,
};
pub use synthetic::{
    class_name, generate_synthetic, video_id, Splits, SyntheticDataset, SyntheticSpec,
    SyntheticVideo,
};
