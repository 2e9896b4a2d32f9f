//! Evaluation: manifests and splitting, accuracy metrics, the JPEG
//! robustness sweep, the Stuart-Maxwell test and t-SNE.

pub mod manifest;
pub mod metrics;
pub mod robustness;
pub mod stats;
pub mod tsne;

pub use manifest::{split_dataset, DatasetManifest, ManifestRecord, Split, SplitRatios};
pub use metrics::{evaluate, AccuracyReport, ConfusionMatrix};
pub use robustness::{load_split, predict_images, robustness_sweep, LabeledImage, RobustnessPoint};
pub use stats::{
    chi_square_sf, read_predictions, stuart_maxwell, stuart_maxwell_table, write_predictions, PairedPredictions,
    StuartMaxwell,
};
pub use tsne::{silhouette, tsne, Embedding2D, TsneConfig};
