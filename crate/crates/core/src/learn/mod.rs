//! The multi-scale subagging ensemble.
//!
//! For every scale `s` of the ladder and every balanced subsample `f`, one
//! classifier is trained: the `k = floor(N_train / 10)` patches with the
//! largest two-sample |t| on that subsample are kept, and a Gaussian-kernel
//! logistic regression is fitted on them. The FPDS of an image is the mean
//! DAT+ probability over all `M x F` classifiers, or, for a training image,
//! over the classifiers whose subsample left it out.

mod ensemble;
mod klr;
mod matrix;
mod model_io;
mod select;
mod subag;

use thiserror::Error;

pub use ensemble::{
    fpds, fpds_from_members, fpds_oob, k_for_subset, member_probabilities, oob_classifiers,
    selection_frequency, train_ensemble, EnsembleConfig, EnsembleModel, Fpds, KernelClassifier,
    RoiFrequency, ScaleInfo,
};
pub use klr::{
    gaussian_kernel_matrix, median_pairwise_distance, train_kernel_classifier, KlrFit,
    KlrObjective, KlrOptions,
};
pub use matrix::Matrix;
pub use model_io::{decode_model, encode_model, load_model, save_model, MODEL_MAGIC};
pub use select::{t_statistics, tstat_select};
pub use subag::{per_class_count, subag_subsets, SubagSubset};

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("sampling ratio gamma must lie in (0, 1], got {0}")]
    Gamma(f64),
    #[error("at least one subset is required")]
    NoSubsets,
    #[error("degenerate class sizes: {negatives} DAT-, {positives} DAT+ gives {per_class} per class (need >= 2)")]
    DegenerateClasses {
        negatives: usize,
        positives: usize,
        per_class: usize,
    },
    #[error("both classes must be present with at least {min} samples each")]
    SingleClass { min: usize },
    #[error("k = {k} exceeds the {features} available features")]
    KTooLarge { k: usize, features: usize },
    #[error("subset of {0} samples is too small for feature selection (k = 0)")]
    SubsetTooSmall(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite input value")]
    NonFinite,
    #[error("image {image}: features at scale index {scale} do not match the model's patch ids")]
    FeatureMismatch { image: String, scale: usize },
    #[error("feature scales {found:?} do not match the ladder {expected:?}")]
    LadderMismatch { expected: Vec<u32>, found: Vec<u32> },
    #[error("training image index {0} is out of range")]
    TrainingIndex(usize),
    #[error("no out-of-bag classifiers for training image {0}")]
    NoOutOfBag(usize),
    #[error("model file version mismatch: {0:?}")]
    ModelVersion(String),
    #[error("corrupt model file (line {line}): {message}")]
    Corrupt { line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}
