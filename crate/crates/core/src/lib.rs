//! FDG-PET DAT score (FPDS) computation.
//!
//! The crate covers the whole pipeline: longitudinal cohort stratification,
//! volume I/O and preprocessing, k-means patch parcellation, patch-wise SUVR
//! features, the multi-scale subagging ensemble of kernel logistic
//! classifiers, evaluation statistics, and a synthetic phantom generator.
//!
//! Numerical code is generic over [`Real`] (`f32` or `f64`); the aliases at
//! the crate root fix the scalar to `f64`, which is what the pipeline uses.

pub mod cohort;
pub mod features;
pub mod learn;
pub mod metrics;
pub mod parcellation;
pub mod phantom;
pub mod pipeline;
pub mod scalar;
pub mod seed;
pub mod volume;

pub use scalar::Real;

pub type Volume = volume::Volume<f64>;
pub type Volume32 = volume::Volume<f32>;
pub type FeatureVector = features::FeatureVector<f64>;
pub type MultiScaleFeatureSet = features::MultiScaleFeatureSet<f64>;
pub type KernelClassifier = learn::KernelClassifier<f64>;
pub type EnsembleModel = learn::EnsembleModel<f64>;
pub type Fpds = learn::Fpds<f64>;
