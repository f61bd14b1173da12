use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::klr::{train_kernel_classifier, KlrFit, KlrOptions};
use super::select::tstat_select;
use super::subag::{subag_subsets, SubagSubset};
use super::{LearnError, Matrix};
use crate::cohort::Trajectory;
use crate::features::MultiScaleFeatureSet;
use crate::parcellation::ScaleLadder;
use crate::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    /// Number of subagging subsets F.
    pub subsets: usize,
    /// Sampling ratio applied to the smaller class.
    pub gamma: f64,
    pub ridge: f64,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub seed: u64,
    pub ladder: ScaleLadder,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            subsets: 100,
            gamma: 0.8,
            ridge: 1e-2,
            max_iter: 100,
            grad_tol: 1e-8,
            seed: 0,
            ladder: ScaleLadder::default(),
        }
    }
}

impl EnsembleConfig {
    pub fn klr_options(&self) -> KlrOptions {
        KlrOptions {
            ridge: self.ridge,
            max_iter: self.max_iter,
            grad_tol: self.grad_tol,
        }
    }
}

/// Features kept per classifier: `floor(subset size / 10)`.
pub fn k_for_subset(subset_size: usize) -> usize {
    subset_size / 10
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaleInfo {
    pub scale_m: u32,
    pub patch_ids: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelClassifier<T = f64> {
    pub scale_index: usize,
    pub subset_index: usize,
    /// Patch ids of the selected features, in selection-rank order.
    pub selected_feature_ids: Vec<u32>,
    /// Positions of the selected features within the scale's feature vector.
    pub selected_columns: Vec<usize>,
    pub fit: KlrFit<T>,
}

impl<T: Real> KernelClassifier<T> {
    pub fn predict_features(&self, values: &[T]) -> T {
        let x: Vec<T> = self.selected_columns.iter().map(|&c| values[c]).collect();
        self.fit.predict(&x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel<T = f64> {
    pub config: EnsembleConfig,
    pub scales: Vec<ScaleInfo>,
    pub subsets: Vec<SubagSubset>,
    /// Scale-major: classifier `s * F + f` is trained on scale `s`, subset `f`.
    pub classifiers: Vec<KernelClassifier<T>>,
    pub training_image_ids: Vec<String>,
}

impl<T: Real> EnsembleModel<T> {
    pub fn classifier(&self, scale_index: usize, subset_index: usize) -> &KernelClassifier<T> {
        &self.classifiers[scale_index * self.subsets.len() + subset_index]
    }

    pub fn non_converged(&self) -> usize {
        self.classifiers.iter().filter(|c| !c.fit.converged).count()
    }

    fn check_sample(&self, sample: &MultiScaleFeatureSet<T>) -> Result<(), LearnError> {
        if sample.scales.len() != self.scales.len() {
            return Err(LearnError::FeatureMismatch {
                image: sample.image_id.clone(),
                scale: sample.scales.len().min(self.scales.len()),
            });
        }
        for (s, (fv, info)) in sample.scales.iter().zip(&self.scales).enumerate() {
            if fv.patch_ids != info.patch_ids || fv.values.len() != fv.patch_ids.len() {
                return Err(LearnError::FeatureMismatch {
                    image: sample.image_id.clone(),
                    scale: s,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fpds<T = f64> {
    pub image_id: String,
    pub score: T,
    pub n_classifiers_fused: usize,
}

fn scale_matrix<T: Real>(features: &[MultiScaleFeatureSet<T>], scale: usize) -> Matrix<T> {
    let rows: Vec<&[T]> = features
        .iter()
        .map(|f| f.scales[scale].values.as_slice())
        .collect();
    Matrix::from_rows(&rows).expect("patch ids checked equal across images")
}

/// Trains the `M x F` ensemble. `features[i]` and `labels[i]` describe
/// training image `i`; every image must share the first image's patch ids.
pub fn train_ensemble<T: Real>(
    features: &[MultiScaleFeatureSet<T>],
    labels: &[Trajectory],
    config: &EnsembleConfig,
) -> Result<EnsembleModel<T>, LearnError> {
    if features.len() != labels.len() {
        return Err(LearnError::Shape(format!(
            "{} feature sets for {} labels",
            features.len(),
            labels.len()
        )));
    }
    let first = features.first().ok_or(LearnError::SingleClass { min: 2 })?;
    let expected = config.ladder.scales();
    let found: Vec<u32> = first.scales.iter().map(|f| f.scale_m).collect();
    if expected != found {
        return Err(LearnError::LadderMismatch { expected, found });
    }
    let scales: Vec<ScaleInfo> = first
        .scales
        .iter()
        .map(|f| ScaleInfo {
            scale_m: f.scale_m,
            patch_ids: f.patch_ids.clone(),
        })
        .collect();
    for set in features {
        for (s, (fv, info)) in set.scales.iter().zip(&scales).enumerate() {
            if fv.patch_ids != info.patch_ids || fv.values.len() != info.patch_ids.len() {
                return Err(LearnError::FeatureMismatch {
                    image: set.image_id.clone(),
                    scale: s,
                });
            }
        }
        if set.scales.len() != scales.len() {
            return Err(LearnError::FeatureMismatch {
                image: set.image_id.clone(),
                scale: set.scales.len().min(scales.len()),
            });
        }
    }

    let subsets = subag_subsets(labels, config.subsets, config.gamma, config.seed)?;
    let matrices: Vec<Matrix<T>> = (0..scales.len()).map(|s| scale_matrix(features, s)).collect();
    let options = config.klr_options();
    let n_subsets = subsets.len();

    let classifiers = (0..scales.len() * n_subsets)
        .into_par_iter()
        .map(|job| {
            let (s, f) = (job / n_subsets, job % n_subsets);
            let members = &subsets[f].member_indices;
            let y: Vec<bool> = members.iter().map(|&i| labels[i].is_positive()).collect();
            let all_cols: Vec<usize> = (0..matrices[s].cols()).collect();
            let x = matrices[s].select(members, &all_cols);
            let k = k_for_subset(members.len()).min(x.cols());
            if k == 0 {
                return Err(LearnError::SubsetTooSmall(members.len()));
            }
            let columns = tstat_select(&x, &y, k)?;
            let fit = train_kernel_classifier(&x.select(&(0..x.rows()).collect::<Vec<_>>(), &columns), &y, &options)?;
            Ok(KernelClassifier {
                scale_index: s,
                subset_index: f,
                selected_feature_ids: columns.iter().map(|&c| scales[s].patch_ids[c]).collect(),
                selected_columns: columns,
                fit,
            })
        })
        .collect::<Result<Vec<_>, LearnError>>()?;

    Ok(EnsembleModel {
        config: config.clone(),
        scales,
        subsets,
        classifiers,
        training_image_ids: features.iter().map(|f| f.image_id.clone()).collect(),
    })
}

/// DAT+ probability of every classifier, in model order.
pub fn member_probabilities<T: Real>(
    model: &EnsembleModel<T>,
    sample: &MultiScaleFeatureSet<T>,
) -> Result<Vec<T>, LearnError> {
    model.check_sample(sample)?;
    Ok(model
        .classifiers
        .iter()
        .map(|c| c.predict_features(&sample.scales[c.scale_index].values))
        .collect())
}

/// Arithmetic mean of the given member probabilities.
pub fn fpds_from_members<T: Real>(image_id: &str, members: &[T]) -> Fpds<T> {
    let sum: T = members.iter().copied().sum();
    Fpds {
        image_id: image_id.to_string(),
        score: sum / T::of_usize(members.len().max(1)),
        n_classifiers_fused: members.len(),
    }
}

/// Fuses all `M x F` classifiers.
pub fn fpds<T: Real>(
    model: &EnsembleModel<T>,
    sample: &MultiScaleFeatureSet<T>,
) -> Result<Fpds<T>, LearnError> {
    let members = member_probabilities(model, sample)?;
    Ok(fpds_from_members(&sample.image_id, &members))
}

/// Indices of the classifiers whose subset excludes training image `index`.
pub fn oob_classifiers<T: Real>(model: &EnsembleModel<T>, training_index: usize) -> Vec<usize> {
    let outside: Vec<bool> = model
        .subsets
        .iter()
        .map(|s| !s.contains(training_index))
        .collect();
    model
        .classifiers
        .iter()
        .enumerate()
        .filter(|(_, c)| outside[c.subset_index])
        .map(|(i, _)| i)
        .collect()
}

/// Out-of-bag FPDS of training image `training_index`.
pub fn fpds_oob<T: Real>(
    model: &EnsembleModel<T>,
    training_index: usize,
    sample: &MultiScaleFeatureSet<T>,
) -> Result<Fpds<T>, LearnError> {
    if training_index >= model.training_image_ids.len() {
        return Err(LearnError::TrainingIndex(training_index));
    }
    model.check_sample(sample)?;
    let chosen = oob_classifiers(model, training_index);
    if chosen.is_empty() {
        return Err(LearnError::NoOutOfBag(training_index));
    }
    let members: Vec<T> = chosen
        .iter()
        .map(|&i| {
            let c = &model.classifiers[i];
            c.predict_features(&sample.scales[c.scale_index].values)
        })
        .collect();
    Ok(fpds_from_members(&sample.image_id, &members))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiFrequency {
    pub roi_id: u32,
    /// Classifiers selecting at least one patch of the ROI.
    pub count: usize,
    pub frequency: f64,
}

/// Fraction of classifiers that selected at least one patch of each ROI.
///
/// `patch_to_roi[s][id - 1]` maps patch ids of scale `s` to ROI labels.
/// ROIs never selected are omitted; rows are sorted by descending
/// frequency, then ascending ROI id.
pub fn selection_frequency<T: Real>(
    model: &EnsembleModel<T>,
    patch_to_roi: &[Vec<u32>],
) -> Result<Vec<RoiFrequency>, LearnError> {
    if patch_to_roi.len() != model.scales.len() {
        return Err(LearnError::Shape(format!(
            "{} patch maps for {} scales",
            patch_to_roi.len(),
            model.scales.len()
        )));
    }
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for c in &model.classifiers {
        let map = &patch_to_roi[c.scale_index];
        let mut rois: Vec<u32> = c
            .selected_feature_ids
            .iter()
            .map(|&id| {
                map.get(id as usize - 1).copied().ok_or_else(|| {
                    LearnError::Shape(format!("patch {id} missing from scale {} map", c.scale_index))
                })
            })
            .collect::<Result<_, _>>()?;
        rois.sort_unstable();
        rois.dedup();
        for r in rois {
            *counts.entry(r).or_default() += 1;
        }
    }
    let total = model.classifiers.len() as f64;
    let mut rows: Vec<RoiFrequency> = counts
        .into_iter()
        .map(|(roi_id, count)| RoiFrequency {
            roi_id,
            count,
            frequency: count as f64 / total,
        })
        .collect();
    rows.sort_by(|a, b| b.count.cmp(&a.count).then(a.roi_id.cmp(&b.roi_id)));
    Ok(rows)
}
