//! The batch pipeline behind the command-line tool: stratify, extract,
//! train, score and evaluate, plus phantom generation and an in-memory
//! phantom experiment.
//!
//! Every stage recomputes the stratification from the cohort table, so the
//! stages only share files through the output directory:
//!
//! ```text
//! out/strata.csv  exclusions.csv  features/<image>.csv  extract_failures.csv
//!     model.fpds  training_log.csv  subsets.csv
//!     scores.csv  member_probabilities.csv
//!     reports/{train_fit,validation,binned_age,binned_ttc,conversion_windows,
//!              correlation,group_tests,roi_selection}.csv  reports/summary.txt
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cohort::{self, LongitudinalRecord, StratumLabel, Trajectory};
use crate::features::{self, MultiScaleFeatureSet};
use crate::learn::{self, EnsembleConfig, EnsembleModel, LearnError};
use crate::metrics::{self, GroupTestOptions};
use crate::parcellation::{self, PatchParcellation, ScaleLadder};
use crate::phantom::{self, PhantomSpec};
use crate::seed;
use crate::volume::{self, LabelVolume, Volume};

const PARCELLATION_STREAM: u64 = 0x9A7C_0001;
const TRAINING_STREAM: u64 = 0x7EA1_0002;
const PHANTOM_STREAM: u64 = 0x9A47_0003;

pub const CACHE_ENV: &str = "FPDS_CACHE_DIR";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
}

impl PipelineError {
    /// 2 for configuration problems, 3 for data problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Data(_) => 3,
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for PipelineError {
            fn from(e: $t) -> Self {
                PipelineError::Data(e.to_string())
            }
        }
    )*};
}
data_error!(
    cohort::CohortError,
    volume::VolumeError,
    parcellation::ParcellationError,
    features::FeatureError,
    metrics::MetricsError,
    phantom::PhantomError,
    csv::Error
);

impl From<LearnError> for PipelineError {
    fn from(e: LearnError) -> Self {
        match e {
            LearnError::Gamma(_) | LearnError::NoSubsets => PipelineError::Config(e.to_string()),
            other => PipelineError::Data(other.to_string()),
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |e| PipelineError::Data(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub atlas: PathBuf,
    pub cohort: PathBuf,
    pub output_dir: PathBuf,
    /// Where `phantom` writes, and where `run-all` reads atlas and cohort from.
    pub phantom_dir: PathBuf,
    /// Parcellation cache; `FPDS_CACHE_DIR` wins, then this, then `<output_dir>/cache`.
    pub cache_dir: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            atlas: "data/atlas.rvol".into(),
            cohort: "data/cohort.csv".into(),
            output_dir: "out".into(),
            phantom_dir: "data".into(),
            cache_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSettings {
    pub subsets: usize,
    pub gamma: f64,
    pub ridge: f64,
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for EnsembleSettings {
    fn default() -> Self {
        let d = EnsembleConfig::default();
        EnsembleSettings {
            subsets: d.subsets,
            gamma: d.gamma,
            ridge: d.ridge,
            max_iter: d.max_iter,
            grad_tol: d.grad_tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub threshold: f64,
    pub age_edges: Vec<f64>,
    pub ttc_edges: Vec<f64>,
    pub conversion_windows: Vec<f64>,
    pub group_tests: GroupTestOptions,
    /// Group-test p-values below this are flagged.
    pub significance: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            threshold: 0.5,
            age_edges: metrics::edges_range(55.0, 95.0, 5.0),
            ttc_edges: metrics::edges_range(0.0, 10.0, 1.0),
            conversion_windows: vec![2.0, 3.0, 5.0],
            group_tests: GroupTestOptions::default(),
            significance: 0.001,
        }
    }
}

/// Every stochastic stage draws from a stream of `seed`; `phantom.seed` is
/// replaced by such a stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub seed: u64,
    pub ladder: ScaleLadder,
    pub ensemble: EnsembleSettings,
    pub reference_roi_id: u32,
    pub fwhm_mm: f64,
    pub evaluation: EvaluationConfig,
    pub phantom: PhantomSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            paths: Paths::default(),
            seed: 0,
            ladder: ScaleLadder::default(),
            ensemble: EnsembleSettings::default(),
            reference_roi_id: 9,
            fwhm_mm: 8.0,
            evaluation: EvaluationConfig::default(),
            phantom: PhantomSpec::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `key=value` overrides with dotted keys, e.g.
    /// `ensemble.subsets=20`. Values are parsed as JSON, falling back to a
    /// plain string.
    pub fn with_overrides<S: AsRef<str>>(self, overrides: &[S]) -> Result<Self, PipelineError> {
        let mut value = serde_json::to_value(&self).expect("config serializes");
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| PipelineError::Config(format!("override {item:?} is not key=value")))?;
            let parsed: serde_json::Value = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            let mut slot = &mut value;
            for part in key.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|o| o.get_mut(part))
                    .ok_or_else(|| PipelineError::Config(format!("unknown config key {key:?}")))?;
            }
            *slot = parsed;
        }
        serde_json::from_value(value).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        self.ladder
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.ladder.scale_count() == 0 {
            return bad("the scale ladder is empty".into());
        }
        if !(self.fwhm_mm > 0.0 && self.fwhm_mm.is_finite()) {
            return bad(format!("fwhm_mm must be positive, got {}", self.fwhm_mm));
        }
        let e = &self.ensemble;
        if e.subsets == 0 {
            return bad("ensemble.subsets must be at least 1".into());
        }
        if !(e.gamma > 0.0 && e.gamma <= 1.0) {
            return bad(format!("ensemble.gamma must lie in (0, 1], got {}", e.gamma));
        }
        if !(e.ridge > 0.0) {
            return bad(format!("ensemble.ridge must be positive, got {}", e.ridge));
        }
        let ev = &self.evaluation;
        for (name, edges) in [("age_edges", &ev.age_edges), ("ttc_edges", &ev.ttc_edges)] {
            if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
                return bad(format!("evaluation.{name} must be strictly increasing"));
            }
        }
        if ev.conversion_windows.iter().any(|&w| !(w > 0.0)) {
            return bad("conversion windows must be positive".into());
        }
        Ok(())
    }

    pub fn ensemble_config(&self) -> EnsembleConfig {
        let e = &self.ensemble;
        EnsembleConfig {
            subsets: e.subsets,
            gamma: e.gamma,
            ridge: e.ridge,
            max_iter: e.max_iter,
            grad_tol: e.grad_tol,
            seed: seed::derive(self.seed, &[TRAINING_STREAM]),
            ladder: self.ladder.clone(),
        }
    }

    pub fn parcellation_seed(&self) -> u64 {
        seed::derive(self.seed, &[PARCELLATION_STREAM])
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        PhantomSpec {
            seed: seed::derive(self.seed, &[PHANTOM_STREAM]),
            ..self.phantom.clone()
        }
    }

    pub fn cache_root(&self) -> PathBuf {
        std::env::var_os(CACHE_ENV)
            .map(PathBuf::from)
            .or_else(|| self.paths.cache_dir.clone())
            .unwrap_or_else(|| self.paths.output_dir.join("cache"))
    }

    fn out(&self, name: &str) -> PathBuf {
        self.paths.output_dir.join(name)
    }

    fn reports(&self) -> PathBuf {
        self.paths.output_dir.join("reports")
    }
}

// ---------------------------------------------------------------- stratify

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageStratum {
    pub image_id: String,
    pub subject_id: String,
    pub visit_months: f64,
    pub stratum: StratumLabel,
    pub trajectory: Trajectory,
    pub time_to_conversion: Option<f64>,
    pub age_years: Option<f64>,
    pub mmse: Option<f64>,
    pub csf_ttau_abeta: Option<f64>,
    /// First imaged visit of the subject.
    pub baseline: bool,
    #[serde(skip)]
    pub image_path: PathBuf,
}

impl ImageStratum {
    pub fn is_training(&self) -> bool {
        self.baseline && matches!(self.stratum, StratumLabel::SNc | StratumLabel::SDat)
    }

    pub fn is_validation(&self) -> bool {
        !matches!(self.stratum, StratumLabel::SNc | StratumLabel::SDat)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Exclusion {
    pub subject_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct Stratification {
    pub images: Vec<ImageStratum>,
    pub exclusions: Vec<Exclusion>,
}

impl Stratification {
    pub fn training(&self) -> impl Iterator<Item = &ImageStratum> {
        self.images.iter().filter(|i| i.is_training())
    }
}

/// Assigns every imaged visit its stratum. Records with a reversion are
/// excluded rather than coerced.
pub fn stratify_records(records: &[LongitudinalRecord]) -> Result<Stratification, PipelineError> {
    let mut out = Stratification::default();
    let mut seen = HashSet::new();
    for record in records {
        if let Err(e) = record.check_monotone() {
            out.exclusions.push(Exclusion {
                subject_id: record.subject_id.clone(),
                reason: e.to_string(),
            });
            continue;
        }
        for (n, v) in record.image_visit_indices().enumerate() {
            let visit = &record.visits[v];
            let image_id = visit.image_id().ok_or_else(|| {
                PipelineError::Data(format!("subject {}: imaged visit without a path", record.subject_id))
            })?;
            if !seen.insert(image_id.clone()) {
                return Err(PipelineError::Data(format!("duplicate image id {image_id}")));
            }
            let stratum = cohort::assign_stratum(record, v)?;
            out.images.push(ImageStratum {
                image_id,
                subject_id: record.subject_id.clone(),
                visit_months: visit.visit_months,
                stratum,
                trajectory: stratum.trajectory(),
                time_to_conversion: cohort::time_to_conversion(record, v)?,
                age_years: visit.age_years,
                mmse: visit.mmse,
                csf_ttau_abeta: visit.csf_ttau_abeta,
                baseline: n == 0,
                image_path: visit.image_path.clone().unwrap_or_default(),
            });
        }
    }
    Ok(out)
}

fn create_dir(path: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(path).map_err(io(path))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, PipelineError> {
    csv::Writer::from_path(path).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))
}

fn write_rows<R: Serialize>(path: &Path, header: &[&str], rows: &[R]) -> Result<(), PipelineError> {
    let mut w = csv_writer(path)?;
    if rows.is_empty() {
        w.write_record(header)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io(path))
}

pub fn load_stratification(config: &PipelineConfig) -> Result<Stratification, PipelineError> {
    let records = cohort::load_cohort(&config.paths.cohort)?;
    stratify_records(&records)
}

pub fn cmd_stratify(config: &PipelineConfig) -> Result<Stratification, PipelineError> {
    let strat = load_stratification(config)?;
    if strat.images.is_empty() {
        log::warn!("the cohort has no imaged visits");
    }
    for e in &strat.exclusions {
        log::warn!("excluded subject {}: {}", e.subject_id, e.reason);
    }
    create_dir(&config.paths.output_dir)?;
    write_rows(
        &config.out("strata.csv"),
        &[
            "image_id",
            "subject_id",
            "visit_months",
            "stratum",
            "trajectory",
            "time_to_conversion",
            "age_years",
            "mmse",
            "csf_ttau_abeta",
            "baseline",
        ],
        &strat.images,
    )?;
    write_rows(&config.out("exclusions.csv"), &["subject_id", "reason"], &strat.exclusions)?;
    Ok(strat)
}

// ----------------------------------------------------------------- extract

/// Hex SHA-256 of the atlas bytes, the ladder and the parcellation seed.
pub fn cache_key(atlas_bytes: &[u8], ladder: &ScaleLadder, seed: u64) -> String {
    let mut h = Sha256::new();
    h.update(atlas_bytes);
    h.update(serde_json::to_vec(ladder).expect("ladder serializes"));
    h.update(seed.to_le_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub struct Parcellations {
    pub atlas: LabelVolume,
    pub scales: Vec<PatchParcellation>,
    pub from_cache: bool,
}

impl Parcellations {
    pub fn patch_to_roi(&self) -> Vec<Vec<u32>> {
        self.scales.iter().map(|p| p.patch_to_roi.clone()).collect()
    }
}

/// Multi-scale parcellation of the configured atlas, read from the cache
/// when an entry for the same atlas bytes, ladder and seed exists.
pub fn parcellations(config: &PipelineConfig) -> Result<Parcellations, PipelineError> {
    let path = &config.paths.atlas;
    let bytes = fs::read(path).map_err(io(path))?;
    let atlas = volume::decode_labels(bytes.as_slice())?;
    let seed = config.parcellation_seed();
    let dir = config.cache_root().join(cache_key(&bytes, &config.ladder, seed));
    let files = |i: usize| (dir.join(format!("scale_{i:02}.rvol")), dir.join(format!("scale_{i:02}.csv")));
    let marker = dir.join("complete");
    if marker.exists() {
        let scales = (0..config.ladder.scale_count())
            .map(|i| {
                let (l, s) = files(i);
                parcellation::load_parcellation(l, s)
            })
            .collect::<Result<Vec<_>, _>>();
        match scales {
            Ok(scales) => {
                log::info!("parcellations loaded from cache {}", dir.display());
                return Ok(Parcellations {
                    atlas,
                    scales,
                    from_cache: true,
                });
            }
            Err(e) => log::warn!("ignoring unreadable cache entry {}: {e}", dir.display()),
        }
    }
    let scales = parcellation::multiscale_parcellations(&atlas, &config.ladder, seed)?;
    create_dir(&dir)?;
    for (i, p) in scales.iter().enumerate() {
        let (l, s) = files(i);
        parcellation::save_parcellation(p, l, s)?;
    }
    fs::write(&marker, b"").map_err(io(&marker))?;
    Ok(Parcellations {
        atlas,
        scales,
        from_cache: false,
    })
}

/// Foreground-mean normalization, smoothing, then patch SUVRs at every scale.
pub fn extract_image(
    image_id: &str,
    volume: &Volume<f64>,
    parcs: &Parcellations,
    fwhm_mm: f64,
    reference_roi_id: u32,
) -> Result<MultiScaleFeatureSet<f64>, PipelineError> {
    let normalized = volume::normalize_foreground_mean(volume, &parcs.atlas)?;
    let smoothed = volume::gaussian_smooth(&normalized, fwhm_mm)?;
    Ok(features::extract_multiscale(
        image_id,
        &smoothed,
        &parcs.scales,
        reference_roi_id,
    )?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtractFailure {
    pub image_id: String,
    pub error: String,
}

#[derive(Debug)]
pub struct ExtractSummary {
    pub extracted: usize,
    pub failures: Vec<ExtractFailure>,
    pub from_cache: bool,
}

fn feature_path(config: &PipelineConfig, image_id: &str) -> PathBuf {
    config.out("features").join(format!("{image_id}.csv"))
}

pub fn cmd_extract(config: &PipelineConfig) -> Result<ExtractSummary, PipelineError> {
    let strat = load_stratification(config)?;
    let parcs = parcellations(config)?;
    let dir = config.out("features");
    create_dir(&dir)?;
    let results: Vec<Result<(), ExtractFailure>> = strat
        .images
        .par_iter()
        .map(|img| {
            let fail = |e: String| ExtractFailure {
                image_id: img.image_id.clone(),
                error: e,
            };
            let v: Volume<f64> = volume::read_volume(&img.image_path).map_err(|e| fail(e.to_string()))?;
            let set = extract_image(&img.image_id, &v, &parcs, config.fwhm_mm, config.reference_roi_id)
                .map_err(|e| fail(e.to_string()))?;
            let mut buf = Vec::new();
            features::write_features(&set, &mut buf).map_err(|e| fail(e.to_string()))?;
            fs::write(feature_path(config, &img.image_id), buf).map_err(|e| fail(e.to_string()))
        })
        .collect();
    let failures: Vec<ExtractFailure> = results.into_iter().filter_map(Result::err).collect();
    for f in &failures {
        log::warn!("feature extraction failed for {}: {}", f.image_id, f.error);
    }
    write_rows(&config.out("extract_failures.csv"), &["image_id", "error"], &failures)?;
    Ok(ExtractSummary {
        extracted: strat.images.len() - failures.len(),
        failures,
        from_cache: parcs.from_cache,
    })
}

pub fn load_features(config: &PipelineConfig, image_id: &str) -> Result<MultiScaleFeatureSet<f64>, PipelineError> {
    let path = feature_path(config, image_id);
    let file = fs::File::open(&path)
        .map_err(|e| PipelineError::Data(format!("features of image {image_id} ({}): {e}", path.display())))?;
    features::read_features(std::io::BufReader::new(file))
        .map_err(|e| PipelineError::Data(format!("features of image {image_id}: {e}")))
}

// ------------------------------------------------------------------- train

#[derive(Debug, Clone, PartialEq, Serialize)]
struct TrainingLogRow {
    classifier: usize,
    scale_index: usize,
    scale_m: u32,
    subset_index: usize,
    n_samples: usize,
    k: usize,
    converged: bool,
    iterations: usize,
    grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct SubsetRow<'a> {
    subset_index: usize,
    image_id: &'a str,
    trajectory: Trajectory,
}

pub struct TrainSummary {
    pub model: EnsembleModel<f64>,
    pub non_converged: usize,
}

/// Trains on baseline sNC (DAT-) against baseline sDAT (DAT+).
pub fn train_from_features(
    config: &PipelineConfig,
    training: &[(MultiScaleFeatureSet<f64>, Trajectory)],
) -> Result<EnsembleModel<f64>, PipelineError> {
    let (sets, labels): (Vec<_>, Vec<_>) = training.iter().cloned().unzip();
    Ok(learn::train_ensemble(&sets, &labels, &config.ensemble_config())?)
}

pub fn cmd_train(config: &PipelineConfig) -> Result<TrainSummary, PipelineError> {
    let strat = load_stratification(config)?;
    let training: Vec<(MultiScaleFeatureSet<f64>, Trajectory)> = strat
        .training()
        .map(|img| Ok((load_features(config, &img.image_id)?, img.trajectory)))
        .collect::<Result<_, PipelineError>>()?;
    let model = train_from_features(config, &training)?;
    learn::save_model(&model, &config.out("model.fpds"))?;

    let log_rows: Vec<TrainingLogRow> = model
        .classifiers
        .iter()
        .enumerate()
        .map(|(i, c)| TrainingLogRow {
            classifier: i,
            scale_index: c.scale_index,
            scale_m: model.scales[c.scale_index].scale_m,
            subset_index: c.subset_index,
            n_samples: c.fit.support_vectors.rows(),
            k: c.selected_feature_ids.len(),
            converged: c.fit.converged,
            iterations: c.fit.iterations,
            grad_norm: c.fit.grad_norm,
        })
        .collect();
    write_rows(&config.out("training_log.csv"), &[], &log_rows)?;
    let (ids, training) = (&model.training_image_ids, &training);
    let subset_rows: Vec<SubsetRow> = model
        .subsets
        .iter()
        .flat_map(|s| {
            s.member_indices.iter().map(move |&i| SubsetRow {
                subset_index: s.subset_index,
                image_id: &ids[i],
                trajectory: training[i].1,
            })
        })
        .collect();
    write_rows(&config.out("subsets.csv"), &[], &subset_rows)?;

    let non_converged = model.non_converged();
    if non_converged > 0 {
        log::warn!("{non_converged} of {} classifiers did not converge", model.classifiers.len());
    }
    Ok(TrainSummary { model, non_converged })
}

// ------------------------------------------------------------------- score

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    /// Training image, fused over the classifiers whose subset excluded it.
    Oob,
    /// Fused over every classifier.
    Fused,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredImage {
    pub image_id: String,
    pub mode: ScoreMode,
    pub fpds: f64,
    /// `(classifier index, DAT+ probability)` of every fused member.
    pub members: Vec<(usize, f64)>,
}

/// Scores one image: out-of-bag if it is a training image of `model`.
/// `Ok(None)` for a training image that every subset contains.
pub fn score_image(
    model: &EnsembleModel<f64>,
    training_index: &HashMap<&str, usize>,
    sample: &MultiScaleFeatureSet<f64>,
) -> Result<Option<ScoredImage>, PipelineError> {
    let all = learn::member_probabilities(model, sample)?;
    let (mode, chosen): (ScoreMode, Vec<usize>) = match training_index.get(sample.image_id.as_str()) {
        Some(&t) => (ScoreMode::Oob, learn::oob_classifiers(model, t)),
        None => (ScoreMode::Fused, (0..all.len()).collect()),
    };
    if chosen.is_empty() {
        return Ok(None);
    }
    let members: Vec<(usize, f64)> = chosen.iter().map(|&i| (i, all[i])).collect();
    let probs: Vec<f64> = members.iter().map(|m| m.1).collect();
    let fused = learn::fpds_from_members(&sample.image_id, &probs);
    Ok(Some(ScoredImage {
        image_id: sample.image_id.clone(),
        mode,
        fpds: fused.score,
        members,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub image_id: String,
    pub stratum: StratumLabel,
    pub trajectory: Trajectory,
    pub mode: ScoreMode,
    pub n_fused: usize,
    pub fpds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct MemberRow<'a> {
    image_id: &'a str,
    classifier: usize,
    scale_index: usize,
    subset_index: usize,
    probability: f64,
}

pub struct ScoreSummary {
    pub rows: Vec<ScoreRow>,
    pub unscored: Vec<String>,
}

fn training_index(model: &EnsembleModel<f64>) -> HashMap<&str, usize> {
    model
        .training_image_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect()
}

fn check_disjoint(strat: &Stratification, model: &EnsembleModel<f64>) -> Result<(), PipelineError> {
    let training: HashSet<&str> = model.training_image_ids.iter().map(String::as_str).collect();
    if let Some(img) = strat
        .images
        .iter()
        .find(|i| i.is_validation() && training.contains(i.image_id.as_str()))
    {
        return Err(PipelineError::Data(format!(
            "validation image {} is part of the training set",
            img.image_id
        )));
    }
    Ok(())
}

pub fn cmd_score(config: &PipelineConfig) -> Result<ScoreSummary, PipelineError> {
    let strat = load_stratification(config)?;
    let model: EnsembleModel<f64> = learn::load_model(&config.out("model.fpds"))?;
    check_disjoint(&strat, &model)?;
    let index = training_index(&model);
    let scored: Vec<Result<Option<ScoredImage>, (String, PipelineError)>> = strat
        .images
        .par_iter()
        .map(|img| {
            let wrap = |e| (img.image_id.clone(), e);
            if !feature_path(config, &img.image_id).exists() {
                return Err(wrap(PipelineError::Data("no features".into())));
            }
            let set = load_features(config, &img.image_id).map_err(wrap)?;
            score_image(&model, &index, &set).map_err(wrap)
        })
        .collect();

    let mut rows = Vec::new();
    let mut unscored = Vec::new();
    let members_path = config.out("member_probabilities.csv");
    // header written explicitly so it is present even with no scored image
    let mut members = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(&members_path)
        .map_err(|e| PipelineError::Data(format!("{}: {e}", members_path.display())))?;
    members.write_record(["image_id", "classifier", "scale_index", "subset_index", "probability"])?;
    for (img, result) in strat.images.iter().zip(scored) {
        match result {
            Ok(Some(s)) => {
                for &(c, p) in &s.members {
                    let cl = &model.classifiers[c];
                    members.serialize(MemberRow {
                        image_id: &s.image_id,
                        classifier: c,
                        scale_index: cl.scale_index,
                        subset_index: cl.subset_index,
                        probability: p,
                    })?;
                }
                rows.push(ScoreRow {
                    image_id: s.image_id,
                    stratum: img.stratum,
                    trajectory: img.trajectory,
                    mode: s.mode,
                    n_fused: s.members.len(),
                    fpds: s.fpds,
                });
            }
            Ok(None) => {
                log::warn!("training image {} has no out-of-bag classifiers; not scored", img.image_id);
                unscored.push(img.image_id.clone());
            }
            Err((id, e)) => {
                log::warn!("image {id} not scored: {e}");
                unscored.push(id);
            }
        }
    }
    members.flush().map_err(io(&members_path))?;
    write_rows(&config.out("scores.csv"), &[], &rows)?;
    Ok(ScoreSummary { rows, unscored })
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>, PipelineError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<Result<Vec<ScoreRow>, _>>()
        .map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------- evaluate

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub const SUMMARY_HEADER: [&str; 10] = [
    "set",
    "n",
    "positives",
    "negatives",
    "mean_fpds",
    "auc",
    "accuracy",
    "sensitivity",
    "specificity",
    "balanced_accuracy",
];

/// One row of a train-fit or validation table. Metrics that need a class
/// absent from the set are left blank.
fn summary_row(set: &str, scores: &[f64], labels: &[bool], threshold: f64) -> Vec<String> {
    let n = scores.len();
    let pos = labels.iter().filter(|&&l| l).count();
    let mut row = vec![set.to_string(), n.to_string(), pos.to_string(), (n - pos).to_string()];
    if n == 0 {
        row.resize(SUMMARY_HEADER.len(), String::new());
        return row;
    }
    row.push((scores.iter().sum::<f64>() / n as f64).to_string());
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s > threshold) == l)
        .count();
    let accuracy = correct as f64 / n as f64;
    match (metrics::roc_auc(scores, labels), metrics::threshold_metrics(scores, labels, threshold)) {
        (Ok(roc), Ok(m)) => row.extend([
            roc.auc.to_string(),
            m.accuracy.to_string(),
            m.sensitivity.to_string(),
            m.specificity.to_string(),
            m.balanced_accuracy.to_string(),
        ]),
        _ => {
            let one_class = if pos > 0 {
                [Some(accuracy), None]
            } else {
                [None, Some(accuracy)]
            };
            row.extend([
                String::new(),
                accuracy.to_string(),
                fmt_opt(one_class[0]),
                fmt_opt(one_class[1]),
                String::new(),
            ]);
        }
    }
    row
}

fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), PipelineError> {
    let mut w = csv_writer(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(io(path))
}

pub const REPORT_FILES: [&str; 8] = [
    "train_fit.csv",
    "validation.csv",
    "binned_age.csv",
    "binned_ttc.csv",
    "conversion_windows.csv",
    "correlation.csv",
    "group_tests.csv",
    "roi_selection.csv",
];

struct Joined<'a> {
    score: &'a ScoreRow,
    image: &'a ImageStratum,
}

fn column<'a>(items: &[&Joined<'a>]) -> (Vec<f64>, Vec<bool>) {
    (
        items.iter().map(|j| j.score.fpds).collect(),
        items.iter().map(|j| j.score.trajectory.is_positive()).collect(),
    )
}

pub fn cmd_evaluate(config: &PipelineConfig) -> Result<(), PipelineError> {
    let strat = load_stratification(config)?;
    let scores = read_scores(&config.out("scores.csv"))?;
    let model: EnsembleModel<f64> = learn::load_model(&config.out("model.fpds"))?;
    check_disjoint(&strat, &model)?;
    let parcs = parcellations(config)?;
    let selection = learn::selection_frequency(&model, &parcs.patch_to_roi())?;
    evaluate_scores(config, &strat, &scores, &selection)
}

/// Writes every report under `<output_dir>/reports`.
pub fn evaluate_scores(
    config: &PipelineConfig,
    strat: &Stratification,
    scores: &[ScoreRow],
    selection: &[learn::RoiFrequency],
) -> Result<(), PipelineError> {
    let ev = &config.evaluation;
    let dir = config.reports();
    create_dir(&dir)?;
    let by_id: HashMap<&str, &ImageStratum> = strat.images.iter().map(|i| (i.image_id.as_str(), i)).collect();
    let joined: Vec<Joined> = scores
        .iter()
        .map(|s| {
            by_id
                .get(s.image_id.as_str())
                .map(|image| Joined { score: s, image })
                .ok_or_else(|| PipelineError::Data(format!("scored image {} is not in the cohort", s.image_id)))
        })
        .collect::<Result<_, _>>()?;
    let select = |f: &dyn Fn(&Joined) -> bool| joined.iter().filter(|j| f(j)).collect::<Vec<_>>();
    let mut summary = String::new();

    // (a) training fit
    let baseline = select(&|j| j.image.is_training());
    let followup = select(&|j| !j.image.is_training() && !j.image.is_validation());
    let train_all = select(&|j| !j.image.is_validation());
    let mut rows = Vec::new();
    for (name, set) in [("baseline_oob", &baseline), ("followup", &followup), ("all", &train_all)] {
        let (s, l) = column(set);
        rows.push(summary_row(name, &s, &l, ev.threshold));
    }
    write_table(&dir.join("train_fit.csv"), &SUMMARY_HEADER, &rows)?;
    let _ = writeln!(summary, "training fit (sNC/sDAT)");
    for r in &rows {
        let _ = writeln!(summary, "  {:<14} n={:<4} auc={:<22} balanced_accuracy={}", r[0], r[1], r[5], r[9]);
    }

    // (b) validation
    let validation = select(&|j| j.image.is_validation());
    let (s, l) = column(&validation);
    let mut rows = vec![summary_row("validation", &s, &l, ev.threshold)];
    for stratum in StratumLabel::ALL.into_iter().filter(|s| !matches!(s, StratumLabel::SNc | StratumLabel::SDat)) {
        let (s, l) = column(&select(&|j| j.image.stratum == stratum));
        rows.push(summary_row(stratum.as_str(), &s, &l, ev.threshold));
    }
    write_table(&dir.join("validation.csv"), &SUMMARY_HEADER, &rows)?;
    let _ = writeln!(summary, "validation (uNC, sMCI, pNC, pMCI, eDAT)");
    for r in &rows {
        let _ = writeln!(summary, "  {:<14} n={:<4} auc={:<22} accuracy={}", r[0], r[1], r[5], r[6]);
    }

    // (c) binned tables, one group per stratum
    let bin_header = ["group", "lower", "upper", "n", "mean_fpds", "accuracy"];
    for (file, edges, covariate, dat_plus_only) in [
        ("binned_age.csv", &ev.age_edges, (|i: &ImageStratum| i.age_years) as fn(&ImageStratum) -> Option<f64>, false),
        ("binned_ttc.csv", &ev.ttc_edges, |i: &ImageStratum| i.time_to_conversion, true),
    ] {
        let mut rows = Vec::new();
        for stratum in StratumLabel::ALL {
            if dat_plus_only && !stratum.trajectory().is_positive() {
                continue;
            }
            let group = select(&|j| j.image.stratum == stratum);
            if group.is_empty() {
                continue;
            }
            let (s, l) = column(&group);
            let cov: Vec<Option<f64>> = group.iter().map(|j| covariate(j.image)).collect();
            let table = metrics::binned_report(&s, &l, &cov, edges, ev.threshold)?;
            for b in &table.rows {
                rows.push(vec![
                    stratum.as_str().to_string(),
                    b.lower.to_string(),
                    b.upper.to_string(),
                    b.n.to_string(),
                    b.mean_score.to_string(),
                    b.accuracy.to_string(),
                ]);
            }
            if table.dropped_missing + table.dropped_out_of_range > 0 {
                let _ = writeln!(
                    summary,
                    "{file}: {} dropped {} without and {} outside the bins",
                    stratum.as_str(),
                    table.dropped_missing,
                    table.dropped_out_of_range
                );
            }
        }
        write_table(&dir.join(file), &bin_header, &rows)?;
    }

    // (d) conversion windows
    let smci: Vec<f64> = select(&|j| j.image.stratum == StratumLabel::SMci).iter().map(|j| j.score.fpds).collect();
    let pmci: Vec<(f64, f64)> = select(&|j| j.image.stratum == StratumLabel::PMci)
        .iter()
        .filter_map(|j| j.image.time_to_conversion.map(|t| (j.score.fpds, t)))
        .collect();
    let mut rows = Vec::new();
    let _ = writeln!(summary, "sMCI vs pMCI by conversion window");
    for &w in &ev.conversion_windows {
        let positives = pmci.iter().filter(|p| p.1 <= w).count();
        let auc = if smci.is_empty() {
            None
        } else {
            metrics::windowed_conversion_auc(&smci, &pmci, w).ok().map(|r| r.auc)
        };
        let _ = writeln!(summary, "  0-{w} years: {}:{positives} auc={}", smci.len(), fmt_opt(auc));
        rows.push(vec![w.to_string(), smci.len().to_string(), positives.to_string(), fmt_opt(auc)]);
    }
    write_table(&dir.join("conversion_windows.csv"), &["window_years", "negatives", "positives", "auc"], &rows)?;

    // (e) CSF correlation
    let mut rows = Vec::new();
    let groups: Vec<(String, Vec<&Joined>)> = std::iter::once(("all".to_string(), joined.iter().collect()))
        .chain(StratumLabel::ALL.iter().map(|s| (s.as_str().to_string(), select(&|j| j.image.stratum == *s))))
        .collect();
    for (name, group) in &groups {
        let (x, y): (Vec<f64>, Vec<f64>) = group
            .iter()
            .filter_map(|j| j.image.csf_ttau_abeta.map(|c| (c, j.score.fpds)))
            .unzip();
        if x.is_empty() {
            continue;
        }
        let (r, p) = match metrics::pearson(&x, &y) {
            Ok(c) => (Some(c.r), Some(c.p)),
            Err(_) => (None, None),
        };
        rows.push(vec![name.clone(), x.len().to_string(), fmt_opt(r), fmt_opt(p)]);
    }
    write_table(&dir.join("correlation.csv"), &["group", "n", "r", "p"], &rows)?;

    // (f) pairwise group tests between strata
    let mut rows = Vec::new();
    let present: Vec<(StratumLabel, Vec<f64>)> = StratumLabel::ALL
        .iter()
        .map(|&s| (s, select(&|j| j.image.stratum == s).iter().map(|j| j.score.fpds).collect::<Vec<_>>()))
        .filter(|(_, v)| v.len() >= 4)
        .collect();
    for (i, (sa, a)) in present.iter().enumerate() {
        for (sb, b) in &present[i + 1..] {
            let Ok(t) = metrics::pairwise_group_test(a, b, &ev.group_tests) else {
                continue;
            };
            rows.push(vec![
                sa.as_str().to_string(),
                sb.as_str().to_string(),
                a.len().to_string(),
                b.len().to_string(),
                t.kind.as_str().to_string(),
                t.statistic.to_string(),
                t.p.to_string(),
                (t.p < ev.significance).to_string(),
            ]);
        }
    }
    write_table(
        &dir.join("group_tests.csv"),
        &["group_a", "group_b", "n_a", "n_b", "test", "statistic", "p", "significant"],
        &rows,
    )?;

    // (g) ROI selection frequency
    let rows: Vec<Vec<String>> = selection
        .iter()
        .map(|r| vec![r.roi_id.to_string(), r.count.to_string(), r.frequency.to_string()])
        .collect();
    write_table(&dir.join("roi_selection.csv"), &["roi_id", "count", "frequency"], &rows)?;
    let _ = writeln!(summary, "most selected ROIs");
    for r in selection.iter().take(10) {
        let _ = writeln!(summary, "  ROI {:<5} {:.3}", r.roi_id, r.frequency);
    }

    let path = dir.join("summary.txt");
    let mut f = fs::File::create(&path).map_err(io(&path))?;
    f.write_all(summary.as_bytes()).map_err(io(&path))?;
    Ok(())
}

// ----------------------------------------------------------------- phantom

pub fn cmd_phantom(config: &PipelineConfig) -> Result<phantom::Phantom, PipelineError> {
    let dir = &config.paths.phantom_dir;
    create_dir(dir)?;
    Ok(phantom::make_cohort(&config.phantom_spec(), dir)?)
}

#[derive(Debug)]
pub struct RunSummary {
    pub images: usize,
    pub exclusions: usize,
    pub extract_failures: usize,
    pub scored: usize,
    pub unscored: usize,
    pub classifiers: usize,
    pub non_converged: usize,
}

/// phantom -> stratify -> extract -> train -> score -> evaluate, reading the
/// atlas and cohort from the phantom directory.
pub fn run_all(config: &PipelineConfig) -> Result<RunSummary, PipelineError> {
    config.validate()?;
    let mut config = config.clone();
    cmd_phantom(&config)?;
    config.paths.atlas = config.paths.phantom_dir.join("atlas.rvol");
    config.paths.cohort = config.paths.phantom_dir.join("cohort.csv");
    let strat = cmd_stratify(&config)?;
    let extract = cmd_extract(&config)?;
    let train = cmd_train(&config)?;
    let score = cmd_score(&config)?;
    cmd_evaluate(&config)?;
    Ok(RunSummary {
        images: strat.images.len(),
        exclusions: strat.exclusions.len(),
        extract_failures: extract.failures.len(),
        scored: score.rows.len(),
        unscored: score.unscored.len(),
        classifiers: train.model.classifiers.len(),
        non_converged: train.non_converged,
    })
}

// ------------------------------------------------------ in-memory experiment

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub heldout_auc: f64,
    pub oob_auc: f64,
    pub heldout: Vec<(String, f64, bool)>,
    pub oob: Vec<(String, f64, bool)>,
    pub selection: Vec<learn::RoiFrequency>,
    pub classifiers: usize,
    pub non_converged: usize,
}

/// Generates `spec`, trains on its baseline sNC/sDAT images and scores the
/// rest, without touching the filesystem. Training images every subset
/// contains are left out of the OOB AUC.
pub fn phantom_experiment(config: &PipelineConfig, spec: &PhantomSpec) -> Result<ExperimentOutcome, PipelineError> {
    config.validate()?;
    let p = phantom::generate(spec)?;
    let strat = stratify_records(&p.records)?;
    let scales = parcellation::multiscale_parcellations(&p.atlas, &config.ladder, config.parcellation_seed())?;
    let parcs = Parcellations {
        atlas: p.atlas.clone(),
        scales,
        from_cache: false,
    };
    let volumes: HashMap<&str, &Volume<f64>> = p.images.iter().map(|i| (i.image_id.as_str(), &i.volume)).collect();
    let feats: Vec<MultiScaleFeatureSet<f64>> = strat
        .images
        .par_iter()
        .map(|img| extract_image(&img.image_id, volumes[img.image_id.as_str()], &parcs, config.fwhm_mm, config.reference_roi_id))
        .collect::<Result<_, _>>()?;
    let training: Vec<(MultiScaleFeatureSet<f64>, Trajectory)> = strat
        .images
        .iter()
        .zip(&feats)
        .filter(|(i, _)| i.is_training())
        .map(|(i, f)| (f.clone(), i.trajectory))
        .collect();
    let model = train_from_features(config, &training)?;
    check_disjoint(&strat, &model)?;
    let index = training_index(&model);

    let mut heldout = Vec::new();
    let mut oob = Vec::new();
    for (img, f) in strat.images.iter().zip(&feats) {
        let positive = img.trajectory.is_positive();
        if img.is_validation() {
            let s = score_image(&model, &index, f)?.expect("validation images fuse every classifier");
            heldout.push((img.image_id.clone(), s.fpds, positive));
        } else if img.is_training() {
            if let Some(s) = score_image(&model, &index, f)? {
                oob.push((img.image_id.clone(), s.fpds, positive));
            }
        }
    }
    let auc = |rows: &[(String, f64, bool)]| -> Result<f64, PipelineError> {
        let s: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let l: Vec<bool> = rows.iter().map(|r| r.2).collect();
        Ok(metrics::roc_auc(&s, &l)?.auc)
    };
    Ok(ExperimentOutcome {
        heldout_auc: auc(&heldout)?,
        oob_auc: auc(&oob)?,
        selection: learn::selection_frequency(&model, &parcs.patch_to_roi())?,
        classifiers: model.classifiers.len(),
        non_converged: model.non_converged(),
        heldout,
        oob,
    })
}

/// Index of every scored image's rows in `member_probabilities.csv`.
pub fn read_member_probabilities(path: &Path) -> Result<BTreeMap<String, Vec<(usize, usize, f64)>>, PipelineError> {
    #[derive(Deserialize)]
    struct Row {
        image_id: String,
        classifier: usize,
        #[allow(dead_code)]
        scale_index: usize,
        subset_index: usize,
        probability: f64,
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
    let mut out: BTreeMap<String, Vec<(usize, usize, f64)>> = BTreeMap::new();
    for row in r.deserialize::<Row>() {
        let row = row?;
        out.entry(row.image_id).or_default().push((row.classifier, row.subset_index, row.probability));
    }
    Ok(out)
}
