//! Synthetic atlases, volumes and longitudinal cohorts with planted
//! hypometabolism in a known set of ROIs.
//!
//! Every voxel is `1 + N(0, noise_sigma)`; DAT+ images have the affected
//! ROIs lowered by `effect_size * noise_sigma`, so the effect size is in
//! units of the voxel-level within-class deviation.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{self, Diagnosis, LongitudinalRecord, StratumLabel, Trajectory, Visit};
use crate::seed;
use crate::volume::{self, Geometry, LabelVolume, Volume, VolumeError};

const SUBJECT_STREAM: u64 = 0x5B1E_C700;
const IMAGE_STREAM: u64 = 0x1A6E_0000;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    Spec(String),
    #[error("{n_rois} ROI boxes of {roi_box:?} voxels do not fit a {dims:?} grid")]
    Packing {
        n_rois: usize,
        roi_box: [usize; 3],
        dims: [usize; 3],
    },
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Subjects generated per stratum. Each contributes one image of its stratum.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StratumCounts {
    pub snc: usize,
    pub unc: usize,
    pub smci: usize,
    pub pnc: usize,
    pub pmci: usize,
    pub edat: usize,
    pub sdat: usize,
}

impl Default for StratumCounts {
    fn default() -> Self {
        StratumCounts {
            snc: 30,
            unc: 7,
            smci: 13,
            pnc: 6,
            pmci: 7,
            edat: 7,
            sdat: 30,
        }
    }
}

impl StratumCounts {
    pub fn get(&self, s: StratumLabel) -> usize {
        match s {
            StratumLabel::SNc => self.snc,
            StratumLabel::UNc => self.unc,
            StratumLabel::SMci => self.smci,
            StratumLabel::PNc => self.pnc,
            StratumLabel::PMci => self.pmci,
            StratumLabel::EDat => self.edat,
            StratumLabel::SDat => self.sdat,
        }
    }

    pub fn total(&self) -> usize {
        StratumLabel::ALL.iter().map(|&s| self.get(s)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// ROI labels are `1..=n_rois`.
    pub n_rois: usize,
    /// Extent of every rectangular ROI, in voxels.
    pub roi_box: [usize; 3],
    pub reference_roi: u32,
    pub affected_rois: Vec<u32>,
    pub effect_size: f64,
    pub noise_sigma: f64,
    pub subjects: StratumCounts,
    /// Extra imaged follow-up visits, alternating between sNC and sDAT subjects.
    pub followup_images: usize,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [40, 40, 40],
            spacing: [1.5, 1.5, 1.5],
            n_rois: 9,
            roi_box: [8, 8, 9],
            reference_roi: 9,
            affected_rois: vec![2, 4, 6],
            effect_size: 2.0,
            noise_sigma: 0.05,
            subjects: StratumCounts::default(),
            followup_images: 10,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: String| Err(PhantomError::Spec(m));
        if self.n_rois < 2 {
            return bad("at least two ROIs are needed".into());
        }
        let valid = |r: u32| r >= 1 && r as usize <= self.n_rois;
        if !valid(self.reference_roi) {
            return bad(format!("reference ROI {} does not exist", self.reference_roi));
        }
        if let Some(r) = self.affected_rois.iter().find(|&&r| !valid(r)) {
            return bad(format!("affected ROI {r} does not exist"));
        }
        if self.affected_rois.contains(&self.reference_roi) {
            return bad("the reference ROI cannot be affected".into());
        }
        if !(self.effect_size >= 0.0 && self.effect_size.is_finite()) {
            return bad(format!("effect size must be >= 0, got {}", self.effect_size));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma must be > 0, got {}", self.noise_sigma));
        }
        Geometry::new(self.dims, self.spacing)?;
        Ok(())
    }

    fn grid(&self) -> (usize, usize) {
        let cols = (self.n_rois as f64).sqrt().ceil() as usize;
        (cols, self.n_rois.div_ceil(cols))
    }
}

/// Rectangular ROIs centred in the cells of a near-square grid over x and y,
/// centred in z, surrounded by background.
pub fn make_atlas(spec: &PhantomSpec) -> Result<LabelVolume, PhantomError> {
    spec.validate()?;
    let (cols, rows) = spec.grid();
    let [nx, ny, nz] = spec.dims;
    let (cell_x, cell_y) = (nx / cols, ny / rows);
    let b = spec.roi_box;
    if b.contains(&0) || b[0] >= cell_x || b[1] >= cell_y || b[2] > nz {
        return Err(PhantomError::Packing {
            n_rois: spec.n_rois,
            roi_box: b,
            dims: spec.dims,
        });
    }
    let g = Geometry::new(spec.dims, spec.spacing)?;
    let mut labels = vec![0u32; g.len()];
    let z0 = (nz - b[2]) / 2;
    for roi in 0..spec.n_rois {
        let x0 = (roi % cols) * cell_x + (cell_x - b[0]) / 2;
        let y0 = (roi / cols) * cell_y + (cell_y - b[1]) / 2;
        for z in z0..z0 + b[2] {
            for y in y0..y0 + b[1] {
                for x in x0..x0 + b[0] {
                    labels[g.index(x, y, z)] = roi as u32 + 1;
                }
            }
        }
    }
    Ok(LabelVolume::new(g, labels)?)
}

/// One image: baseline 1 plus voxel noise, with the planted reduction in
/// the affected ROIs for DAT+.
pub fn make_subject_volume(
    spec: &PhantomSpec,
    atlas: &LabelVolume,
    trajectory: Trajectory,
    rng: &mut impl Rng,
) -> Volume<f64> {
    let sigma = spec.noise_sigma;
    let mut shift = vec![0.0; spec.n_rois + 1];
    if trajectory.is_positive() {
        for &roi in &spec.affected_rois {
            shift[roi as usize] = -spec.effect_size * sigma;
        }
    }
    let data = atlas
        .labels
        .iter()
        .map(|&l| {
            let z: f64 = rng.sample(StandardNormal);
            1.0 + shift.get(l as usize).copied().unwrap_or(0.0) + sigma * z
        })
        .collect();
    Volume {
        geometry: atlas.geometry,
        data,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomImage {
    pub image_id: String,
    pub subject_id: String,
    pub visit_index: usize,
    pub stratum: StratumLabel,
    pub trajectory: Trajectory,
    pub volume: Volume<f64>,
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub spec: PhantomSpec,
    pub atlas: LabelVolume,
    /// Image paths are relative, of the form `images/<image_id>.rvol`.
    pub records: Vec<LongitudinalRecord>,
    pub images: Vec<PhantomImage>,
}

use Diagnosis::{DAT, MCI, NC};

/// Diagnosis sequence and index of the stratum-defining imaged visit.
fn visit_plan(stratum: StratumLabel, rng: &mut impl Rng) -> (Vec<Diagnosis>, usize) {
    fn push(seq: &mut Vec<Diagnosis>, d: Diagnosis, lo: usize, hi: usize, rng: &mut impl Rng) {
        let n = rng.random_range(lo..=hi);
        seq.extend(std::iter::repeat_n(d, n));
    }
    let mut seq = Vec::new();
    let image = match stratum {
        StratumLabel::SNc => {
            push(&mut seq, NC, 3, 4, rng);
            0
        }
        StratumLabel::SDat => {
            push(&mut seq, DAT, 2, 3, rng);
            0
        }
        StratumLabel::UNc => {
            push(&mut seq, NC, 1, 2, rng);
            push(&mut seq, MCI, 1, 3, rng);
            0
        }
        StratumLabel::SMci => {
            push(&mut seq, NC, 0, 1, rng);
            let first_mci = seq.len();
            push(&mut seq, MCI, 2, 4, rng);
            first_mci
        }
        StratumLabel::PNc => {
            push(&mut seq, NC, 1, 2, rng);
            push(&mut seq, MCI, 1, 3, rng);
            push(&mut seq, DAT, 1, 1, rng);
            0
        }
        StratumLabel::PMci => {
            push(&mut seq, MCI, 1, 6, rng);
            push(&mut seq, DAT, 1, 2, rng);
            0
        }
        StratumLabel::EDat => {
            push(&mut seq, NC, 0, 1, rng);
            push(&mut seq, MCI, 1, 2, rng);
            let first_dat = seq.len();
            push(&mut seq, DAT, 1, 2, rng);
            first_dat
        }
    };
    (seq, image)
}

fn round_to(x: f64, digits: i32) -> f64 {
    let s = 10f64.powi(digits);
    (x * s).round() / s
}

/// Builds the full phantom in memory. Output depends only on `spec`.
pub fn generate(spec: &PhantomSpec) -> Result<Phantom, PhantomError> {
    let atlas = make_atlas(spec)?;
    let mut records = Vec::new();
    let mut planned = Vec::new();
    let mut followups_left = spec.followup_images;
    let mut subject = 0u64;
    for stratum in StratumLabel::ALL {
        let trajectory = stratum.trajectory();
        for i in 0..spec.subjects.get(stratum) {
            let mut rng = seed::rng(seed::derive(spec.seed, &[SUBJECT_STREAM, subject]));
            let subject_id = format!("S{:04}", subject + 1);
            let (diagnoses, image_at) = visit_plan(stratum, &mut rng);
            // follow-ups alternate sNC / sDAT so both training classes get some
            let wants_followup = followups_left > 0
                && matches!(stratum, StratumLabel::SNc | StratumLabel::SDat)
                && i < spec.followup_images.div_ceil(2);
            if wants_followup {
                followups_left -= 1;
            }
            let age0 = rng.random_range(60.0..85.0);
            let mut months = 0.0;
            let mut visits = Vec::with_capacity(diagnoses.len());
            for (v, &d) in diagnoses.iter().enumerate() {
                if v > 0 {
                    months += rng.random_range(6..=12) as f64;
                }
                let mut visit = Visit::new(months, d);
                visit.age_years = Some(round_to(age0 + months / 12.0, 1));
                visit.mmse = Some(match d {
                    NC => rng.random_range(27..=30),
                    MCI => rng.random_range(22..=28),
                    DAT => rng.random_range(12..=24),
                } as f64);
                let csf_mean = if trajectory.is_positive() { 0.55 } else { 0.3 };
                let z: f64 = rng.sample(StandardNormal);
                if rng.random_bool(0.85) {
                    visit.csf_ttau_abeta = Some(round_to((csf_mean + 0.12 * z).max(0.05), 3));
                }
                let last = v + 1 == diagnoses.len();
                if v == image_at || (wants_followup && last) {
                    let id = format!("{subject_id}_m{:03}", months as u32);
                    visit.has_image = true;
                    visit.image_path = Some(PathBuf::from(format!("images/{id}.rvol")));
                    planned.push((subject, id, subject_id.clone(), v, trajectory));
                }
                visits.push(visit);
            }
            let record = LongitudinalRecord::new(subject_id, visits)
                .expect("visit times strictly increase");
            records.push(record);
            subject += 1;
        }
    }

    let images = planned
        .into_iter()
        .zip(
            // stratum of every planned image, recovered from its record
            records.iter().flat_map(|r| {
                r.image_visit_indices()
                    .map(|v| cohort::assign_stratum(r, v).expect("generated records are monotone"))
                    .collect::<Vec<_>>()
            }),
        )
        .map(|((subject, image_id, subject_id, visit_index, trajectory), stratum)| {
            let mut rng = seed::rng(seed::derive(
                spec.seed,
                &[IMAGE_STREAM, subject, visit_index as u64],
            ));
            PhantomImage {
                volume: make_subject_volume(spec, &atlas, trajectory, &mut rng),
                image_id,
                subject_id,
                visit_index,
                stratum,
                trajectory,
            }
        })
        .collect();

    Ok(Phantom {
        spec: spec.clone(),
        atlas,
        records,
        images,
    })
}

pub const MANIFEST_HEADER: [&str; 7] = [
    "image_id",
    "subject_id",
    "stratum",
    "trajectory",
    "affected_rois",
    "reference_roi",
    "effect_size",
];

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PhantomError + '_ {
    move |source| PhantomError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `atlas.rvol`, `images/*.rvol`, `cohort.csv` and
/// `phantom_manifest.csv` under `dir`.
pub fn write_phantom(phantom: &Phantom, dir: &Path) -> Result<(), PhantomError> {
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(io_err(&images_dir))?;
    volume::write_labels(&phantom.atlas, dir.join("atlas.rvol"))?;
    for image in &phantom.images {
        let stored = image.volume.map(|x| x as f32 as f64);
        volume::write_volume(&stored, images_dir.join(format!("{}.rvol", image.image_id)))?;
    }

    let cohort_path = dir.join("cohort.csv");
    let file = std::fs::File::create(&cohort_path).map_err(io_err(&cohort_path))?;
    cohort::write_cohort(std::io::BufWriter::new(file), &phantom.records, Path::new(""))?;

    let manifest_path = dir.join("phantom_manifest.csv");
    let file = std::fs::File::create(&manifest_path).map_err(io_err(&manifest_path))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    w.write_record(MANIFEST_HEADER)?;
    let affected = phantom
        .spec
        .affected_rois
        .iter()
        .map(u32::to_string)
        .collect::<Vec<_>>()
        .join(";");
    for image in &phantom.images {
        w.write_record([
            image.image_id.as_str(),
            image.subject_id.as_str(),
            image.stratum.as_str(),
            image.trajectory.as_str(),
            affected.as_str(),
            &phantom.spec.reference_roi.to_string(),
            &phantom.spec.effect_size.to_string(),
        ])?;
    }
    w.flush().map_err(io_err(&manifest_path))?;
    Ok(())
}

/// `generate` followed by `write_phantom`.
pub fn make_cohort(spec: &PhantomSpec, dir: &Path) -> Result<Phantom, PhantomError> {
    let phantom = generate(spec)?;
    write_phantom(&phantom, dir)?;
    Ok(phantom)
}
