//! Patch-wise parcellation of ROIs by k-means on voxel positions.
//!
//! Each ROI `r` with `|r|` voxels is split into `max(1, round(|r| / m))`
//! patches, so patch density is roughly `1/m` regardless of ROI size.
//! Repeating this over a ladder of patch sizes gives a fine-to-coarse
//! multi-scale representation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;
use crate::volume::{self, LabelVolume, VolumeError};

pub const MAX_LLOYD_ITERATIONS: usize = 100;

#[derive(Debug, Error)]
pub enum ParcellationError {
    #[error("ROI volume has no labelled voxels")]
    EmptyRois,
    #[error("patch size must be positive")]
    ZeroPatchSize,
    #[error("scale ladder patch sizes must be strictly increasing: {0:?}")]
    Ladder(Vec<u32>),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("{path}: {message}")]
    Sidecar { path: PathBuf, message: String },
}

/// Ordered patch sizes (voxels per patch), optionally followed by the
/// unsplit ROI parcellation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScaleLadder {
    pub patch_sizes: Vec<u32>,
    pub include_original: bool,
}

impl ScaleLadder {
    pub fn new(patch_sizes: Vec<u32>, include_original: bool) -> Result<Self, ParcellationError> {
        let ladder = ScaleLadder {
            patch_sizes,
            include_original,
        };
        ladder.validate()?;
        Ok(ladder)
    }

    pub fn validate(&self) -> Result<(), ParcellationError> {
        if self.patch_sizes.contains(&0) {
            return Err(ParcellationError::ZeroPatchSize);
        }
        if self.patch_sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ParcellationError::Ladder(self.patch_sizes.clone()));
        }
        Ok(())
    }

    /// Number of feature spaces M.
    pub fn scale_count(&self) -> usize {
        self.patch_sizes.len() + usize::from(self.include_original)
    }

    /// Scale identifiers in output order; 0 stands for the original parcellation.
    pub fn scales(&self) -> Vec<u32> {
        let mut s = self.patch_sizes.clone();
        if self.include_original {
            s.push(0);
        }
        s
    }

    pub fn largest_patch_size(&self) -> u32 {
        self.patch_sizes.last().copied().unwrap_or(0)
    }
}

impl Default for ScaleLadder {
    /// Sixteen patch sizes from 100 to 10000 voxels plus the original ROIs (M = 17).
    fn default() -> Self {
        ScaleLadder {
            patch_sizes: vec![
                100, 150, 200, 250, 300, 350, 400, 450, 500, 1000, 1500, 2000, 3000, 4000, 5000,
                10000,
            ],
            include_original: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchParcellation {
    pub source_roi_count: usize,
    /// Nonzero labels are patch ids, dense in `1..=patch_count`.
    pub patch_labels: LabelVolume,
    /// `patch_to_roi[id - 1]` is the ROI label of patch `id`.
    pub patch_to_roi: Vec<u32>,
    /// Patch size the parcellation was built with; 0 for the original ROIs.
    pub scale_m: u32,
}

impl PatchParcellation {
    pub fn patch_count(&self) -> usize {
        self.patch_to_roi.len()
    }

    pub fn patch_ids(&self) -> impl Iterator<Item = u32> {
        1..=self.patch_to_roi.len() as u32
    }

    pub fn roi_of(&self, patch_id: u32) -> Option<u32> {
        patch_id
            .checked_sub(1)
            .and_then(|i| self.patch_to_roi.get(i as usize))
            .copied()
    }

    /// Voxels per patch, indexed by `id - 1`.
    pub fn voxel_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.patch_count()];
        for &l in &self.patch_labels.labels {
            if l != 0 {
                counts[l as usize - 1] += 1;
            }
        }
        counts
    }

    /// Wraps an ROI volume as a parcellation with one patch per ROI.
    pub fn original(rois: &LabelVolume) -> Result<Self, ParcellationError> {
        let ids = rois.label_ids();
        if ids.is_empty() {
            return Err(ParcellationError::EmptyRois);
        }
        let labels = rois
            .labels
            .iter()
            .map(|&l| {
                if l == 0 {
                    0
                } else {
                    ids.binary_search(&l).expect("label listed") as u32 + 1
                }
            })
            .collect();
        Ok(PatchParcellation {
            source_roi_count: ids.len(),
            patch_labels: LabelVolume::new(rois.geometry, labels)?,
            patch_to_roi: ids,
            scale_m: 0,
        })
    }
}

/// `max(1, round_half_up(n / m))`, capped at `n`.
pub fn patches_for_roi(voxels: usize, m: u32) -> usize {
    let m = m as usize;
    ((2 * voxels + m) / (2 * m)).max(1).min(voxels.max(1))
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<[f64; 3]>,
    pub iterations: usize,
    /// Lloyd iterations reached an assignment fixpoint.
    pub converged: bool,
}

#[inline]
fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

fn nearest(p: &[f64; 3], centroids: &[[f64; 3]]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, q) in centroids.iter().enumerate() {
        let d = dist2(p, q);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

fn kmeans_plus_plus(points: &[[f64; 3]], k: usize, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..points.len())]);
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            d2.iter()
                .position(|&d| {
                    acc += d;
                    acc > target
                })
                .unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).unwrap_or(0))
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[pick];
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Moves the point farthest from its centroid (taken from a cluster with
/// more than one member) into each empty cluster.
fn repair_empty(
    points: &[[f64; 3]],
    assignments: &mut [usize],
    centroids: &mut [[f64; 3]],
    sizes: &mut [usize],
) -> bool {
    let mut repaired = false;
    for c in 0..centroids.len() {
        if sizes[c] != 0 {
            continue;
        }
        let far = (0..points.len())
            .filter(|&i| sizes[assignments[i]] > 1)
            .max_by(|&a, &b| {
                dist2(&points[a], &centroids[assignments[a]])
                    .total_cmp(&dist2(&points[b], &centroids[assignments[b]]))
                    .then(b.cmp(&a))
            });
        if let Some(i) = far {
            sizes[assignments[i]] -= 1;
            assignments[i] = c;
            sizes[c] = 1;
            centroids[c] = points[i];
            repaired = true;
        }
    }
    repaired
}

/// k-means++ seeding followed by Lloyd iterations until the assignment is
/// a fixpoint or `max_iter` updates have run. Requires `1 <= k <= points.len()`.
pub fn kmeans(points: &[[f64; 3]], k: usize, rng: &mut impl Rng, max_iter: usize) -> KMeansResult {
    assert!(k >= 1 && k <= points.len(), "k out of range");
    let mut centroids = kmeans_plus_plus(points, k, rng);
    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    let mut sizes = vec![0usize; k];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < max_iter {
        iterations += 1;
        let mut sums = vec![[0.0f64; 3]; k];
        sizes.iter_mut().for_each(|s| *s = 0);
        for (p, &a) in points.iter().zip(&assignments) {
            sums[a][0] += p[0];
            sums[a][1] += p[1];
            sums[a][2] += p[2];
            sizes[a] += 1;
        }
        for c in 0..k {
            if sizes[c] > 0 {
                let n = sizes[c] as f64;
                centroids[c] = [sums[c][0] / n, sums[c][1] / n, sums[c][2] / n];
            }
        }
        repair_empty(points, &mut assignments, &mut centroids, &mut sizes);
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        if next == assignments {
            converged = true;
            break;
        }
        assignments = next;
    }

    // a capped run can end with an empty cluster; force coverage
    sizes.iter_mut().for_each(|s| *s = 0);
    for &a in &assignments {
        sizes[a] += 1;
    }
    repair_empty(points, &mut assignments, &mut centroids, &mut sizes);

    KMeansResult {
        assignments,
        centroids,
        iterations,
        converged,
    }
}

/// Splits every ROI of `rois` into patches of roughly `m` voxels.
///
/// ROIs are processed in ascending label order and patch ids are assigned
/// densely in that order, so the output depends only on `(rois, m, seed)`.
pub fn generate_patches(
    rois: &LabelVolume,
    m: u32,
    seed: u64,
) -> Result<PatchParcellation, ParcellationError> {
    if m == 0 {
        return Err(ParcellationError::ZeroPatchSize);
    }
    let ids = rois.label_ids();
    if ids.is_empty() {
        return Err(ParcellationError::EmptyRois);
    }
    let g = rois.geometry;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); ids.len()];
    for (i, &l) in rois.labels.iter().enumerate() {
        if l != 0 {
            members[ids.binary_search(&l).expect("label listed")].push(i);
        }
    }

    let clusterings: Vec<(usize, Vec<usize>)> = ids
        .par_iter()
        .zip(members.par_iter())
        .map(|(&roi, voxels)| {
            let k = patches_for_roi(voxels.len(), m);
            if k == 1 {
                return (1, vec![0; voxels.len()]);
            }
            let points: Vec<[f64; 3]> = voxels.iter().map(|&i| g.position(i)).collect();
            let mut rng = seed::rng(seed::derive(seed, &[roi as u64]));
            let result = kmeans(&points, k, &mut rng, MAX_LLOYD_ITERATIONS);
            if !result.converged {
                log::debug!("k-means for ROI {roi} at m={m} hit the iteration cap");
            }
            (k, result.assignments)
        })
        .collect();

    let mut labels = vec![0u32; rois.labels.len()];
    let mut patch_to_roi = Vec::new();
    for ((&roi, voxels), (k, assignment)) in ids.iter().zip(&members).zip(clusterings) {
        let base = patch_to_roi.len() as u32;
        for (&v, &c) in voxels.iter().zip(&assignment) {
            labels[v] = base + c as u32 + 1;
        }
        patch_to_roi.extend(std::iter::repeat_n(roi, k));
    }

    Ok(PatchParcellation {
        source_roi_count: ids.len(),
        patch_labels: LabelVolume::new(g, labels)?,
        patch_to_roi,
        scale_m: m,
    })
}

/// One parcellation per ladder size (seeded by `seed ^ hash(m)`), then the
/// original ROIs if the ladder includes them.
pub fn multiscale_parcellations(
    rois: &LabelVolume,
    ladder: &ScaleLadder,
    seed: u64,
) -> Result<Vec<PatchParcellation>, ParcellationError> {
    ladder.validate()?;
    let mut out: Vec<PatchParcellation> = ladder
        .patch_sizes
        .iter()
        .map(|&m| generate_patches(rois, m, seed::derive(seed, &[m as u64])))
        .collect::<Result<_, _>>()?;
    if ladder.include_original {
        out.push(PatchParcellation::original(rois)?);
    }
    Ok(out)
}

pub const SIDECAR_HEADER: [&str; 4] = ["patch_id", "roi_id", "scale_m", "voxel_count"];

/// Writes the patch label volume as RVOL and the patch table as CSV.
pub fn save_parcellation(
    p: &PatchParcellation,
    labels_path: impl AsRef<Path>,
    sidecar_path: impl AsRef<Path>,
) -> Result<(), ParcellationError> {
    volume::write_labels(&p.patch_labels, labels_path)?;
    let path = sidecar_path.as_ref();
    let sidecar_err = |e: csv::Error| ParcellationError::Sidecar {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(sidecar_err)?;
    w.write_record(SIDECAR_HEADER).map_err(sidecar_err)?;
    for (i, (&roi, count)) in p.patch_to_roi.iter().zip(p.voxel_counts()).enumerate() {
        w.write_record([
            (i + 1).to_string(),
            roi.to_string(),
            p.scale_m.to_string(),
            count.to_string(),
        ])
        .map_err(sidecar_err)?;
    }
    w.flush().map_err(|e| ParcellationError::Sidecar {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn load_parcellation(
    labels_path: impl AsRef<Path>,
    sidecar_path: impl AsRef<Path>,
) -> Result<PatchParcellation, ParcellationError> {
    let patch_labels = volume::read_labels(labels_path)?;
    let path = sidecar_path.as_ref();
    let bad = |message: String| ParcellationError::Sidecar {
        path: path.to_path_buf(),
        message,
    };
    let text = fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut patch_to_roi = Vec::new();
    let mut scale_m = None;
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let field = |i: usize| -> Result<u64, ParcellationError> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(format!("row {}: bad field {}", row + 2, SIDECAR_HEADER[i])))
        };
        if field(0)? != row as u64 + 1 {
            return Err(bad(format!("row {}: patch ids must be dense and ascending", row + 2)));
        }
        patch_to_roi.push(field(1)? as u32);
        scale_m = Some(field(2)? as u32);
    }
    let max_label = patch_labels.labels.iter().copied().max().unwrap_or(0) as usize;
    if max_label > patch_to_roi.len() {
        return Err(bad(format!(
            "label volume uses patch id {max_label} but the table lists {}",
            patch_to_roi.len()
        )));
    }
    let mut rois = patch_to_roi.clone();
    rois.sort_unstable();
    rois.dedup();
    Ok(PatchParcellation {
        source_roi_count: rois.len(),
        patch_labels,
        patch_to_roi,
        scale_m: scale_m.unwrap_or(0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    fn boxes(dims: [usize; 3], spacing: f64, regions: &[([usize; 3], [usize; 3], u32)]) -> LabelVolume {
        let g = Geometry::new(dims, [spacing; 3]).unwrap();
        let mut labels = vec![0u32; g.len()];
        for &(lo, hi, l) in regions {
            for z in lo[2]..hi[2] {
                for y in lo[1]..hi[1] {
                    for x in lo[0]..hi[0] {
                        labels[g.index(x, y, z)] = l;
                    }
                }
            }
        }
        LabelVolume::new(g, labels).unwrap()
    }

    #[test]
    fn patch_count_rule() {
        assert_eq!(patches_for_roi(1000, 100), 10);
        assert_eq!(patches_for_roi(40, 100), 1);
        assert_eq!(patches_for_roi(150, 100), 2);
        assert_eq!(patches_for_roi(149, 100), 1);
        assert_eq!(patches_for_roi(250, 100), 3);
        assert_eq!(patches_for_roi(3, 1), 3);
    }

    #[test]
    fn thousand_voxel_roi_gives_ten_patches() {
        let rois = boxes([12, 12, 12], 1.5, &[([0, 0, 0], [10, 10, 10], 4)]);
        let p = generate_patches(&rois, 100, 1).unwrap();
        assert_eq!(p.patch_count(), 10);
        let counts = p.voxel_counts();
        assert_eq!(counts.iter().sum::<usize>(), 1000);
        assert!(counts.iter().all(|&c| c > 0));
        assert!(p.patch_to_roi.iter().all(|&r| r == 4));
        // balance on a convex ROI with n >= 4m
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(*hi <= 4 * *lo, "{counts:?}");
    }

    #[test]
    fn small_roi_is_one_patch() {
        let rois = boxes([6, 6, 6], 1.0, &[([0, 0, 0], [4, 5, 2], 2)]);
        let p = generate_patches(&rois, 100, 0).unwrap();
        assert_eq!(p.patch_count(), 1);
        assert_eq!(p.voxel_counts(), vec![40]);
    }

    #[test]
    fn partition_and_determinism() {
        let rois = boxes(
            [16, 16, 8],
            1.5,
            &[([0, 0, 0], [8, 16, 8], 1), ([8, 0, 0], [16, 10, 8], 3), ([8, 10, 2], [16, 16, 6], 7)],
        );
        let a = generate_patches(&rois, 50, 9).unwrap();
        let b = generate_patches(&rois, 50, 9).unwrap();
        assert_eq!(a, b);
        for (i, (&r, &p)) in rois.labels.iter().zip(&a.patch_labels.labels).enumerate() {
            assert_eq!(r == 0, p == 0, "voxel {i}");
            if p != 0 {
                assert_eq!(a.roi_of(p), Some(r));
            }
        }
        for roi in [1, 3, 7] {
            let n = rois.count(roi);
            let k = a.patch_to_roi.iter().filter(|&&r| r == roi).count();
            assert_eq!(k, patches_for_roi(n, 50));
        }
    }

    #[test]
    fn ladder_defaults() {
        let ladder = ScaleLadder::default();
        assert_eq!(ladder.patch_sizes.len(), 16);
        assert_eq!(ladder.scale_count(), 17);
        assert!(ScaleLadder::new(vec![100, 100], true).is_err());
        assert!(ScaleLadder::new(vec![0, 5], true).is_err());
    }

    #[test]
    fn multiscale_with_original() {
        let rois = boxes([12, 12, 6], 1.0, &[([0, 0, 0], [6, 12, 6], 5), ([6, 0, 0], [12, 12, 6], 9)]);
        let ladder = ScaleLadder::new(vec![100, 1000], true).unwrap();
        let ps = multiscale_parcellations(&rois, &ladder, 3).unwrap();
        assert_eq!(ps.len(), 3);
        assert_eq!(ps[2].scale_m, 0);
        assert_eq!(ps[2].patch_count(), 2);
        assert_eq!(ps[2].patch_to_roi, vec![5, 9]);
        assert_eq!(ps[0].patch_count(), 8);
        assert_eq!(ps, multiscale_parcellations(&rois, &ladder, 3).unwrap());
    }

    #[test]
    fn empty_rois_rejected() {
        let rois = boxes([3, 3, 3], 1.0, &[]);
        assert!(matches!(generate_patches(&rois, 10, 0), Err(ParcellationError::EmptyRois)));
    }

    #[test]
    fn kmeans_covers_every_cluster() {
        let points: Vec<[f64; 3]> = (0..30).map(|i| [i as f64, 0.0, 0.0]).collect();
        let mut rng = seed::rng(5);
        let r = kmeans(&points, 30, &mut rng, 100);
        let mut seen = r.assignments.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 30);
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let rois = boxes([10, 10, 4], 1.5, &[([0, 0, 0], [10, 5, 4], 1), ([0, 5, 0], [10, 10, 4], 2)]);
        let p = generate_patches(&rois, 40, 2).unwrap();
        let (lp, cp) = (dir.path().join("p.rvol"), dir.path().join("p.csv"));
        save_parcellation(&p, &lp, &cp).unwrap();
        assert_eq!(load_parcellation(&lp, &cp).unwrap(), p);
        let text = fs::read_to_string(&cp).unwrap();
        assert!(text.starts_with("patch_id,roi_id,scale_m,voxel_count\n1,1,40,"));
    }
}
