//! Patch-wise SUVR features: the mean intensity of each patch divided by
//! the mean intensity of a reference ROI.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use thiserror::Error;

use crate::parcellation::PatchParcellation;
use crate::volume::Volume;
use crate::Real;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("volume and parcellation geometries differ")]
    GeometryMismatch,
    #[error("reference ROI {0} has no voxels")]
    EmptyReference(u32),
    #[error("reference ROI {0} has zero mean intensity")]
    ZeroReference(u32),
    #[error("patch {0} has no voxels")]
    EmptyPatch(u32),
    #[error("feature table: {0}")]
    Table(String),
}

/// SUVRs of one image at one scale, in ascending patch-id order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector<T = f64> {
    pub scale_m: u32,
    pub patch_ids: Vec<u32>,
    pub values: Vec<T>,
}

impl<T: Real> FeatureVector<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleFeatureSet<T = f64> {
    pub image_id: String,
    /// One vector per scale, in ladder order.
    pub scales: Vec<FeatureVector<T>>,
}

/// Per-patch sums and voxel counts, indexed by `id - 1`.
fn patch_sums<T: Real>(v: &Volume<T>, p: &PatchParcellation) -> (Vec<T>, Vec<usize>) {
    let mut sums = vec![T::zero(); p.patch_count()];
    let mut counts = vec![0usize; p.patch_count()];
    for (&x, &l) in v.data.iter().zip(&p.patch_labels.labels) {
        if l != 0 {
            sums[l as usize - 1] = sums[l as usize - 1] + x;
            counts[l as usize - 1] += 1;
        }
    }
    (sums, counts)
}

/// Mean of `v` over every voxel whose patch belongs to `roi_id`.
pub fn roi_mean<T: Real>(v: &Volume<T>, p: &PatchParcellation, roi_id: u32) -> Option<T> {
    let (sum, n) = v
        .data
        .iter()
        .zip(&p.patch_labels.labels)
        .filter(|(_, &l)| l != 0 && p.patch_to_roi[l as usize - 1] == roi_id)
        .fold((T::zero(), 0usize), |(s, n), (&x, _)| (s + x, n + 1));
    (n > 0).then(|| sum / T::of_usize(n))
}

/// SUVR per patch with the reference ROI's own patches left out.
pub fn patch_suvr<T: Real>(
    v: &Volume<T>,
    p: &PatchParcellation,
    reference_roi_id: u32,
) -> Result<FeatureVector<T>, FeatureError> {
    patch_suvr_with(v, p, reference_roi_id, false)
}

/// SUVR per patch; `include_reference` keeps the reference ROI's patches.
pub fn patch_suvr_with<T: Real>(
    v: &Volume<T>,
    p: &PatchParcellation,
    reference_roi_id: u32,
    include_reference: bool,
) -> Result<FeatureVector<T>, FeatureError> {
    if v.geometry != p.patch_labels.geometry {
        return Err(FeatureError::GeometryMismatch);
    }
    let (sums, counts) = patch_sums(v, p);

    let (ref_sum, ref_n) = p
        .patch_to_roi
        .iter()
        .enumerate()
        .filter(|(_, &r)| r == reference_roi_id)
        .fold((T::zero(), 0usize), |(s, n), (i, _)| (s + sums[i], n + counts[i]));
    if ref_n == 0 {
        return Err(FeatureError::EmptyReference(reference_roi_id));
    }
    let reference = ref_sum / T::of_usize(ref_n);
    if reference == T::zero() {
        return Err(FeatureError::ZeroReference(reference_roi_id));
    }

    let mut patch_ids = Vec::with_capacity(p.patch_count());
    let mut values = Vec::with_capacity(p.patch_count());
    for (i, &roi) in p.patch_to_roi.iter().enumerate() {
        if roi == reference_roi_id && !include_reference {
            continue;
        }
        let id = i as u32 + 1;
        if counts[i] == 0 {
            return Err(FeatureError::EmptyPatch(id));
        }
        patch_ids.push(id);
        values.push(sums[i] / T::of_usize(counts[i]) / reference);
    }
    Ok(FeatureVector {
        scale_m: p.scale_m,
        patch_ids,
        values,
    })
}

pub fn extract_multiscale<T: Real>(
    image_id: impl Into<String>,
    v: &Volume<T>,
    parcellations: &[PatchParcellation],
    reference_roi_id: u32,
) -> Result<MultiScaleFeatureSet<T>, FeatureError> {
    let scales = parcellations
        .iter()
        .map(|p| patch_suvr(v, p, reference_roi_id))
        .collect::<Result<_, _>>()?;
    Ok(MultiScaleFeatureSet {
        image_id: image_id.into(),
        scales,
    })
}

pub const FEATURE_HEADER: [&str; 4] = ["image_id", "scale_m", "patch_id", "suvr"];

/// Writes `image_id,scale_m,patch_id,suvr` rows, scale by scale.
pub fn write_features<T: Real>(
    set: &MultiScaleFeatureSet<T>,
    out: impl Write,
) -> Result<(), FeatureError> {
    let err = |e: csv::Error| FeatureError::Table(e.to_string());
    let mut w = csv::Writer::from_writer(out);
    w.write_record(FEATURE_HEADER).map_err(err)?;
    for fv in &set.scales {
        for (id, v) in fv.patch_ids.iter().zip(&fv.values) {
            w.write_record([
                set.image_id.as_str(),
                &fv.scale_m.to_string(),
                &id.to_string(),
                &format!("{:e}", v.as_f64()),
            ])
            .map_err(err)?;
        }
    }
    w.flush().map_err(|e| FeatureError::Table(e.to_string()))
}

/// Reads a feature table written by [`write_features`]. Scales keep their
/// order of first appearance.
pub fn read_features<T: Real>(input: impl Read) -> Result<MultiScaleFeatureSet<T>, FeatureError> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr
        .headers()
        .map_err(|e| FeatureError::Table(e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != FEATURE_HEADER {
        return Err(FeatureError::Table("unexpected header".into()));
    }
    let mut image_id: Option<String> = None;
    let mut order: Vec<u32> = Vec::new();
    let mut scales: BTreeMap<u32, FeatureVector<T>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| FeatureError::Table(e.to_string()))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let bad = |what: &str| FeatureError::Table(format!("line {line}: bad {what}"));
        let id = rec.get(0).ok_or_else(|| bad("image_id"))?;
        match &image_id {
            None => image_id = Some(id.to_string()),
            Some(prev) if prev != id => {
                return Err(FeatureError::Table(format!(
                    "line {line}: mixed image ids {prev} and {id}"
                )))
            }
            _ => {}
        }
        let scale: u32 = rec.get(1).and_then(|s| s.parse().ok()).ok_or_else(|| bad("scale_m"))?;
        let patch: u32 = rec.get(2).and_then(|s| s.parse().ok()).ok_or_else(|| bad("patch_id"))?;
        let value: f64 = rec
            .get(3)
            .and_then(|s| s.parse().ok())
            .filter(|x: &f64| x.is_finite())
            .ok_or_else(|| bad("suvr"))?;
        let fv = scales.entry(scale).or_insert_with(|| {
            order.push(scale);
            FeatureVector {
                scale_m: scale,
                patch_ids: Vec::new(),
                values: Vec::new(),
            }
        });
        if fv.patch_ids.last().is_some_and(|&last| last >= patch) {
            return Err(bad("patch order"));
        }
        fv.patch_ids.push(patch);
        fv.values.push(T::of(value));
    }
    Ok(MultiScaleFeatureSet {
        image_id: image_id.unwrap_or_default(),
        scales: order
            .into_iter()
            .map(|s| scales.remove(&s).expect("scale recorded"))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parcellation::{generate_patches, PatchParcellation};
    use crate::volume::{Geometry, LabelVolume};
    use proptest::prelude::*;

    fn setup() -> (Geometry, LabelVolume) {
        let g = Geometry::new([4, 2, 1], [1.0; 3]).unwrap();
        // ROI 1: voxels 0-1, ROI 2: voxels 2-3, ROI 9 (reference): 4-7
        let rois = LabelVolume::new(g, vec![1, 1, 2, 2, 9, 9, 9, 9]).unwrap();
        (g, rois)
    }

    #[test]
    fn hand_computed_ratios() {
        let (g, rois) = setup();
        let p = PatchParcellation::original(&rois).unwrap();
        let v = Volume::new(g, vec![2.0, 2.0, 4.0, 4.0, 2.0, 2.0, 2.0, 2.0]).unwrap();
        let f = patch_suvr(&v, &p, 9).unwrap();
        assert_eq!(f.patch_ids, vec![1, 2]);
        assert_eq!(f.values, vec![1.0, 2.0]);

        let v = Volume::new(g, vec![1.2, 1.2, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(patch_suvr(&v, &p, 9).unwrap().values[0], 1.2);

        let with_ref = patch_suvr_with(&v, &p, 9, true).unwrap();
        assert_eq!(with_ref.patch_ids, vec![1, 2, 3]);
        assert_eq!(with_ref.values[2], 1.0);
    }

    #[test]
    fn uniform_volume_gives_unit_suvr() {
        let (g, rois) = setup();
        let p = PatchParcellation::original(&rois).unwrap();
        let f = patch_suvr(&Volume::filled(g, 0.7), &p, 9).unwrap();
        assert!(f.values.iter().all(|&x| (x - 1.0f64).abs() < 1e-15));
    }

    #[test]
    fn reference_errors() {
        let (g, rois) = setup();
        let p = PatchParcellation::original(&rois).unwrap();
        let v = Volume::filled(g, 1.0f64);
        assert!(matches!(patch_suvr(&v, &p, 5), Err(FeatureError::EmptyReference(5))));
        let z = Volume::new(g, vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(patch_suvr(&z, &p, 9), Err(FeatureError::ZeroReference(9))));
        let other = Volume::filled(Geometry::new([2, 2, 2], [1.0; 3]).unwrap(), 1.0);
        assert!(matches!(patch_suvr(&other, &p, 9), Err(FeatureError::GeometryMismatch)));
    }

    #[test]
    fn multiscale_count_and_table_roundtrip() {
        let g = Geometry::new([10, 10, 4], [1.5; 3]).unwrap();
        let labels = (0..g.len()).map(|i| if g.coords(i)[0] < 5 { 1 } else { 2 }).collect();
        let rois = LabelVolume::new(g, labels).unwrap();
        let ps = vec![
            generate_patches(&rois, 20, 1).unwrap(),
            generate_patches(&rois, 50, 1).unwrap(),
            PatchParcellation::original(&rois).unwrap(),
        ];
        let v = Volume::new(g, (0..g.len()).map(|i| 1.0 + (i % 7) as f64 * 0.1).collect()).unwrap();
        let set = extract_multiscale("img", &v, &ps, 2).unwrap();
        assert_eq!(set.scales.len(), 3);
        assert_eq!(set.scales[2].values.len(), 1);
        assert_eq!(set, extract_multiscale("img", &v, &ps, 2).unwrap());

        let mut buf = Vec::new();
        write_features(&set, &mut buf).unwrap();
        let back: MultiScaleFeatureSet<f64> = read_features(buf.as_slice()).unwrap();
        assert_eq!(back, set);
    }

    proptest! {
        #[test]
        fn scale_invariance_and_weighted_means(
            values in proptest::collection::vec(0.1f64..5.0, 10 * 10 * 4),
            c in 0.01f64..100.0,
            seed in 0u64..1000,
        ) {
            let g = Geometry::new([10, 10, 4], [1.5; 3]).unwrap();
            let labels = (0..g.len()).map(|i| match g.coords(i) { [x, _, _] if x < 4 => 1, [_, y, _] if y < 5 => 2, _ => 3 }).collect();
            let rois = LabelVolume::new(g, labels).unwrap();
            let p = generate_patches(&rois, 15, seed).unwrap();
            let v = Volume::new(g, values).unwrap();
            let f = patch_suvr(&v, &p, 3).unwrap();
            let scaled = patch_suvr(&v.map(|x| x * c), &p, 3).unwrap();
            for (a, b) in f.values.iter().zip(&scaled.values) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs());
            }

            let counts = p.voxel_counts();
            let (sums, _) = patch_sums(&v, &p);
            for roi in [1u32, 2] {
                let (ws, n) = p.patch_to_roi.iter().enumerate().filter(|(_, &r)| r == roi)
                    .fold((0.0, 0usize), |(s, n), (i, _)| (s + sums[i] / counts[i] as f64 * counts[i] as f64, n + counts[i]));
                let roi_direct = roi_mean(&v, &p, roi).unwrap();
                prop_assert!((ws / n as f64 - roi_direct).abs() <= 1e-9 * roi_direct.abs());
            }
        }
    }
}
