use rand::seq::index;

use super::LearnError;
use crate::cohort::Trajectory;
use crate::seed;

const SUBSET_STREAM: u64 = 0x5ABA_6000;

/// One balanced subsample drawn without replacement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubagSubset {
    pub subset_index: usize,
    /// Ascending indices into the training cohort.
    pub member_indices: Vec<usize>,
}

impl SubagSubset {
    pub fn contains(&self, index: usize) -> bool {
        self.member_indices.binary_search(&index).is_ok()
    }

    pub fn len(&self) -> usize {
        self.member_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_indices.is_empty()
    }
}

/// `floor(gamma * min(negatives, positives))`.
pub fn per_class_count(negatives: usize, positives: usize, gamma: f64) -> usize {
    // tolerance keeps e.g. 0.29 * 100 from flooring to 28
    (gamma * negatives.min(positives) as f64 + 1e-9).floor() as usize
}

/// Draws `subsets` class-balanced subsamples. Subset `f` uses its own
/// stream derived from `(seed, f)`, so subsets are independent draws and
/// reproducible individually.
pub fn subag_subsets(
    labels: &[Trajectory],
    subsets: usize,
    gamma: f64,
    seed: u64,
) -> Result<Vec<SubagSubset>, LearnError> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(LearnError::Gamma(gamma));
    }
    if subsets == 0 {
        return Err(LearnError::NoSubsets);
    }
    let (pos, neg): (Vec<usize>, Vec<usize>) =
        (0..labels.len()).partition(|&i| labels[i].is_positive());
    let per_class = per_class_count(neg.len(), pos.len(), gamma);
    if per_class < 2 {
        return Err(LearnError::DegenerateClasses {
            negatives: neg.len(),
            positives: pos.len(),
            per_class,
        });
    }

    Ok((0..subsets)
        .map(|f| {
            let mut rng = seed::rng(seed::derive(seed, &[SUBSET_STREAM, f as u64]));
            let mut members: Vec<usize> = index::sample(&mut rng, neg.len(), per_class)
                .into_iter()
                .map(|i| neg[i])
                .chain(
                    index::sample(&mut rng, pos.len(), per_class)
                        .into_iter()
                        .map(|i| pos[i]),
                )
                .collect();
            members.sort_unstable();
            SubagSubset {
                subset_index: f,
                member_indices: members,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::Trajectory::{DatMinus, DatPlus};

    fn labels(neg: usize, pos: usize) -> Vec<Trajectory> {
        let mut v = vec![DatMinus; neg];
        v.extend(vec![DatPlus; pos]);
        v
    }

    #[test]
    fn cohort_sizes_360_238() {
        let y = labels(360, 238);
        let subsets = subag_subsets(&y, 100, 0.8, 1).unwrap();
        assert_eq!(subsets.len(), 100);
        for s in &subsets {
            assert_eq!(s.len(), 380);
            let pos = s.member_indices.iter().filter(|&&i| y[i].is_positive()).count();
            assert_eq!(pos, 190);
            assert!(s.member_indices.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn full_ratio_takes_everything() {
        let y = labels(10, 10);
        for s in subag_subsets(&y, 5, 1.0, 3).unwrap() {
            assert_eq!(s.member_indices, (0..20).collect::<Vec<_>>());
        }
    }

    #[test]
    fn deterministic() {
        let y = labels(30, 17);
        assert_eq!(
            subag_subsets(&y, 10, 0.8, 42).unwrap(),
            subag_subsets(&y, 10, 0.8, 42).unwrap()
        );
        assert_ne!(
            subag_subsets(&y, 10, 0.8, 42).unwrap(),
            subag_subsets(&y, 10, 0.8, 43).unwrap()
        );
    }

    #[test]
    fn errors() {
        assert!(matches!(subag_subsets(&labels(5, 5), 3, 0.0, 0), Err(LearnError::Gamma(_))));
        assert!(matches!(subag_subsets(&labels(5, 5), 3, 1.5, 0), Err(LearnError::Gamma(_))));
        assert!(matches!(subag_subsets(&labels(5, 5), 0, 0.8, 0), Err(LearnError::NoSubsets)));
        assert!(matches!(
            subag_subsets(&labels(5, 2), 3, 0.8, 0),
            Err(LearnError::DegenerateClasses { per_class: 1, .. })
        ));
        assert!(matches!(
            subag_subsets(&labels(5, 0), 3, 0.8, 0),
            Err(LearnError::DegenerateClasses { .. })
        ));
    }

    #[test]
    fn floor_tolerance() {
        assert_eq!(per_class_count(360, 238, 0.8), 190);
        assert_eq!(per_class_count(100, 100, 0.29), 29);
    }
}
