use std::cmp::Ordering;

use super::{LearnError, Matrix};
use crate::Real;

/// Pooled-variance two-sample t statistic of every column, positive class
/// minus negative class. A zero pooled variance yields an infinite t with
/// the sign of the mean difference, or 0 if the means agree.
pub fn t_statistics<T: Real>(x: &Matrix<T>, positive: &[bool]) -> Result<Vec<T>, LearnError> {
    if positive.len() != x.rows() {
        return Err(LearnError::Shape(format!(
            "{} labels for {} samples",
            positive.len(),
            x.rows()
        )));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos < 2 || n_neg < 2 {
        return Err(LearnError::SingleClass { min: 2 });
    }
    let (np, nn) = (T::of_usize(n_pos), T::of_usize(n_neg));
    let scale = (T::one() / np + T::one() / nn).sqrt();
    let dof = T::of_usize(n_pos + n_neg - 2);

    Ok((0..x.cols())
        .map(|c| {
            let (mut sp, mut sn) = (T::zero(), T::zero());
            for (v, &p) in x.column(c).zip(positive) {
                if p {
                    sp = sp + v;
                } else {
                    sn = sn + v;
                }
            }
            let (mp, mn) = (sp / np, sn / nn);
            let ss = x
                .column(c)
                .zip(positive)
                .fold(T::zero(), |acc, (v, &p)| {
                    let d = v - if p { mp } else { mn };
                    acc + d * d
                });
            let diff = mp - mn;
            let sd = (ss / dof).sqrt();
            if sd == T::zero() {
                if diff == T::zero() {
                    T::zero()
                } else {
                    T::infinity() * diff.signum()
                }
            } else {
                diff / (sd * scale)
            }
        })
        .collect())
}

/// Column indices of the `k` largest |t|, ties broken by ascending index.
pub fn tstat_select<T: Real>(
    x: &Matrix<T>,
    positive: &[bool],
    k: usize,
) -> Result<Vec<usize>, LearnError> {
    if k > x.cols() {
        return Err(LearnError::KTooLarge {
            k,
            features: x.cols(),
        });
    }
    let t = t_statistics(x, positive)?;
    let mut order: Vec<usize> = (0..t.len()).collect();
    order.sort_by(|&a, &b| {
        t[b].abs()
            .partial_cmp(&t[a].abs())
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    Ok(order)
}
