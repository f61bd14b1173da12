//! Evaluation statistics: ROC/AUC, threshold metrics, binned tables,
//! Pearson correlation and two-sample group tests.
//!
//! Labels are `true` for the positive (DAT+) class. Scores may be `f32` or
//! `f64`; every statistic is reported as `f64`.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

use crate::Real;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{0} values for {1} labels")]
    Length(usize, usize),
    #[error("both classes must be present ({positives} positive, {negatives} negative)")]
    SingleClass { positives: usize, negatives: usize },
    #[error("need at least {min} samples, got {n}")]
    TooFew { n: usize, min: usize },
    #[error("non-finite value")]
    NonFinite,
    #[error("zero variance")]
    DegenerateVariance,
    #[error("no samples")]
    Empty,
    #[error("bin edges must be finite and strictly increasing, with at least two")]
    BinEdges,
    #[error("conversion window must be positive, got {0}")]
    Window(f64),
    #[error("no converter falls within the {0}-year window")]
    EmptyPositive(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RocResult {
    pub auc: f64,
    pub positives: usize,
    pub negatives: usize,
    /// Ascending thresholds: `-inf`, then every distinct score.
    pub operating_points: Vec<OperatingPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThresholdMetrics {
    pub threshold: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub balanced_accuracy: f64,
}

fn class_counts(labels: &[bool]) -> Result<(usize, usize), MetricsError> {
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::SingleClass { positives, negatives });
    }
    Ok((positives, negatives))
}

fn to_f64<T: Real>(scores: &[T], labels: &[bool]) -> Result<Vec<f64>, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::Length(scores.len(), labels.len()));
    }
    let s: Vec<f64> = scores.iter().map(|v| v.as_f64()).collect();
    if s.iter().any(|v| v.is_nan()) {
        return Err(MetricsError::NonFinite);
    }
    Ok(s)
}

/// Mann-Whitney AUC: `(concordant + tied / 2) / (n+ n-)`.
///
/// Pair counts are accumulated as integers, so the result is the exactly
/// rounded quotient.
pub fn roc_auc<T: Real>(scores: &[T], labels: &[bool]) -> Result<RocResult, MetricsError> {
    let s = to_f64(scores, labels)?;
    let (positives, negatives) = class_counts(labels)?;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[a].total_cmp(&s[b]));

    // twice the concordant count plus the tied count
    let mut doubled: u128 = 0;
    let mut neg_below = 0usize;
    let mut pos_below = 0usize;
    let mut points = vec![OperatingPoint {
        threshold: f64::NEG_INFINITY,
        sensitivity: 1.0,
        specificity: 0.0,
    }];
    let mut i = 0;
    while i < order.len() {
        let value = s[order[i]];
        let mut j = i;
        let (mut pos_here, mut neg_here) = (0usize, 0usize);
        while j < order.len() && s[order[j]] == value {
            if labels[order[j]] {
                pos_here += 1;
            } else {
                neg_here += 1;
            }
            j += 1;
        }
        doubled += 2 * (pos_here as u128) * (neg_below as u128) + (pos_here as u128) * (neg_here as u128);
        neg_below += neg_here;
        pos_below += pos_here;
        points.push(OperatingPoint {
            threshold: value,
            sensitivity: (positives - pos_below) as f64 / positives as f64,
            specificity: neg_below as f64 / negatives as f64,
        });
        i = j;
    }
    let auc = doubled as f64 / (2 * positives as u128 * negatives as u128) as f64;
    Ok(RocResult {
        auc,
        positives,
        negatives,
        operating_points: points,
    })
}

/// Confusion metrics with the call `score > threshold` (ties are negative).
pub fn threshold_metrics<T: Real>(
    scores: &[T],
    labels: &[bool],
    threshold: f64,
) -> Result<ThresholdMetrics, MetricsError> {
    let s = to_f64(scores, labels)?;
    let (positives, negatives) = class_counts(labels)?;
    let mut tp = 0;
    let mut fp = 0;
    for (&v, &l) in s.iter().zip(labels) {
        if v > threshold {
            if l {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    let sensitivity = tp as f64 / positives as f64;
    let specificity = (negatives - fp) as f64 / negatives as f64;
    Ok(ThresholdMetrics {
        threshold,
        true_positives: tp,
        false_positives: fp,
        true_negatives: negatives - fp,
        false_negatives: positives - tp,
        accuracy: (tp + negatives - fp) as f64 / s.len() as f64,
        sensitivity,
        specificity,
        balanced_accuracy: (sensitivity + specificity) / 2.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Correlation {
    pub n: usize,
    pub r: f64,
    /// Two-sided, from Student t with `n - 2` degrees of freedom.
    pub p: f64,
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn student_t_two_sided(t: f64, df: f64) -> f64 {
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (2.0 * dist.sf(t.abs())).min(1.0)
}

/// Two-sided p-value of a sample correlation `r` over `n` pairs.
pub fn correlation_p_value(r: f64, n: usize) -> f64 {
    if r.abs() >= 1.0 {
        return 0.0;
    }
    let df = (n - 2) as f64;
    student_t_two_sided(r * (df / (1.0 - r * r)).sqrt(), df)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<Correlation, MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::Length(x.len(), y.len()));
    }
    let n = x.len();
    if n < 3 {
        return Err(MetricsError::TooFew { n, min: 3 });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricsError::DegenerateVariance);
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    Ok(Correlation {
        n,
        r,
        p: correlation_p_value(r, n),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupTestKind {
    #[serde(rename = "t-test")]
    TTest,
    #[serde(rename = "ranksum-exact")]
    RankSumExact,
    #[serde(rename = "ranksum-normal")]
    RankSumNormal,
}

impl GroupTestKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GroupTestKind::TTest => "t-test",
            GroupTestKind::RankSumExact => "ranksum-exact",
            GroupTestKind::RankSumNormal => "ranksum-normal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroupTestOptions {
    /// Jarque-Bera level; a sample is treated as normal when its p >= alpha.
    pub normality_alpha: f64,
    /// Largest per-sample size for which the rank-sum null is enumerated.
    pub exact_max_n: usize,
}

impl Default for GroupTestOptions {
    fn default() -> Self {
        GroupTestOptions {
            normality_alpha: 0.05,
            exact_max_n: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GroupTest {
    pub kind: GroupTestKind,
    pub statistic: f64,
    pub p: f64,
}

/// Jarque-Bera statistic and its asymptotic chi-square(2) p-value.
/// A constant sample has no defined skewness and yields `p = 0`.
pub fn jarque_bera(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = mean(x);
    let m2 = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    if m2 == 0.0 {
        return (f64::INFINITY, 0.0);
    }
    let m3 = x.iter().map(|v| (v - m).powi(3)).sum::<f64>() / n;
    let m4 = x.iter().map(|v| (v - m).powi(4)).sum::<f64>() / n;
    let skew = m3 / m2.powf(1.5);
    let kurt = m4 / (m2 * m2);
    let jb = n / 6.0 * (skew * skew + (kurt - 3.0).powi(2) / 4.0);
    (jb, (-jb / 2.0).exp())
}

/// Two-sided pooled-variance two-sample t-test.
pub fn ttest_pooled(a: &[f64], b: &[f64]) -> Result<GroupTest, MetricsError> {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    if a.len() < 2 || b.len() < 2 {
        return Err(MetricsError::TooFew { n: a.len().min(b.len()), min: 2 });
    }
    let (ma, mb) = (mean(a), mean(b));
    let ss = a.iter().map(|v| (v - ma).powi(2)).sum::<f64>() + b.iter().map(|v| (v - mb).powi(2)).sum::<f64>();
    let df = na + nb - 2.0;
    let var = ss / df;
    if var == 0.0 {
        return Err(MetricsError::DegenerateVariance);
    }
    let t = (ma - mb) / (var * (1.0 / na + 1.0 / nb)).sqrt();
    Ok(GroupTest {
        kind: GroupTestKind::TTest,
        statistic: t,
        p: student_t_two_sided(t, df),
    })
}

/// Midranks (1-based) of the pooled sample and the tie-group sizes.
fn midranks(pooled: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&i, &j| pooled[i].total_cmp(&pooled[j]));
    let mut ranks = vec![0.0; pooled.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && pooled[order[j]] == pooled[order[i]] {
            j += 1;
        }
        let rank = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        ties.push(j - i);
        i = j;
    }
    (ranks, ties)
}

/// Null distribution of the doubled rank sum of `na` items drawn from the
/// doubled midranks, as counts indexed by doubled rank sum.
fn exact_rank_sum_counts(doubled_ranks: &[usize], na: usize) -> Vec<Vec<f64>> {
    let max_sum: usize = doubled_ranks.iter().sum();
    // counts[j][s]: subsets of size j with doubled sum s
    let mut counts = vec![vec![0.0f64; max_sum + 1]; na + 1];
    counts[0][0] = 1.0;
    for &r in doubled_ranks {
        for j in (1..=na).rev() {
            let (lower, upper) = counts.split_at_mut(j);
            let (src, dst) = (&lower[j - 1], &mut upper[0]);
            for s in (r..=max_sum).rev() {
                dst[s] += src[s - r];
            }
        }
    }
    counts
}

/// Two-sided Wilcoxon rank-sum test with midranks for ties.
///
/// When both samples have at most `exact_max_n` members the p-value is
/// `min(1, 2 min(P(W <= w), P(W >= w)))` under the exact permutation null;
/// otherwise the normal approximation with continuity and tie corrections
/// is used.
pub fn ranksum_test(a: &[f64], b: &[f64], exact_max_n: usize) -> Result<GroupTest, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::Empty);
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let (na, nb) = (a.len(), b.len());
    let n = (na + nb) as f64;
    let w: f64 = ranks[..na].iter().sum();

    if na <= exact_max_n && nb <= exact_max_n {
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let w2 = (2.0 * w).round() as usize;
        let counts = exact_rank_sum_counts(&doubled, na);
        let dist = &counts[na];
        let total: f64 = dist.iter().sum();
        let lower: f64 = dist[..=w2].iter().sum();
        let upper: f64 = dist[w2..].iter().sum();
        return Ok(GroupTest {
            kind: GroupTestKind::RankSumExact,
            statistic: w,
            p: (2.0 * lower.min(upper) / total).min(1.0),
        });
    }

    let mu = na as f64 * (n + 1.0) / 2.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (n * (n - 1.0));
    let var = na as f64 * nb as f64 / 12.0 * ((n + 1.0) - tie_term);
    let p = if var <= 0.0 {
        1.0
    } else {
        let z = ((w - mu).abs() - 0.5).max(0.0) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        (2.0 * normal.sf(z)).min(1.0)
    };
    Ok(GroupTest {
        kind: GroupTestKind::RankSumNormal,
        statistic: w,
        p,
    })
}

/// Pooled t-test when both samples pass the Jarque-Bera gate, rank-sum
/// otherwise. The p-value is floored at the smallest positive double.
pub fn pairwise_group_test(
    a: &[f64],
    b: &[f64],
    options: &GroupTestOptions,
) -> Result<GroupTest, MetricsError> {
    for s in [a, b] {
        if s.len() < 4 {
            return Err(MetricsError::TooFew { n: s.len(), min: 4 });
        }
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let normal = |x: &[f64]| jarque_bera(x).1 >= options.normality_alpha;
    let mut result = if normal(a) && normal(b) {
        ttest_pooled(a, b)?
    } else {
        ranksum_test(a, b, options.exact_max_n)?
    };
    result.p = result.p.max(f64::MIN_POSITIVE);
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinRow {
    pub lower: f64,
    pub upper: f64,
    pub n: usize,
    pub mean_score: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinnedTable {
    pub edges: Vec<f64>,
    /// Non-empty bins only, in edge order.
    pub rows: Vec<BinRow>,
    pub dropped_missing: usize,
    pub dropped_out_of_range: usize,
}

impl BinnedTable {
    pub fn binned_count(&self) -> usize {
        self.rows.iter().map(|r| r.n).sum()
    }
}

/// Bin index for `edges`: half-open `[lo, hi)` except the closed last bin.
pub fn bin_index(edges: &[f64], value: f64) -> Option<usize> {
    let last = edges.len() - 1;
    if !(value >= edges[0] && value <= edges[last]) {
        return None;
    }
    if value == edges[last] {
        return Some(last - 1);
    }
    Some(edges.partition_point(|&e| e <= value) - 1)
}

/// Per-bin count, mean score and accuracy of one group.
///
/// Samples with a missing covariate or one outside the edges are dropped
/// and counted.
pub fn binned_report<T: Real>(
    scores: &[T],
    labels: &[bool],
    covariate: &[Option<f64>],
    edges: &[f64],
    threshold: f64,
) -> Result<BinnedTable, MetricsError> {
    let s = to_f64(scores, labels)?;
    if covariate.len() != s.len() {
        return Err(MetricsError::Length(covariate.len(), s.len()));
    }
    if s.is_empty() {
        return Err(MetricsError::Empty);
    }
    if edges.len() < 2 || edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(MetricsError::BinEdges);
    }
    let bins = edges.len() - 1;
    let mut n = vec![0usize; bins];
    let mut sum = vec![0.0f64; bins];
    let mut correct = vec![0usize; bins];
    let (mut missing, mut outside) = (0, 0);
    for i in 0..s.len() {
        let Some(c) = covariate[i].filter(|c| !c.is_nan()) else {
            missing += 1;
            continue;
        };
        let Some(b) = bin_index(edges, c) else {
            outside += 1;
            continue;
        };
        n[b] += 1;
        sum[b] += s[i];
        if (s[i] > threshold) == labels[i] {
            correct[b] += 1;
        }
    }
    let rows = (0..bins)
        .filter(|&b| n[b] > 0)
        .map(|b| BinRow {
            lower: edges[b],
            upper: edges[b + 1],
            n: n[b],
            mean_score: sum[b] / n[b] as f64,
            accuracy: correct[b] as f64 / n[b] as f64,
        })
        .collect();
    Ok(BinnedTable {
        edges: edges.to_vec(),
        rows,
        dropped_missing: missing,
        dropped_out_of_range: outside,
    })
}

/// Evenly spaced edges `start, start + step, ..., end`.
pub fn edges_range(start: f64, end: f64, step: f64) -> Vec<f64> {
    let count = ((end - start) / step).round() as usize;
    (0..=count).map(|i| start + step * i as f64).collect()
}

/// AUC of sMCI (negative) against the pMCI images converting within
/// `window_years` (positive).
pub fn windowed_conversion_auc<T: Real>(
    smci_scores: &[T],
    pmci: &[(T, f64)],
    window_years: f64,
) -> Result<RocResult, MetricsError> {
    if !(window_years > 0.0) || !window_years.is_finite() {
        return Err(MetricsError::Window(window_years));
    }
    let positives: Vec<T> = pmci
        .iter()
        .filter(|(_, ttc)| *ttc <= window_years)
        .map(|&(s, _)| s)
        .collect();
    if positives.is_empty() {
        return Err(MetricsError::EmptyPositive(window_years));
    }
    let mut scores = smci_scores.to_vec();
    scores.extend(&positives);
    let mut labels = vec![false; smci_scores.len()];
    labels.resize(scores.len(), true);
    roc_auc(&scores, &labels)
}
