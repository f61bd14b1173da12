//! Kernel logistic regression in the dual.
//!
//! With Gaussian kernel matrix `K`, labels `y in {0, 1}` and parameters
//! `(alpha, b)`, the latent score is `f = K alpha + b` and the objective is
//!
//! ```text
//! J(alpha, b) = sum_i [ log(1 + exp(f_i)) - y_i f_i ] + (ridge / 2) alpha' K alpha
//! ```
//!
//! which is convex. It is minimized by damped Newton steps: the step
//! solves `[[W K + ridge I, w], [w' K, sum w]] d = -[r + ridge alpha, sum r]`
//! with `r = p - y`, `W = diag(p (1 - p))`, which is the full Newton system
//! with its first block row divided through by `K`, followed by Armijo
//! backtracking.

use serde::{Deserialize, Serialize};

use super::matrix::solve;
use super::{LearnError, Matrix};
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlrOptions {
    pub ridge: f64,
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for KlrOptions {
    fn default() -> Self {
        KlrOptions {
            ridge: 1e-2,
            max_iter: 100,
            grad_tol: 1e-8,
        }
    }
}

fn sq_dist<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&u, &v)| {
        let d = u - v;
        acc + d * d
    })
}

/// Median of all pairwise Euclidean distances between rows; 1 when the
/// median is zero or there is a single row.
pub fn median_pairwise_distance<T: Real>(x: &Matrix<T>) -> T {
    let n = x.rows();
    let mut d: Vec<T> = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(sq_dist(x.row(i), x.row(j)).sqrt());
        }
    }
    if d.is_empty() {
        return T::one();
    }
    d.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let mid = d.len() / 2;
    let median = if d.len() % 2 == 1 {
        d[mid]
    } else {
        (d[mid - 1] + d[mid]) / T::of(2.0)
    };
    if median > T::zero() {
        median
    } else {
        T::one()
    }
}

#[inline]
fn rbf<T: Real>(a: &[T], b: &[T], bandwidth: T) -> T {
    (-sq_dist(a, b) / (T::of(2.0) * bandwidth * bandwidth)).exp()
}

pub fn gaussian_kernel_matrix<T: Real>(x: &Matrix<T>, bandwidth: T) -> Matrix<T> {
    let n = x.rows();
    let mut k = Matrix::zeros(n, n);
    for i in 0..n {
        k.set(i, i, T::one());
        for j in i + 1..n {
            let v = rbf(x.row(i), x.row(j), bandwidth);
            k.set(i, j, v);
            k.set(j, i, v);
        }
    }
    k
}

fn softplus<T: Real>(f: T) -> T {
    f.max(T::zero()) + (-f.abs()).exp().ln_1p()
}

fn sigmoid<T: Real>(f: T) -> T {
    if f >= T::zero() {
        T::one() / (T::one() + (-f).exp())
    } else {
        let e = f.exp();
        e / (T::one() + e)
    }
}

/// The training objective for a fixed kernel matrix. Parameters are laid
/// out as `[alpha_0, ..., alpha_{n-1}, b]`.
pub struct KlrObjective<'a, T> {
    kernel: &'a Matrix<T>,
    y: Vec<T>,
    ridge: T,
}

impl<'a, T: Real> KlrObjective<'a, T> {
    pub fn new(kernel: &'a Matrix<T>, positive: &[bool], ridge: T) -> Self {
        KlrObjective {
            kernel,
            y: positive
                .iter()
                .map(|&p| if p { T::one() } else { T::zero() })
                .collect(),
            ridge,
        }
    }

    fn scores(&self, params: &[T]) -> (Vec<T>, Vec<T>) {
        let n = self.y.len();
        let k_alpha = self.kernel.mul_vec(&params[..n]);
        let f = k_alpha.iter().map(|&v| v + params[n]).collect();
        (k_alpha, f)
    }

    pub fn value(&self, params: &[T]) -> T {
        let n = self.y.len();
        let (k_alpha, f) = self.scores(params);
        let nll = f
            .iter()
            .zip(&self.y)
            .fold(T::zero(), |acc, (&fi, &yi)| acc + softplus(fi) - yi * fi);
        let penalty = params[..n]
            .iter()
            .zip(&k_alpha)
            .fold(T::zero(), |acc, (&a, &ka)| acc + a * ka);
        nll + self.ridge / T::of(2.0) * penalty
    }

    pub fn gradient(&self, params: &[T]) -> Vec<T> {
        let n = self.y.len();
        let (_, f) = self.scores(params);
        let r: Vec<T> = f
            .iter()
            .zip(&self.y)
            .map(|(&fi, &yi)| sigmoid(fi) - yi)
            .collect();
        let inner: Vec<T> = r
            .iter()
            .zip(&params[..n])
            .map(|(&ri, &a)| ri + self.ridge * a)
            .collect();
        let mut g = self.kernel.mul_vec(&inner);
        g.push(r.iter().copied().sum());
        g
    }

    /// Newton direction at `params`, or `None` if the system is singular.
    fn newton_direction(&self, params: &[T]) -> Option<Vec<T>> {
        let n = self.y.len();
        let (_, f) = self.scores(params);
        let p: Vec<T> = f.iter().map(|&fi| sigmoid(fi)).collect();
        let w: Vec<T> = p.iter().map(|&pi| pi * (T::one() - pi)).collect();

        let mut a = Matrix::zeros(n + 1, n + 1);
        for i in 0..n {
            for j in 0..n {
                a.set(i, j, w[i] * self.kernel.get(i, j));
            }
            a.set(i, i, a.get(i, i) + self.ridge);
            a.set(i, n, w[i]);
        }
        let kw = self.kernel.mul_vec(&w);
        for (j, &v) in kw.iter().enumerate() {
            a.set(n, j, v);
        }
        a.set(n, n, w.iter().copied().sum());

        let mut rhs: Vec<T> = (0..n)
            .map(|i| -(p[i] - self.y[i] + self.ridge * params[i]))
            .collect();
        rhs.push(-(p.iter().zip(&self.y).fold(T::zero(), |acc, (&pi, &yi)| acc + pi - yi)));
        solve(a, rhs)
    }
}

/// A fitted classifier, independent of its place in an ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct KlrFit<T> {
    pub support_vectors: Matrix<T>,
    pub dual_weights: Vec<T>,
    pub bias: T,
    pub bandwidth: T,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: T,
    /// Objective after initialization and after every accepted step.
    pub objective_trace: Vec<T>,
}

impl<T: Real> KlrFit<T> {
    pub fn decision(&self, x: &[T]) -> T {
        (0..self.support_vectors.rows()).fold(self.bias, |acc, i| {
            acc + self.dual_weights[i] * rbf(self.support_vectors.row(i), x, self.bandwidth)
        })
    }

    /// DAT+ probability, kept strictly inside (0, 1).
    pub fn predict(&self, x: &[T]) -> T {
        sigmoid(self.decision(x))
            .max(T::epsilon())
            .min(T::one() - T::epsilon())
    }
}

fn norm<T: Real>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt()
}

/// Fits kernel logistic regression with a median-heuristic bandwidth.
///
/// Hitting `max_iter` (or a step that cannot decrease the objective) before
/// the gradient norm reaches `grad_tol` is not an error: the fit comes back
/// with `converged = false`.
pub fn train_kernel_classifier<T: Real>(
    x: &Matrix<T>,
    positive: &[bool],
    options: &KlrOptions,
) -> Result<KlrFit<T>, LearnError> {
    if positive.len() != x.rows() {
        return Err(LearnError::Shape(format!(
            "{} labels for {} samples",
            positive.len(),
            x.rows()
        )));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 || n_pos == positive.len() {
        return Err(LearnError::SingleClass { min: 1 });
    }
    if !x.is_finite() {
        return Err(LearnError::NonFinite);
    }
    let n = x.rows();
    let bandwidth = median_pairwise_distance(x);
    let kernel = gaussian_kernel_matrix(x, bandwidth);
    let objective = KlrObjective::new(&kernel, positive, T::of(options.ridge));

    let mut params = vec![T::zero(); n + 1];
    let prior = T::of_usize(n_pos) / T::of_usize(n);
    params[n] = (prior / (T::one() - prior)).ln();

    let mut value = objective.value(&params);
    let mut trace = vec![value];
    let mut grad = objective.gradient(&params);
    let mut grad_norm = norm(&grad);
    let tol = T::of(options.grad_tol);
    let mut iterations = 0;

    while grad_norm > tol && iterations < options.max_iter {
        let Some(dir) = objective.newton_direction(&params) else {
            break;
        };
        let slope = grad.iter().zip(&dir).fold(T::zero(), |acc, (&g, &d)| acc + g * d);
        let mut step = T::one();
        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<T> = params
                .iter()
                .zip(&dir)
                .map(|(&p, &d)| p + step * d)
                .collect();
            let v = objective.value(&trial);
            if v <= value + T::of(1e-4) * step * slope.min(T::zero()) {
                accepted = Some((trial, v));
                break;
            }
            step = step / T::of(2.0);
        }
        let Some((next, v)) = accepted else {
            break;
        };
        iterations += 1;
        params = next;
        value = v;
        trace.push(value);
        grad = objective.gradient(&params);
        grad_norm = norm(&grad);
    }

    let bias = params.pop().expect("bias present");
    Ok(KlrFit {
        support_vectors: x.clone(),
        dual_weights: params,
        bias,
        bandwidth,
        converged: grad_norm <= tol,
        iterations,
        grad_norm,
        objective_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_one_dimensional() {
        let rows: Vec<[f64; 1]> = (0..10)
            .map(|i| [if i < 5 { -1.0 } else { 1.0 } + 0.05 * (i % 5) as f64])
            .collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let y: Vec<bool> = (0..10).map(|i| i >= 5).collect();
        let fit = train_kernel_classifier(&x, &y, &KlrOptions::default()).unwrap();
        assert!(fit.converged, "grad {}", fit.grad_norm);
        for (i, &label) in y.iter().enumerate() {
            let p = fit.predict(x.row(i));
            assert_eq!(p > 0.5, label);
            assert!(p > 0.0 && p < 1.0);
        }
        assert!(fit.objective_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn constant_labels_rejected() {
        let x = Matrix::from_rows(&[[0.0], [1.0]]).unwrap();
        assert!(matches!(
            train_kernel_classifier(&x, &[true, true], &KlrOptions::default()),
            Err(LearnError::SingleClass { .. })
        ));
    }

    #[test]
    fn identical_rows_use_unit_bandwidth() {
        let x = Matrix::from_rows(&[[2.0f64, 1.0]; 4]).unwrap();
        assert_eq!(median_pairwise_distance(&x), 1.0);
        let fit = train_kernel_classifier(&x, &[true, false, true, false], &KlrOptions::default()).unwrap();
        assert_eq!(fit.bandwidth, 1.0);
        assert!((fit.predict(&[2.0, 1.0]) - 0.5f64).abs() < 1e-6);
    }

    #[test]
    fn median_of_even_count() {
        // distances 1, 2, 3 -> median 2
        let x = Matrix::from_rows(&[[0.0], [1.0], [3.0]]).unwrap();
        assert_eq!(median_pairwise_distance(&x), 2.0);
        // distances 1,1,2,2,3,... for 4 points on a line: 1,2,3,1,2,1 -> 1.5
        let x = Matrix::from_rows(&[[0.0], [1.0], [2.0], [3.0]]).unwrap();
        assert_eq!(median_pairwise_distance(&x), 1.5);
    }

    #[test]
    fn single_precision_fit() {
        let x = Matrix::from_rows(&[[-1.0f32], [-0.9], [-1.1], [1.0], [0.9], [1.1]]).unwrap();
        let y = [false, false, false, true, true, true];
        let opts = KlrOptions {
            grad_tol: 1e-4,
            ..KlrOptions::default()
        };
        let fit = train_kernel_classifier(&x, &y, &opts).unwrap();
        assert!(fit.predict(&[1.0]) > 0.5 && fit.predict(&[-1.0]) < 0.5);
    }
}
