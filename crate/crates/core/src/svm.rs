//! Bayesian max-margin classifier on top-layer features.
//!
//! Each class `l` has a one-vs-all weight vector `beta_l` over the unfolded
//! top-layer features with a constant 1 appended (the bias is shrunk like any
//! other weight). The hinge pseudo-likelihood
//! `exp(-2 gamma max(1 - y beta's, 0))` is written as a Gaussian mixture over a
//! latent scale `lambda`, which makes both `lambda` and `beta` conditionally
//! tractable:
//!
//! * `1 / lambda ~ IG(1 / |1 - y beta's|, gamma)`
//! * `beta` maximises
//!   `-1/2 beta' Omega^-1 beta - sum_n gamma (1 + lambda_n - y_n beta's_n)^2 / (2 lambda_n)`
//!   with `Omega^-1 = diag(1 / |beta_old|)`, a local quadratic bound of the
//!   Laplace shrinkage prior.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::distributions::sample_inverse_gaussian;
use crate::error::{Error, Result};

/// Class weights and the margin scale.
#[derive(Debug, Clone, PartialEq)]
pub struct SvmState {
    /// One vector per class, length = feature length + 1 (bias last).
    pub betas: Vec<Vec<f64>>,
    pub gamma: f64,
    /// Lower bound on `|beta_i|` inside `Omega^-1`.
    pub beta_floor: f64,
}

impl SvmState {
    pub fn new(classes: usize, dim: usize, gamma: f64, beta_floor: f64) -> Self {
        SvmState {
            betas: vec![vec![0.0; dim]; classes],
            gamma,
            beta_floor,
        }
    }

    pub fn classes(&self) -> usize {
        self.betas.len()
    }

    pub fn dim(&self) -> usize {
        self.betas.first().map_or(0, |b| b.len())
    }

    /// Decision values `beta_l's` for every class.
    pub fn scores(&self, s: &[f64]) -> Vec<f64> {
        self.betas.iter().map(|b| dot(b, s)).collect()
    }
}

/// One-vs-all target of example with 0-based label `label` for class `class`.
#[inline]
pub fn target(label: usize, class: usize) -> f64 {
    if label == class {
        1.0
    } else {
        -1.0
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `exp(-2 gamma max(1 - y beta's, 0))`.
pub fn pseudo_likelihood(y: f64, s: &[f64], beta: &[f64], gamma: f64) -> f64 {
    (-2.0 * gamma * (1.0 - y * dot(beta, s)).max(0.0)).exp()
}

/// Penalty added to the hinge loss in [`hinge_objective`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Regularizer {
    None,
    /// `scale * sum |beta_i|`
    L1(f64),
    /// `scale * sum beta_i^2 / 2`
    L2(f64),
}

impl Regularizer {
    pub fn eval(&self, beta: &[f64]) -> f64 {
        match *self {
            Regularizer::None => 0.0,
            Regularizer::L1(c) => c * beta.iter().map(|b| b.abs()).sum::<f64>(),
            Regularizer::L2(c) => 0.5 * c * beta.iter().map(|b| b * b).sum::<f64>(),
        }
    }
}

/// `gamma * sum_n max(1 - y_n beta's_n, 0) + R(beta)`.
pub fn hinge_objective(
    features: &[Vec<f64>],
    ys: &[f64],
    beta: &[f64],
    gamma: f64,
    reg: Regularizer,
) -> f64 {
    let hinge: f64 = features
        .iter()
        .zip(ys)
        .map(|(s, y)| (1.0 - y * dot(beta, s)).max(0.0))
        .sum();
    gamma * hinge + reg.eval(beta)
}

/// Draws `lambda` given the margin `m = y beta's`.
pub fn sample_lambda<R: Rng + ?Sized>(margin: f64, gamma: f64, rng: &mut R) -> Result<f64> {
    let gap = (1.0 - margin).abs();
    let mu = if gap > 0.0 { 1.0 / gap } else { f64::INFINITY };
    let inv = sample_inverse_gaussian(mu, gamma, rng)?;
    Ok((1.0 / inv).clamp(f64::MIN_POSITIVE, f64::MAX))
}

/// The augmented objective [`update_beta`] maximises, for one class.
pub fn augmented_objective(
    features: &[Vec<f64>],
    ys: &[f64],
    lambdas: &[f64],
    beta: &[f64],
    omega_inv: &[f64],
    gamma: f64,
) -> f64 {
    let prior: f64 = beta
        .iter()
        .zip(omega_inv)
        .map(|(b, w)| 0.5 * w * b * b)
        .sum();
    let fit: f64 = features
        .iter()
        .zip(ys)
        .zip(lambdas)
        .map(|((s, y), l)| {
            let r = 1.0 + l - y * dot(beta, s);
            gamma * r * r / (2.0 * l)
        })
        .sum();
    -prior - fit
}

/// Diagonal of `Omega^-1` built from the previous weights. An all-zero
/// previous vector (fresh model) falls back to a unit ridge, otherwise the
/// floor would pin every weight at zero for good.
pub fn omega_inverse(beta_prev: &[f64], floor: f64) -> Vec<f64> {
    if beta_prev.iter().all(|b| *b == 0.0) {
        return vec![1.0; beta_prev.len()];
    }
    beta_prev.iter().map(|b| 1.0 / b.abs().max(floor)).collect()
}

/// Closed-form weight update for one class:
/// `(Omega^-1 + gamma sum s s' / lambda) beta = gamma sum y s (1 + 1 / lambda)`.
///
/// The system is symmetric positive definite; it is solved by Cholesky. If
/// the factorisation fails, a growing multiple of the identity is added
/// before giving up with [`Error::Singular`].
pub fn update_beta(
    features: &[Vec<f64>],
    ys: &[f64],
    lambdas: &[f64],
    omega_inv: &[f64],
    gamma: f64,
) -> Result<Vec<f64>> {
    let dim = omega_inv.len();
    if features.len() != ys.len() || features.len() != lambdas.len() {
        return Err(Error::shape(
            "features, targets and lambdas differ in length",
        ));
    }
    if let Some(s) = features.iter().find(|s| s.len() != dim) {
        return Err(Error::shape(format!(
            "feature length {} does not match weight length {dim}",
            s.len()
        )));
    }
    if let Some(l) = lambdas.iter().find(|l| !(**l > 0.0)) {
        return Err(Error::param(format!("lambda must be positive, got {l}")));
    }
    let mut a = DMatrix::<f64>::zeros(dim, dim);
    let mut rhs = DVector::<f64>::zeros(dim);
    for ((s, &y), &lam) in features.iter().zip(ys).zip(lambdas) {
        let w = gamma / lam;
        let c = gamma * y * (1.0 + 1.0 / lam);
        for i in 0..dim {
            let si = s[i];
            if si == 0.0 {
                continue;
            }
            rhs[i] += c * si;
            let wi = w * si;
            // upper triangle only; mirrored below
            for j in i..dim {
                a[(i, j)] += wi * s[j];
            }
        }
    }
    for i in 0..dim {
        a[(i, i)] += omega_inv[i];
        for j in 0..i {
            a[(i, j)] = a[(j, i)];
        }
    }
    let scale = (0..dim).map(|i| a[(i, i)]).fold(0.0, f64::max).max(1.0);
    let mut jitter = 0.0;
    for attempt in 0..6 {
        let mut m = a.clone();
        if jitter > 0.0 {
            for i in 0..dim {
                m[(i, i)] += jitter;
            }
        }
        if let Some(ch) = m.cholesky() {
            let beta = ch.solve(&rhs);
            if beta.iter().all(|v| v.is_finite()) {
                if attempt > 0 {
                    log::warn!("beta system needed diagonal jitter {jitter:e}");
                }
                return Ok(beta.iter().copied().collect());
            }
        }
        jitter = if jitter == 0.0 {
            1e-12 * scale
        } else {
            jitter * 100.0
        };
    }
    Err(Error::Singular(format!(
        "beta system of size {dim} is not positive definite"
    )))
}

/// Fits the weights of every class to fixed features by expectation
/// maximisation over the latent scales: each round sets
/// `lambda_n = |1 - y_n beta's_n|` (the reciprocal of the conditional mean of
/// `1 / lambda_n`) and solves for `beta`.
pub fn fit_em(
    svm: &mut SvmState,
    features: &[Vec<f64>],
    labels: &[usize],
    rounds: usize,
) -> Result<()> {
    if features.len() != labels.len() {
        return Err(Error::shape("one label per feature vector is required"));
    }
    let (gamma, floor) = (svm.gamma, svm.beta_floor);
    let betas: Vec<Vec<f64>> = (0..svm.classes())
        .into_par_iter()
        .map(|cls| {
            let ys: Vec<f64> = labels.iter().map(|&l| target(l, cls)).collect();
            let mut beta = svm.betas[cls].clone();
            for _ in 0..rounds {
                let lams: Vec<f64> = features
                    .iter()
                    .zip(&ys)
                    .map(|(s, y)| (1.0 - y * dot(&beta, s)).abs().max(1e-6))
                    .collect();
                beta = update_beta(features, &ys, &lams, &omega_inverse(&beta, floor), gamma)?;
            }
            Ok(beta)
        })
        .collect::<Result<_>>()?;
    svm.betas = betas;
    Ok(())
}

/// Arg-max class (lowest index on ties) and all decision values.
pub fn predict(s: &[f64], betas: &[Vec<f64>]) -> (usize, Vec<f64>) {
    let scores: Vec<f64> = betas.iter().map(|b| dot(b, s)).collect();
    (argmax(&scores), scores)
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::RngStream;

    #[test]
    fn hinge_inactive_and_zero_margin() {
        assert_eq!(pseudo_likelihood(1.0, &[2.0], &[0.5], 1.0), 1.0);
        let v = pseudo_likelihood(1.0, &[1.0], &[0.0], 1.0);
        assert!((v - (-2.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn zero_beta_objective_is_gamma_n() {
        let f = vec![vec![1.0, 2.0], vec![-1.0, 0.5], vec![0.0, 1.0]];
        let ys = [1.0, -1.0, 1.0];
        let v = hinge_objective(&f, &ys, &[0.0, 0.0], 2.0, Regularizer::L1(1.0));
        assert_eq!(v, 6.0);
    }

    #[test]
    fn lambda_is_positive() {
        let mut r = RngStream::new(9, 0);
        for m in [-2.0, 0.0, 1.0, 3.0] {
            for _ in 0..200 {
                let l = sample_lambda(m, 1.0, &mut r).unwrap();
                assert!(l > 0.0 && l.is_finite());
            }
        }
    }

    #[test]
    fn predict_ties_and_scores() {
        let betas = vec![vec![0.3], vec![0.1]];
        assert_eq!(predict(&[1.0], &betas).0, 0);
        let betas = vec![vec![0.1], vec![0.3]];
        assert_eq!(predict(&[1.0], &betas).0, 1);
        let betas = vec![vec![0.2], vec![0.2], vec![0.1]];
        assert_eq!(predict(&[1.0], &betas).0, 0);
    }

    #[test]
    fn infinite_shrinkage_drives_beta_to_zero() {
        let f = vec![vec![1.0, 0.5], vec![-1.0, 0.3]];
        let beta = update_beta(&f, &[1.0, -1.0], &[1.0, 1.0], &[1e12, 1e12], 1.0).unwrap();
        assert!(beta.iter().all(|b| b.abs() < 1e-10));
    }

    #[test]
    fn symmetric_two_point_data_gives_beta_along_s() {
        let s = [0.7, -1.3, 0.4];
        let f = vec![s.to_vec(), s.iter().map(|v| -v).collect()];
        let beta = update_beta(&f, &[1.0, -1.0], &[0.8, 0.8], &[1.0; 3], 1.0).unwrap();
        let ratio = beta[0] / s[0];
        for (b, v) in beta.iter().zip(&s) {
            assert!((b - ratio * v).abs() < 1e-12);
        }
        assert!(ratio > 0.0);
    }

    #[test]
    fn omega_ridge_start() {
        assert_eq!(omega_inverse(&[0.0, 0.0], 1e-6), vec![1.0, 1.0]);
        assert_eq!(omega_inverse(&[0.5, 0.0], 1e-6), vec![2.0, 1e6]);
    }
}
