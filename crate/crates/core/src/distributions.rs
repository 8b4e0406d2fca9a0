//! Random streams and the handful of samplers the Gibbs and MCEM machinery
//! needs.
//!
//! Every worker owns its own [`RngStream`]; streams are identified by a
//! `(seed, stream id)` pair so per-image sampling is reproducible no matter
//! how work is scheduled across threads.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Upper bound on the inverse-Gaussian mean. `1 / |1 - margin|` blows up when
/// a training example sits exactly on the margin.
pub const INVERSE_GAUSSIAN_MEAN_CAP: f64 = 1e8;

/// Variances below this are treated as a point mass at the mean.
pub const DEGENERATE_VARIANCE: f64 = 1e-300;

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngStream { seed, stream, rng }
    }

    /// Stream for a `(purpose, a, b)` triple under a master seed. `a` and `b`
    /// are typically an iteration counter and an image index.
    pub fn derive(seed: u64, purpose: u64, a: u64, b: u64) -> Self {
        let s = splitmix64(seed ^ splitmix64(purpose.wrapping_add(0x5EED)));
        RngStream::new(s, (a << 32) ^ (b & 0xFFFF_FFFF) ^ (b >> 32).rotate_left(17))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn set_word_pos(&mut self, pos: u128) {
        self.rng.set_word_pos(pos);
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Uniform on the open interval (0, 1).
fn open_uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

pub fn sample_gaussian<R: Rng + ?Sized>(mean: f64, variance: f64, rng: &mut R) -> Result<f64> {
    if !(variance > 0.0) || !mean.is_finite() || !variance.is_finite() {
        return Err(Error::param(format!(
            "gaussian needs finite mean and positive variance, got N({mean}, {variance})"
        )));
    }
    if variance < DEGENERATE_VARIANCE {
        return Ok(mean);
    }
    Ok(mean + variance.sqrt() * standard_normal(rng))
}

/// Natural log of a Gamma(shape, 1) draw.
///
/// Marsaglia-Tsang for shape >= 1; for shape < 1 the usual boost
/// `G(a) = G(a + 1) * U^(1/a)` is applied in log space so tiny shapes do not
/// underflow to zero before normalisation.
fn log_gamma_unit<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    if shape < 1.0 {
        let boost = open_uniform(rng).ln() / shape;
        return log_gamma_unit(shape + 1.0, rng) + boost;
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x = standard_normal(rng);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u = open_uniform(rng);
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return d.ln() + v.ln();
        }
    }
}

/// Gamma with shape/rate parametrisation (mean `shape / rate`).
pub fn sample_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    if !(shape > 0.0 && rate > 0.0) || !shape.is_finite() || !rate.is_finite() {
        return Err(Error::param(format!(
            "gamma needs positive shape and rate, got Gamma({shape}, {rate})"
        )));
    }
    let v = (log_gamma_unit(shape, rng) - rate.ln()).exp();
    Ok(v.clamp(f64::MIN_POSITIVE, f64::MAX))
}

pub fn sample_dirichlet<R: Rng + ?Sized>(alphas: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    if alphas.is_empty() {
        return Err(Error::param("dirichlet needs at least one component"));
    }
    if let Some(a) = alphas.iter().find(|a| !(**a > 0.0) || !a.is_finite()) {
        return Err(Error::param(format!(
            "dirichlet concentration must be positive, got {a}"
        )));
    }
    let logs: Vec<f64> = alphas.iter().map(|&a| log_gamma_unit(a, rng)).collect();
    Ok(normalize_log_weights(&logs))
}

/// `exp(w - max) / sum` computed stably; the result sums to 1.
pub fn normalize_log_weights(logw: &[f64]) -> Vec<f64> {
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logw.iter().map(|&w| (w - max).exp()).collect();
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
    p
}

pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> Result<usize> {
    if probs.is_empty() {
        return Err(Error::param("categorical needs at least one category"));
    }
    if let Some(p) = probs.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
        return Err(Error::param(format!(
            "categorical probability must be non-negative, got {p}"
        )));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::param(format!(
            "categorical probabilities sum to {total}, not 1"
        )));
    }
    Ok(categorical_unchecked(probs, rng))
}

/// Inverse-CDF draw from an already-validated, normalised probability
/// vector. Never returns an index with zero probability.
pub(crate) fn categorical_unchecked<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Draw from a categorical given unnormalised log weights.
pub fn sample_log_categorical<R: Rng + ?Sized>(logw: &[f64], rng: &mut R) -> usize {
    categorical_unchecked(&normalize_log_weights(logw), rng)
}

/// Inverse Gaussian `IG(mu, shape)` via the transformation-with-rejection
/// method (Michael, Schucany and Haas). `mu` is capped at
/// [`INVERSE_GAUSSIAN_MEAN_CAP`], so `mu = inf` is accepted.
pub fn sample_inverse_gaussian<R: Rng + ?Sized>(mu: f64, shape: f64, rng: &mut R) -> Result<f64> {
    if !(mu > 0.0 && shape > 0.0) || !shape.is_finite() || mu.is_nan() {
        return Err(Error::param(format!(
            "inverse gaussian needs positive mean and shape, got IG({mu}, {shape})"
        )));
    }
    let mu = mu.min(INVERSE_GAUSSIAN_MEAN_CAP);
    let nu = standard_normal(rng);
    let y = nu * nu;
    let my = mu * y;
    // x = mu + mu^2 y/(2 shape) - mu/(2 shape) sqrt(4 mu shape y + mu^2 y^2), rearranged
    // to avoid cancellation for large mu.
    let x = mu - 2.0 * mu * my / (my + (my * my + 4.0 * mu * shape * y).sqrt());
    let x = if x > 0.0 { x } else { f64::MIN_POSITIVE };
    let u: f64 = rng.random();
    let draw = if u <= mu / (mu + x) { x } else { mu * mu / x };
    Ok(draw.clamp(f64::MIN_POSITIVE, f64::MAX))
}
