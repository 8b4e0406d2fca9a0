//! Single-site full conditionals.
//!
//! All likelihood terms are computed from the residual: if a site currently
//! contributes `c * R` to the image, `A = E + c * R` is the residual with
//! that contribution removed, and setting the contribution to `c' * R'`
//! changes the log-likelihood by `gamma_e (c' <A, R'> - c'^2 ||R'||^2 / 2)`
//! relative to switching it off.

use rand::Rng;

use super::cache::{weighted_patch_norm, ResidualCache};
use crate::distributions::{
    categorical_unchecked, normalize_log_weights, sample_dirichlet, sample_gamma, sample_gaussian,
};
use crate::error::{Error, Result};
use crate::model::{
    dirichlet_concentration, respond_unit, respond_x, DictionarySet, Hyperparams, NetworkSpec,
};
use crate::svm::target;
use crate::tensor::{add_patch, dot_patch, dot_patch_weighted, IndicatorGrid, Tensor3};

/// SVM terms entering the top-layer conditionals of one labelled image.
#[derive(Debug, Clone, Copy)]
pub struct SvmCoupling<'a> {
    pub betas: &'a [Vec<f64>],
    pub gamma: f64,
    /// 0-based class label.
    pub label: usize,
}

/// Image-plane response of a candidate site: either a kernel patch on the
/// image (bottom layer) or a full image.
enum Response<'a> {
    Patch { y: usize, x: usize, d: &'a Tensor3 },
    Full(Tensor3),
}

impl Response<'_> {
    fn dot(&self, cache: &ResidualCache) -> f64 {
        match self {
            Response::Full(r) => cache.dot_residual(r),
            Response::Patch { y, x, d } => {
                let e = cache.residual();
                let w = e.width();
                (0..d.bands())
                    .map(|b| match cache.weights() {
                        None => dot_patch(e.band(b), w, *y, *x, d.band(b), d.height(), d.width()),
                        Some(m) => {
                            let n = e.plane_len();
                            dot_patch_weighted(
                                e.band(b),
                                &m[b * n..(b + 1) * n],
                                w,
                                *y,
                                *x,
                                d.band(b),
                                d.height(),
                                d.width(),
                            )
                        }
                    })
                    .sum()
            }
        }
    }

    fn norm_sq(&self, cache: &ResidualCache) -> f64 {
        match self {
            Response::Full(r) => cache.wnorm_sq(r.data()),
            Response::Patch { y, x, d } => match cache.weights() {
                None => d.norm_sq(),
                Some(m) => {
                    let e = cache.residual();
                    let n = e.plane_len();
                    (0..d.bands())
                        .map(|b| {
                            weighted_patch_norm(
                                &m[b * n..(b + 1) * n],
                                e.width(),
                                *y,
                                *x,
                                d.band(b),
                                d.height(),
                                d.width(),
                            )
                        })
                        .sum()
                }
            },
        }
    }

    /// `E += alpha * R`
    fn add_to(&self, alpha: f64, cache: &mut ResidualCache) {
        if alpha == 0.0 {
            return;
        }
        match self {
            Response::Full(r) => cache.add(alpha, r),
            Response::Patch { y, x, d } => {
                let e = cache.residual_mut();
                let w = e.width();
                for b in 0..d.bands() {
                    add_patch(
                        e.band_mut(b),
                        w,
                        *y,
                        *x,
                        d.band(b),
                        d.height(),
                        d.width(),
                        alpha,
                    );
                }
            }
        }
    }
}

fn unit_response<'a>(
    spec: &NetworkSpec,
    dicts: &'a DictionarySet,
    z: &[Vec<IndicatorGrid>],
    l: usize,
    k: usize,
    y: usize,
    x: usize,
) -> Response<'a> {
    if l == 0 {
        Response::Patch {
            y,
            x,
            d: dicts.get(0, k),
        }
    } else {
        Response::Full(respond_unit(spec, dicts, z, l, k, y, x))
    }
}

/// Conditional probabilities of the categories of block `(i, j)` of band `k`
/// in layer `l` (below the top), where `v` is the pooled value the block
/// carries. Index 0 is the off-state.
///
/// On return the cache holds `A`, the residual with this block's current
/// contribution removed; the caller must add the new contribution back. Use
/// [`sample_unpool_indicator`] unless you need the probabilities themselves.
#[allow(clippy::too_many_arguments)]
fn indicator_log_weights(
    spec: &NetworkSpec,
    dicts: &DictionarySet,
    z: &[Vec<IndicatorGrid>],
    theta: &[f64],
    gamma_e: f64,
    l: usize,
    k: usize,
    i: usize,
    j: usize,
    v: f64,
    cache: &mut ResidualCache,
) -> Vec<f64> {
    let grid = &z[l][k];
    let ncat = grid.num_categories();
    let mut logw: Vec<f64> = theta.iter().map(|t| t.ln()).collect();
    if v == 0.0 {
        return logw;
    }
    if let Some((y, x)) = grid.active(i, j) {
        unit_response(spec, dicts, z, l, k, y, x).add_to(v, cache);
    }
    for (m, lw) in logw.iter_mut().enumerate().take(ncat).skip(1) {
        let (y, x) = grid.position(i, j, m).expect("active category");
        let r = unit_response(spec, dicts, z, l, k, y, x);
        let ar = r.dot(cache);
        let rr = r.norm_sq(cache);
        *lw += gamma_e * (v * ar - 0.5 * v * v * rr);
    }
    logw
}

/// Normalised conditional over categories of block `(i, j)`; the cache is
/// left unchanged.
#[allow(clippy::too_many_arguments)]
pub fn indicator_probabilities(
    spec: &NetworkSpec,
    dicts: &DictionarySet,
    z: &[Vec<IndicatorGrid>],
    theta: &[f64],
    gamma_e: f64,
    l: usize,
    k: usize,
    i: usize,
    j: usize,
    v: f64,
    cache: &ResidualCache,
) -> Vec<f64> {
    let mut scratch = cache.clone();
    normalize_log_weights(&indicator_log_weights(
        spec,
        dicts,
        z,
        theta,
        gamma_e,
        l,
        k,
        i,
        j,
        v,
        &mut scratch,
    ))
}

/// Resamples the unpooling category of block `(i, j)` of band `k` in layer
/// `l < top`, updating `z` and the residual. `v` is the pooled value
/// `X_{l+1}[k](i, j)`.
#[allow(clippy::too_many_arguments)]
pub fn sample_unpool_indicator<R: Rng + ?Sized>(
    spec: &NetworkSpec,
    dicts: &DictionarySet,
    z: &mut [Vec<IndicatorGrid>],
    theta: &[f64],
    gamma_e: f64,
    l: usize,
    k: usize,
    i: usize,
    j: usize,
    v: f64,
    cache: &mut ResidualCache,
    rng: &mut R,
) -> usize {
    let logw = indicator_log_weights(spec, dicts, z, theta, gamma_e, l, k, i, j, v, cache);
    let c = categorical_unchecked(&normalize_log_weights(&logw), rng);
    z[l][k].set_category(i, j, c);
    if v != 0.0 {
        if let Some((y, x)) = z[l][k].active(i, j) {
            unit_response(spec, dicts, z, l, k, y, x).add_to(-v, cache);
        }
    }
    c
}

/// Dirichlet posterior concentrations: `1/(P+1) + count` per category.
pub fn theta_posterior(pool_len: usize, counts: &[usize]) -> Vec<f64> {
    let a = dirichlet_concentration(pool_len);
    counts.iter().map(|&c| a + c as f64).collect()
}

pub fn sample_theta<R: Rng + ?Sized>(grid: &IndicatorGrid, rng: &mut R) -> Result<Vec<f64>> {
    sample_dirichlet(&theta_posterior(grid.block_len(), &grid.counts()), rng)
}

/// Gaussian conditional of one top-layer weight, as precision and
/// precision-weighted mean, under the spike being on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TopPosterior {
    pub precision: f64,
    pub shift: f64,
}

impl TopPosterior {
    pub fn mean(&self) -> f64 {
        self.shift / self.precision
    }

    pub fn variance(&self) -> f64 {
        1.0 / self.precision
    }

    /// `log p(on) - log p(off)` with the weight integrated out, excluding the
    /// prior odds.
    pub fn log_bayes_factor(&self, gamma_s: f64) -> f64 {
        0.5 * (gamma_s / self.precision).ln() + 0.5 * self.shift * self.shift / self.precision
    }
}

/// Per-image context for the top-layer updates.
pub struct TopSite<'a> {
    /// Image response of a unit weight at this site.
    pub response: &'a Tensor3,
    /// Index of the site in the unfolded feature vector.
    pub feature: usize,
    pub gamma_e: f64,
    pub gamma_s: f64,
}

/// Conditional of the weight at a top site. The cache must hold the residual
/// with the site's contribution removed; `rest` holds, per class, the decision
/// value without this site.
pub fn top_weight_posterior(
    site: &TopSite<'_>,
    cache: &ResidualCache,
    svm: Option<(&SvmCoupling<'_>, &[f64], &[f64])>,
) -> Result<TopPosterior> {
    let mut precision = site.gamma_e * cache.wnorm_sq(site.response.data()) + site.gamma_s;
    let mut shift = site.gamma_e * cache.dot_residual(site.response);
    if let Some((c, lambdas, rest)) = svm {
        for (cls, beta) in c.betas.iter().enumerate() {
            let lam = lambdas[cls];
            if !(lam > 0.0) {
                return Err(Error::param(format!("lambda must be positive, got {lam}")));
            }
            let y = target(c.label, cls);
            let b = beta[site.feature];
            let offset = 1.0 + lam - y * rest[cls];
            precision += c.gamma * b * b / lam;
            shift += c.gamma * y * b * offset / lam;
        }
    }
    Ok(TopPosterior { precision, shift })
}

/// Draws the weight at a top site given its spike: from the Gaussian
/// conditional when on, from the `N(0, 1/gamma_s)` prior when off.
pub fn sample_top_weight<R: Rng + ?Sized>(
    on: bool,
    post: &TopPosterior,
    gamma_s: f64,
    rng: &mut R,
) -> Result<f64> {
    if on {
        sample_gaussian(post.mean(), post.variance(), rng)
    } else {
        sample_gaussian(0.0, 1.0 / gamma_s, rng)
    }
}

/// Jointly resamples spike and weight of one top site (the weight is
/// integrated out for the spike). `w`/`on` are updated in place, the residual
/// and decision values `scores` follow.
#[allow(clippy::too_many_arguments)]
pub fn sample_top_site<R: Rng + ?Sized>(
    site: &TopSite<'_>,
    theta: &[f64],
    w: &mut f64,
    on: &mut bool,
    cache: &mut ResidualCache,
    svm: Option<(&SvmCoupling<'_>, &[f64])>,
    scores: &mut [f64],
    rng: &mut R,
) -> Result<()> {
    let s_old = if *on { *w } else { 0.0 };
    cache.add(s_old, site.response);
    let rest: Vec<f64> = match svm {
        Some((c, _)) => c
            .betas
            .iter()
            .zip(scores.iter())
            .map(|(b, s)| s - b[site.feature] * s_old)
            .collect(),
        None => Vec::new(),
    };
    let post = top_weight_posterior(site, cache, svm.map(|(c, l)| (c, l, rest.as_slice())))?;
    let log_odds = theta[1].ln() - theta[0].ln() + post.log_bayes_factor(site.gamma_s);
    let p_on = if log_odds >= 0.0 {
        1.0 / (1.0 + (-log_odds).exp())
    } else {
        let e = log_odds.exp();
        e / (1.0 + e)
    };
    *on = rng.random::<f64>() < p_on;
    *w = sample_top_weight(*on, &post, site.gamma_s, rng)?;
    let s_new = if *on { *w } else { 0.0 };
    cache.add(-s_new, site.response);
    if let Some((c, _)) = svm {
        for ((score, r), b) in scores.iter_mut().zip(&rest).zip(c.betas) {
            *score = r + b[site.feature] * s_new;
        }
    }
    Ok(())
}

/// `Gamma(a_s + n/2, b_s + ||w||^2/2)` for one top band.
pub fn sample_gamma_s<R: Rng + ?Sized>(w: &[f64], hyper: &Hyperparams, rng: &mut R) -> Result<f64> {
    let ss: f64 = w.iter().map(|v| v * v).sum();
    sample_gamma(hyper.a_s + 0.5 * w.len() as f64, hyper.b_s + 0.5 * ss, rng)
}

/// `Gamma(a_e + n_obs/2, b_e + ||E||^2/2)` over the observed pixels.
pub fn sample_gamma_e<R: Rng + ?Sized>(
    cache: &ResidualCache,
    hyper: &Hyperparams,
    rng: &mut R,
) -> Result<f64> {
    sample_gamma(
        hyper.a_e + 0.5 * cache.n_obs(),
        hyper.b_e + 0.5 * cache.norm_sq(),
        rng,
    )
}

/// Per-image view used by the dictionary conditional.
pub struct PixelImage<'a> {
    /// Feature maps of the dictionary's layer.
    pub s: &'a Tensor3,
    pub z: &'a [Vec<IndicatorGrid>],
    pub gamma_e: f64,
}

/// Image-plane response of dictionary pixel `(b, p, q)` of element `k` in
/// layer `l >= 1`.
fn pixel_response_full(
    spec: &NetworkSpec,
    dicts: &DictionarySet,
    img: &PixelImage<'_>,
    l: usize,
    k: usize,
    b: usize,
    p: usize,
    q: usize,
) -> Tensor3 {
    let g = spec.geometry(l);
    let mut xl = Tensor3::zeros(g.in_h, g.in_w, g.in_bands);
    let plane = img.s.band(k);
    let band = xl.band_mut(b);
    for y in 0..g.s_h {
        for x in 0..g.s_w {
            band[(y + p) * g.in_w + x + q] = plane[y * g.s_w + x];
        }
    }
    respond_x(dicts, img.z, l, xl)
}

/// Accumulates `(<E, F>, ||F||^2)` for a bottom-layer pixel, where `F` is the
/// band-`k` feature map shifted by `(p, q)` into image band `b`.
fn pixel_terms_bottom(
    img: &PixelImage<'_>,
    cache: &ResidualCache,
    k: usize,
    b: usize,
    p: usize,
    q: usize,
) -> (f64, f64) {
    let e = cache.residual();
    let (ew, n) = (e.width(), e.plane_len());
    let eb = e.band(b);
    let plane = img.s.band(k);
    let (s_h, s_w) = (img.s.height(), img.s.width());
    let (mut ef, mut ff) = (0.0, 0.0);
    for y in 0..s_h {
        for x in 0..s_w {
            let s = plane[y * s_w + x];
            if s == 0.0 {
                continue;
            }
            let idx = (y + p) * ew + x + q;
            let w = cache.weights().map_or(1.0, |m| m[b * n + idx]);
            ef += w * s * eb[idx];
            ff += w * s * s;
        }
    }
    (ef, ff)
}

fn pixel_shift_bottom(
    img: &PixelImage<'_>,
    cache: &mut ResidualCache,
    k: usize,
    b: usize,
    p: usize,
    q: usize,
    delta: f64,
) {
    let plane = img.s.band(k);
    let (s_h, s_w) = (img.s.height(), img.s.width());
    let e = cache.residual_mut();
    let ew = e.width();
    let eb = e.band_mut(b);
    for y in 0..s_h {
        for x in 0..s_w {
            let s = plane[y * s_w + x];
            if s != 0.0 {
                eb[(y + p) * ew + x + q] -= delta * s;
            }
        }
    }
}

/// Gaussian conditional `(mean, variance)` of dictionary pixel `(b, p, q)` of
/// element `k` in layer `l`, pooling evidence from every image:
/// precision `1 + sum_n gamma_e ||F_n||^2`, mean
/// `sum_n gamma_e <E_n + d F_n, F_n> / precision`.
#[allow(clippy::too_many_arguments)]
pub fn dictionary_pixel_posterior(
    spec: &NetworkSpec,
    dicts: &DictionarySet,
    images: &[PixelImage<'_>],
    caches: &[ResidualCache],
    l: usize,
    k: usize,
    b: usize,
    p: usize,
    q: usize,
) -> (f64, f64) {
    let d = dicts.get(l, k).get(p, q, b);
    let (mut prec, mut lin) = (1.0, 0.0);
    for (img, cache) in images.iter().zip(caches) {
        let (ef, ff) = if l == 0 {
            pixel_terms_bottom(img, cache, k, b, p, q)
        } else {
            let f = pixel_response_full(spec, dicts, img, l, k, b, p, q);
            (cache.dot_residual(&f), cache.wnorm_sq(f.data()))
        };
        prec += img.gamma_e * ff;
        lin += img.gamma_e * (ef + d * ff);
    }
    (lin / prec, 1.0 / prec)
}

/// Resamples one dictionary pixel and updates every image's residual.
#[allow(clippy::too_many_arguments)]
pub fn sample_dictionary_pixel<R: Rng + ?Sized>(
    spec: &NetworkSpec,
    dicts: &mut DictionarySet,
    images: &[PixelImage<'_>],
    caches: &mut [ResidualCache],
    l: usize,
    k: usize,
    b: usize,
    p: usize,
    q: usize,
    rng: &mut R,
) -> Result<f64> {
    let old = dicts.get(l, k).get(p, q, b);
    let (mean, var) = dictionary_pixel_posterior(spec, dicts, images, caches, l, k, b, p, q);
    let new = sample_gaussian(mean, var, rng)?;
    let delta = new - old;
    if l == 0 {
        for (img, cache) in images.iter().zip(caches.iter_mut()) {
            pixel_shift_bottom(img, cache, k, b, p, q, delta);
        }
    } else {
        for (img, cache) in images.iter().zip(caches.iter_mut()) {
            let f = pixel_response_full(spec, dicts, img, l, k, b, p, q);
            cache.add(-delta, &f);
        }
    }
    dicts.get_mut(l, k).set(p, q, b, new);
    Ok(new)
}
