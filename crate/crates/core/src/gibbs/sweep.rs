use rand::Rng;
use rayon::prelude::*;

use super::cache::ResidualCache;
use super::kernels::{
    sample_dictionary_pixel, sample_gamma_e, sample_gamma_s, sample_theta, sample_top_site,
    sample_unpool_indicator, PixelImage, SvmCoupling, TopSite,
};
use crate::distributions::RngStream;
use crate::error::{Error, Result};
use crate::model::{decode, respond_unit, DictionarySet, LatentState, NetworkSpec};
use crate::svm::{omega_inverse, sample_lambda, target, update_beta, SvmState};
use crate::tensor::Tensor3;

/// Stream purposes for [`RngStream::derive`].
pub mod purpose {
    pub const LOCAL: u64 = 1;
    pub const DICTIONARY: u64 = 2;
    pub const INIT: u64 = 3;
    pub const MINIBATCH: u64 = 4;
    pub const INFERENCE: u64 = 5;
    pub const PRETRAIN: u64 = 6;
    pub const TASK: u64 = 7;
}

/// Which blocks of the per-image scan to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepOptions {
    pub lower_z: bool,
    pub theta: bool,
    pub top: bool,
    pub gamma_s: bool,
    pub gamma_e: bool,
    pub lambda: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            lower_z: true,
            theta: true,
            top: true,
            gamma_s: true,
            gamma_e: true,
            lambda: true,
        }
    }
}

/// One systematic scan over the latent variables of a single image with the
/// dictionaries (and SVM weights) held fixed: lower-layer indicators bottom to
/// top, the Dirichlet weights, the top-layer spikes and weights, the
/// precisions and finally the SVM scales. Returns the residual after the scan.
#[allow(clippy::too_many_arguments)]
pub fn local_sweep<R: Rng + ?Sized>(
    spec: &NetworkSpec,
    dicts: &DictionarySet,
    image: &Tensor3,
    state: &mut LatentState,
    weights: Option<&[f64]>,
    svm: Option<SvmCoupling<'_>>,
    opts: &SweepOptions,
    rng: &mut R,
) -> Result<ResidualCache> {
    let acts = decode(spec, dicts, state);
    let mut cache = ResidualCache::from_activations(image, &acts, weights.map(|w| w.to_vec()))?;
    let top = spec.top();

    if opts.lower_z {
        for l in 0..top {
            let xa = &acts.x[l + 1];
            for k in 0..spec.layers[l].dicts {
                let (by, bx) = (state.z[l][k].blocks_y(), state.z[l][k].blocks_x());
                for i in 0..by {
                    for j in 0..bx {
                        let v = xa.get(i, j, k);
                        sample_unpool_indicator(
                            spec,
                            dicts,
                            &mut state.z,
                            &state.theta[l][k],
                            state.gamma_e,
                            l,
                            k,
                            i,
                            j,
                            v,
                            &mut cache,
                            rng,
                        );
                    }
                }
            }
        }
    }

    if opts.theta {
        for l in 0..=top {
            for k in 0..spec.layers[l].dicts {
                state.theta[l][k] = sample_theta(&state.z[l][k], rng)?;
            }
        }
    }

    if opts.top {
        sweep_top(spec, dicts, state, &mut cache, svm.as_ref(), rng)?;
    }

    if opts.gamma_s {
        for k in 0..state.gamma_s.len() {
            state.gamma_s[k] = sample_gamma_s(state.top_w.band(k), &spec.hyper, rng)?;
        }
    }
    if opts.gamma_e {
        state.gamma_e = sample_gamma_e(&cache, &spec.hyper, rng)?;
    }
    if opts.lambda {
        if let Some(c) = svm {
            let f = state.features();
            for (cls, beta) in c.betas.iter().enumerate() {
                let m = target(c.label, cls) * crate::svm::dot(beta, &f);
                state.lambdas[cls] = sample_lambda(m, c.gamma, rng)?;
            }
        }
    }
    Ok(cache)
}

/// Image responses of every top-layer site, in feature order.
pub fn top_responses(
    spec: &NetworkSpec,
    dicts: &DictionarySet,
    state: &LatentState,
) -> Vec<Tensor3> {
    let top = spec.top();
    let g = spec.geometry(top);
    let mut out = Vec::with_capacity(spec.feature_len());
    for k in 0..spec.layers[top].dicts {
        for i in 0..g.s_h {
            for j in 0..g.s_w {
                out.push(respond_unit(spec, dicts, &state.z, top, k, i, j));
            }
        }
    }
    out
}

fn sweep_top<R: Rng + ?Sized>(
    spec: &NetworkSpec,
    dicts: &DictionarySet,
    state: &mut LatentState,
    cache: &mut ResidualCache,
    svm: Option<&SvmCoupling<'_>>,
    rng: &mut R,
) -> Result<()> {
    let top = spec.top();
    let g = spec.geometry(top);
    let responses = top_responses(spec, dicts, state);
    let mut scores: Vec<f64> = match svm {
        Some(c) => {
            let f = state.features();
            c.betas.iter().map(|b| crate::svm::dot(b, &f)).collect()
        }
        None => Vec::new(),
    };
    let lambdas = state.lambdas.clone();
    let plane = g.s_h * g.s_w;
    for k in 0..spec.layers[top].dicts {
        let theta = state.theta[top][k].clone();
        for i in 0..g.s_h {
            for j in 0..g.s_w {
                let feature = k * plane + i * g.s_w + j;
                let site = TopSite {
                    response: &responses[feature],
                    feature,
                    gamma_e: state.gamma_e,
                    gamma_s: state.gamma_s[k],
                };
                let mut w = state.top_w.get(i, j, k);
                let mut on = state.z[top][k].category(i, j) != 0;
                sample_top_site(
                    &site,
                    &theta,
                    &mut w,
                    &mut on,
                    cache,
                    svm.map(|c| (c, lambdas.as_slice())),
                    &mut scores,
                    rng,
                )?;
                state.top_w.set(i, j, k, w);
                state.z[top][k].set_category(i, j, on as usize);
            }
        }
    }
    Ok(())
}

/// Resamples every dictionary pixel, bottom layer first, given the images'
/// current latent states. Residual caches are updated in place.
pub fn sample_dictionaries<R: Rng + ?Sized>(
    spec: &NetworkSpec,
    dicts: &mut DictionarySet,
    states: &[LatentState],
    caches: &mut [ResidualCache],
    rng: &mut R,
) -> Result<()> {
    let acts: Vec<_> = states.iter().map(|s| decode(spec, dicts, s)).collect();
    for l in 0..spec.num_layers() {
        let images: Vec<PixelImage<'_>> = states
            .iter()
            .zip(&acts)
            .map(|(st, a)| PixelImage {
                s: &a.s[l],
                z: &st.z,
                gamma_e: st.gamma_e,
            })
            .collect();
        let ls = spec.layers[l];
        let bands = spec.geometry(l).in_bands;
        for k in 0..ls.dicts {
            for b in 0..bands {
                for p in 0..ls.dict_h {
                    for q in 0..ls.dict_w {
                        sample_dictionary_pixel(spec, dicts, &images, caches, l, k, b, p, q, rng)?;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Whether [`gibbs_sweep`] also samples the global parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepMode {
    /// Latent variables only, globals frozen.
    Local,
    /// Dictionaries and SVM weights as well (small-data regime).
    Full,
}

/// One sweep over a batch of images. In [`SweepMode::Full`] the dictionaries
/// are resampled first (single writer), then each image's latent variables
/// are swept in parallel against that frozen snapshot, and finally the SVM
/// weights are refreshed from the new features and scales.
///
/// Randomness comes from streams derived from `(seed, iteration, image)`, so
/// the result does not depend on the number of worker threads.
#[allow(clippy::too_many_arguments)]
pub fn gibbs_sweep(
    spec: &NetworkSpec,
    images: &[Tensor3],
    labels: Option<&[usize]>,
    dicts: &mut DictionarySet,
    svm: Option<&mut SvmState>,
    states: &mut [LatentState],
    mode: SweepMode,
    seed: u64,
    iteration: u64,
) -> Result<()> {
    if images.len() != states.len() {
        return Err(Error::shape("one latent state per image is required"));
    }
    if let Some(l) = labels {
        if l.len() != images.len() {
            return Err(Error::shape("one label per image is required"));
        }
    }
    if mode == SweepMode::Full {
        let mut caches = images
            .iter()
            .zip(states.iter())
            .map(|(img, st)| ResidualCache::from_state(spec, dicts, img, st, None))
            .collect::<Result<Vec<_>>>()?;
        let mut rng = RngStream::derive(seed, purpose::DICTIONARY, iteration, 0);
        sample_dictionaries(spec, dicts, states, &mut caches, &mut rng)?;
    }
    let frozen: &DictionarySet = dicts;
    let svm_view = svm.as_deref();
    let opts = SweepOptions::default();
    states
        .par_iter_mut()
        .zip(images.par_iter())
        .enumerate()
        .map(|(n, (st, img))| {
            let mut rng = RngStream::derive(seed, purpose::LOCAL, iteration, n as u64);
            let coupling = match (svm_view, labels) {
                (Some(s), Some(l)) => Some(SvmCoupling {
                    betas: &s.betas,
                    gamma: s.gamma,
                    label: l[n],
                }),
                _ => None,
            };
            local_sweep(spec, frozen, img, st, None, coupling, &opts, &mut rng).map(|_| ())
        })
        .collect::<Result<Vec<()>>>()?;
    if mode == SweepMode::Full {
        if let (Some(s), Some(l)) = (svm, labels) {
            refresh_betas(s, states, l)?;
        }
    }
    Ok(())
}

/// Closed-form weight update for every class from the states' current
/// features and scales.
pub fn refresh_betas(svm: &mut SvmState, states: &[LatentState], labels: &[usize]) -> Result<()> {
    let feats: Vec<Vec<f64>> = states.iter().map(|s| s.features()).collect();
    let classes = svm.classes();
    let gamma = svm.gamma;
    let floor = svm.beta_floor;
    let new: Vec<Vec<f64>> = (0..classes)
        .into_par_iter()
        .map(|cls| {
            let ys: Vec<f64> = labels.iter().map(|&l| target(l, cls)).collect();
            let lams: Vec<f64> = states.iter().map(|s| s.lambdas[cls]).collect();
            let om = omega_inverse(&svm.betas[cls], floor);
            update_beta(&feats, &ys, &lams, &om, gamma)
        })
        .collect::<Result<_>>()?;
    svm.betas = new;
    Ok(())
}
