//! The Monte Carlo EM objective and its dictionary gradient.
//!
//! For samples `s = 1..N_s` of each image's latent variables,
//!
//! ```text
//! Q(D) = -1/N_s sum_s sum_n [ gamma_e/2 ||E_ns||^2
//!                             + sum_l gamma (1 + lambda - y beta's)^2 / (2 lambda) ]
//!        - 1/2 ||D||^2
//! ```
//!
//! up to terms that do not depend on the globals. The gradient with respect
//! to the dictionaries runs the residual backwards through the layers:
//! `delta_0 = gamma_e E` on the image, and
//! `delta_{l+1}[k] = unpool_adjoint(sum_b delta_l[b] (x) D_l[k][b], Z_l[k])`,
//! so that `dQ/dD_l[k][b] = sum_n delta_l[b] (x) S_l[k] - D_l[k][b]`, where
//! `(x)` is valid correlation.

use crate::error::{Error, Result};
use crate::gibbs::ResidualCache;
use crate::model::{decode, Activations, DictionarySet, LatentState, NetworkSpec};
use crate::svm::{dot, target, SvmState};
use crate::tensor::{dot_patch, Tensor3};

/// The Monte Carlo samples drawn for one image.
#[derive(Debug, Clone, Copy)]
pub struct SampleSet<'a> {
    pub image: &'a Tensor3,
    pub label: Option<usize>,
    pub samples: &'a [LatentState],
    pub weights: Option<&'a [f64]>,
}

/// Likelihood and SVM part of the objective for one sample, i.e. the
/// bracketed term above (without the leading minus).
pub fn sample_energy(
    spec: &NetworkSpec,
    dicts: &DictionarySet,
    svm: Option<&SvmState>,
    image: &Tensor3,
    label: Option<usize>,
    state: &LatentState,
    weights: Option<&[f64]>,
) -> Result<f64> {
    let cache = ResidualCache::from_state(spec, dicts, image, state, weights.map(|w| w.to_vec()))?;
    let mut e = 0.5 * state.gamma_e * cache.norm_sq();
    if let (Some(svm), Some(label)) = (svm, label) {
        let f = state.features();
        for (cls, beta) in svm.betas.iter().enumerate() {
            let lam = state.lambdas[cls];
            if !(lam > 0.0) {
                return Err(Error::param(format!("lambda must be positive, got {lam}")));
            }
            let r = 1.0 + lam - target(label, cls) * dot(beta, &f);
            e += svm.gamma * r * r / (2.0 * lam);
        }
    }
    Ok(e)
}

/// `Q` over a set of images, constant terms dropped.
pub fn qbar(
    spec: &NetworkSpec,
    dicts: &DictionarySet,
    svm: Option<&SvmState>,
    sets: &[SampleSet<'_>],
) -> Result<f64> {
    let mut total = 0.0;
    for set in sets {
        if set.samples.is_empty() {
            return Err(Error::Empty("image without samples".into()));
        }
        let mut acc = 0.0;
        for st in set.samples {
            acc += sample_energy(spec, dicts, svm, set.image, set.label, st, set.weights)?;
        }
        total += acc / set.samples.len() as f64;
    }
    Ok(-total - 0.5 * dicts.norm_sq())
}

/// Error terms `delta_l` on the input grid of every layer, for one sample
/// whose residual is `residual`.
pub fn backprop_delta(
    spec: &NetworkSpec,
    dicts: &DictionarySet,
    state: &LatentState,
    residual: &Tensor3,
    weights: Option<&[f64]>,
) -> Result<Vec<Tensor3>> {
    if residual.dims() != (spec.input_height, spec.input_width, spec.channels) {
        return Err(Error::shape("residual does not match the image dims"));
    }
    let mut d0 = residual.clone();
    d0.scale(state.gamma_e);
    if let Some(w) = weights {
        if w.len() != d0.len() {
            return Err(Error::shape("mask does not match the image"));
        }
        d0.data_mut().iter_mut().zip(w).for_each(|(v, w)| *v *= w);
    }
    let mut deltas = vec![d0];
    for l in 0..spec.top() {
        let g = spec.geometry(l);
        let below = &deltas[l];
        let mut up = Tensor3::zeros(g.out_h, g.out_w, spec.layers[l].dicts);
        for k in 0..spec.layers[l].dicts {
            let d = dicts.get(l, k);
            let grid = &state.z[l][k];
            for i in 0..grid.blocks_y() {
                for j in 0..grid.blocks_x() {
                    if let Some((y, x)) = grid.active(i, j) {
                        let v: f64 = (0..g.in_bands)
                            .map(|b| {
                                dot_patch(
                                    below.band(b),
                                    g.in_w,
                                    y,
                                    x,
                                    d.band(b),
                                    d.height(),
                                    d.width(),
                                )
                            })
                            .sum();
                        up.set(i, j, k, v);
                    }
                }
            }
        }
        deltas.push(up);
    }
    Ok(deltas)
}

/// `out[l][k][b] += scale * delta_l[b] (x) S_l[k]`, skipping zero activations.
pub fn accumulate_likelihood_grad(
    spec: &NetworkSpec,
    deltas: &[Tensor3],
    acts: &Activations,
    scale: f64,
    out: &mut DictionarySet,
) {
    for l in 0..spec.num_layers() {
        let g = spec.geometry(l);
        let s = &acts.s[l];
        let delta = &deltas[l];
        for k in 0..spec.layers[l].dicts {
            let plane = s.band(k);
            let gk = out.get_mut(l, k);
            let (dh, dw) = (gk.height(), gk.width());
            for y in 0..g.s_h {
                for x in 0..g.s_w {
                    let sv = plane[y * g.s_w + x];
                    if sv == 0.0 {
                        continue;
                    }
                    let sv = sv * scale;
                    for b in 0..g.in_bands {
                        let db = delta.band(b);
                        let ob = gk.band_mut(b);
                        for p in 0..dh {
                            let row = &db[(y + p) * g.in_w + x..(y + p) * g.in_w + x + dw];
                            for (o, d) in ob[p * dw..(p + 1) * dw].iter_mut().zip(row) {
                                *o += sv * d;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of `Q` with respect to all dictionaries:
/// `scale * sum_i delta_i (x) S_i - D`, over the `(deltas, activations)`
/// pairs of the contributing samples.
pub fn grad_dictionary(
    spec: &NetworkSpec,
    dicts: &DictionarySet,
    contributions: &[(Vec<Tensor3>, Activations)],
    scale: f64,
) -> DictionarySet {
    let mut g = DictionarySet::zeros(spec);
    for (deltas, acts) in contributions {
        accumulate_likelihood_grad(spec, deltas, acts, scale, &mut g);
    }
    for (gt, d) in g.iter_mut().zip(dicts.iter()) {
        gt.add_scaled(-1.0, d);
    }
    g
}

/// Gradient of [`qbar`] with respect to the dictionaries for the given
/// sample sets.
pub fn qbar_gradient(
    spec: &NetworkSpec,
    dicts: &DictionarySet,
    sets: &[SampleSet<'_>],
) -> Result<DictionarySet> {
    let mut g = DictionarySet::zeros(spec);
    for set in sets {
        let w = 1.0 / set.samples.len() as f64;
        for st in set.samples {
            let acts = decode(spec, dicts, st);
            let cache =
                ResidualCache::from_activations(set.image, &acts, set.weights.map(|w| w.to_vec()))?;
            let deltas = backprop_delta(spec, dicts, st, cache.residual(), set.weights)?;
            accumulate_likelihood_grad(spec, &deltas, &acts, w, &mut g);
        }
    }
    for (gt, d) in g.iter_mut().zip(dicts.iter()) {
        gt.add_scaled(-1.0, d);
    }
    Ok(g)
}
