//! Test-time inference of the top-layer features.
//!
//! With the dictionaries fixed, the top-layer weights and spikes of a new
//! image are treated as parameters and fitted by MCEM: each iteration
//! Gibbs-samples the lower-layer indicators and the precisions, then, band by
//! band, hard-thresholds the spikes and takes one RMSprop ascent step on the
//! weights.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use super::rmsprop::{rmsprop_step, RmspropState};
use crate::distributions::RngStream;
use crate::error::{Error, Result};
use crate::gibbs::{local_sweep, purpose, top_responses, ResidualCache, SweepOptions};
use crate::io::Checkpoint;
use crate::model::{DictionarySet, LatentState, NetworkSpec};
use crate::svm::{argmax, SvmState};
use crate::tensor::{correlate_valid_acc, Tensor3};

/// Test-time inference settings.
#[derive(Debug, Clone, PartialEq)]
pub struct InferConfig {
    /// Iteration budget.
    pub iterations: usize,
    /// Stop early once the relative change of the objective falls below this.
    pub tol: f64,
    pub learning_rate: f64,
    pub rmsprop_decay: f64,
    /// Gibbs sweeps over the lower layers per iteration.
    pub sweeps: usize,
    pub seed: u64,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            iterations: 50,
            tol: 1e-5,
            learning_rate: 0.05,
            rmsprop_decay: 0.95,
            sweeps: 1,
            seed: 0,
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.sweeps == 0 {
            return Err(Error::param("iterations and sweeps must be positive"));
        }
        if !(self.learning_rate > 0.0) || !(self.tol >= 0.0) {
            return Err(Error::param(
                "learning_rate must be positive and tol non-negative",
            ));
        }
        if !(0.0..1.0).contains(&self.rmsprop_decay) {
            return Err(Error::param("rmsprop_decay must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Outcome of [`infer_features`].
#[derive(Debug, Clone)]
pub struct Inferred {
    /// Top-layer activations, band-major, followed by a constant 1.
    pub features: Vec<f64>,
    pub state: LatentState,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Log joint of the fitted quantities, constants dropped:
///
/// ```text
/// N/2 ln gamma_e - gamma_e/2 ||E||^2_M
///   + sum_k [ P/2 ln gamma_s[k] - gamma_s[k]/2 ||W_k||^2 + sum_p ln theta_k[Z_kp] ]
///   + Gamma log-priors of the precisions
/// ```
///
/// with `N` the observed pixel count and `P` the sites per top band.
pub fn inference_objective(
    spec: &NetworkSpec,
    dicts: &DictionarySet,
    image: &Tensor3,
    state: &LatentState,
    weights: Option<&[f64]>,
) -> Result<f64> {
    let cache = ResidualCache::from_state(spec, dicts, image, state, weights.map(|w| w.to_vec()))?;
    Ok(objective_from(spec, state, &cache))
}

fn objective_from(spec: &NetworkSpec, state: &LatentState, cache: &ResidualCache) -> f64 {
    let h = &spec.hyper;
    let gamma_log_prior = |g: f64, a: f64, b: f64| (a - 1.0) * g.ln() - b * g;
    let top = spec.top();
    let mut total = 0.5 * cache.n_obs() * state.gamma_e.ln()
        - 0.5 * state.gamma_e * cache.norm_sq()
        + gamma_log_prior(state.gamma_e, h.a_e, h.b_e);
    for (k, &gs) in state.gamma_s.iter().enumerate() {
        let w = state.top_w.band(k);
        let grid = &state.z[top][k];
        let theta = &state.theta[top][k];
        let spikes: f64 = (0..grid.blocks_y())
            .flat_map(|i| (0..grid.blocks_x()).map(move |j| (i, j)))
            .map(|(i, j)| theta[grid.category(i, j)].ln())
            .sum();
        total += 0.5 * w.len() as f64 * gs.ln() - 0.5 * gs * w.iter().map(|v| v * v).sum::<f64>()
            + spikes
            + gamma_log_prior(gs, h.a_s, h.b_s);
    }
    total
}

/// Valid correlation of every band of `input` with the matching band of `d`,
/// summed over bands.
fn correlate_bands(input: &Tensor3, d: &Tensor3) -> Tensor3 {
    let (oh, ow) = (
        input.height() - d.height() + 1,
        input.width() - d.width() + 1,
    );
    let mut out = Tensor3::zeros(oh, ow, 1);
    for b in 0..input.bands() {
        correlate_valid_acc(
            out.data_mut(),
            input.band(b),
            input.height(),
            input.width(),
            d.band(b),
            d.height(),
            d.width(),
            1.0,
        );
    }
    out
}

/// Starting point for inference. Lower indicators are chosen bottom-up by
/// the best normalised match within each pooling block; the top spikes are
/// all on and the top weights are the ridge fit given those indicators.
/// Masked pixels (`weights` = 0) are ignored throughout.
pub fn initial_state(
    spec: &NetworkSpec,
    dicts: &DictionarySet,
    image: &Tensor3,
    weights: Option<&[f64]>,
) -> LatentState {
    let mut st = LatentState::new(spec);
    let mut input = image.clone();
    if let Some(w) = weights {
        input
            .data_mut()
            .iter_mut()
            .zip(w)
            .for_each(|(x, w)| *x *= w);
    }
    let observed = weights.map_or(image.len() as f64, |w| w.iter().sum::<f64>());
    st.gamma_e = (observed / input.norm_sq().max(1e-12)).clamp(1e-2, 1e6);
    for l in 0..spec.top() {
        let g = spec.geometry(l);
        let mut next = Tensor3::zeros(g.out_h, g.out_w, spec.layers[l].dicts);
        for k in 0..spec.layers[l].dicts {
            let d = dicts.get(l, k);
            let nd = d.norm_sq().max(f64::MIN_POSITIVE);
            let c = correlate_bands(&input, d);
            let grid = &mut st.z[l][k];
            let (py, px) = (grid.pool_y(), grid.pool_x());
            for i in 0..grid.blocks_y() {
                for j in 0..grid.blocks_x() {
                    let mut best = (0usize, f64::NEG_INFINITY, 0.0);
                    for a in 0..py {
                        for b in 0..px {
                            let v = c.get(i * py + a, j * px + b, 0);
                            if v.abs() > best.1 {
                                best = (a * px + b, v.abs(), v / nd);
                            }
                        }
                    }
                    grid.set_category(i, j, best.0 + 1);
                    next.set(i, j, k, best.2);
                }
            }
        }
        input = next;
    }
    let top = spec.top();
    for k in 0..spec.layers[top].dicts {
        let d = dicts.get(top, k);
        let nd = d.norm_sq().max(f64::MIN_POSITIVE);
        let c = correlate_bands(&input, d);
        let grid = &mut st.z[top][k];
        for i in 0..grid.blocks_y() {
            for j in 0..grid.blocks_x() {
                grid.set_category(i, j, 1);
                st.top_w.set(i, j, k, c.get(i, j, 0) / nd);
            }
        }
    }
    if let Some(w) = ridge_top_weights(spec, dicts, image, weights, &st) {
        st.top_w.data_mut().copy_from_slice(&w);
    }
    st
}

/// Solves `(gamma_e R'MR + diag(gamma_s)) w = gamma_e R'Mx` for the top
/// weights with every spike on, where `R` holds the pixel responses of the
/// top sites and `M` the pixel mask. `None` if the system is not positive
/// definite.
fn ridge_top_weights(
    spec: &NetworkSpec,
    dicts: &DictionarySet,
    image: &Tensor3,
    weights: Option<&[f64]>,
    st: &LatentState,
) -> Option<Vec<f64>> {
    let plane = {
        let g = spec.geometry(spec.top());
        g.s_h * g.s_w
    };
    let mut responses = top_responses(spec, dicts, st);
    if let Some(w) = weights {
        // rows scaled by sqrt(M) so plain dot products carry the mask
        for r in responses.iter_mut() {
            r.data_mut()
                .iter_mut()
                .zip(w)
                .for_each(|(x, w)| *x *= w.sqrt());
        }
    }
    let n = responses.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut gram = DMatrix::zeros(n, n);
    let mut rhs = DVector::zeros(n);
    for f in 0..n {
        let rf = responses[f].data();
        for g in 0..=f {
            let v = st.gamma_e * dot(rf, responses[g].data());
            gram[(f, g)] = v;
            gram[(g, f)] = v;
        }
        gram[(f, f)] += st.gamma_s[f / plane];
        rhs[f] = st.gamma_e
            * match weights {
                None => dot(rf, image.data()),
                Some(w) => rf
                    .iter()
                    .zip(image.data())
                    .zip(w)
                    .map(|((r, x), w)| r * x * w.sqrt())
                    .sum(),
            };
    }
    let sol = gram.cholesky()?.solve(&rhs);
    sol.iter()
        .all(|v| v.is_finite())
        .then(|| sol.iter().copied().collect())
}

/// Hard spike update: on iff `theta[1] L_on > theta[0] L_off`, compared in
/// log space.
pub fn update_z(theta: &[f64], log_lik_on: f64, log_lik_off: f64) -> bool {
    theta[1].ln() + log_lik_on > theta[0].ln() + log_lik_off
}

/// MAP fit of the top-layer weights and spikes of one image, with the
/// lower-layer indicators and the precisions sampled. `weights` masks the
/// likelihood (1 = observed pixel). Without convergence the best iterate
/// seen is returned.
pub fn infer_features<R: Rng + ?Sized>(
    spec: &NetworkSpec,
    dicts: &DictionarySet,
    image: &Tensor3,
    weights: Option<&[f64]>,
    cfg: &InferConfig,
    rng: &mut R,
) -> Result<Inferred> {
    cfg.validate()?;
    if image.dims() != (spec.input_height, spec.input_width, spec.channels) {
        return Err(Error::shape("image does not match the architecture"));
    }
    let top = spec.top();
    let g = spec.geometry(top);
    let plane = g.s_h * g.s_w;
    let mut state = initial_state(spec, dicts, image, weights);
    let kt = spec.layers[top].dicts;
    let mut u: Vec<RmspropState> = (0..kt)
        .map(|_| RmspropState::new(plane, cfg.rmsprop_decay, cfg.learning_rate))
        .collect();
    let opts = SweepOptions {
        top: false,
        lambda: false,
        ..SweepOptions::default()
    };
    let mut prev = f64::NAN;
    let mut objective = f64::NAN;
    let mut converged = false;
    let mut done = 0;
    let mut best = (f64::NEG_INFINITY, state.clone());

    for it in 0..cfg.iterations {
        // E-step on the lower layers and the precisions.
        let mut cache = None;
        for _ in 0..cfg.sweeps {
            cache = Some(local_sweep(
                spec, dicts, image, &mut state, weights, None, &opts, rng,
            )?);
        }
        let mut cache = cache.expect("at least one sweep");

        // M-step, band by band: spikes by hard threshold, then one RMSprop
        // step on the weights along the spike-masked gradient.
        let responses = top_responses(spec, dicts, &state);
        let norms: Vec<f64> = responses.iter().map(|r| cache.wnorm_sq(r.data())).collect();
        for k in 0..kt {
            let theta = state.theta[top][k].clone();
            let mut on = vec![false; plane];
            for (p, on_p) in on.iter_mut().enumerate() {
                let f = k * plane + p;
                let (i, j) = (p / g.s_w, p % g.s_w);
                let w = state.top_w.get(i, j, k);
                let r = &responses[f];
                if state.z[top][k].category(i, j) != 0 {
                    cache.add(w, r);
                }
                let log_eta = state.gamma_e * (w * cache.dot_residual(r) - 0.5 * w * w * norms[f]);
                *on_p = update_z(&theta, log_eta, 0.0);
                if *on_p {
                    cache.add(-w, r);
                }
                state.z[top][k].set_category(i, j, *on_p as usize);
            }
            let old: Vec<f64> = state.top_w.band(k).to_vec();
            let grad: Vec<f64> = (0..plane)
                .map(|p| {
                    let lik = if on[p] {
                        cache.dot_residual(&responses[k * plane + p])
                    } else {
                        0.0
                    };
                    state.gamma_e * lik - state.gamma_s[k] * old[p]
                })
                .collect();
            let mut w = old.clone();
            rmsprop_step(&mut w, &grad, &mut u[k]);
            for p in 0..plane {
                if on[p] {
                    cache.add(-(w[p] - old[p]), &responses[k * plane + p]);
                }
            }
            state.top_w.band_mut(k).copy_from_slice(&w);
        }
        objective = objective_from(spec, &state, &cache);
        done = it + 1;
        if !objective.is_finite() {
            return Err(Error::Divergence {
                iteration: it as u64,
                msg: format!("inference objective is {objective}"),
            });
        }
        if !(objective <= best.0) {
            best = (objective, state.clone());
        }
        if prev.is_finite()
            && ((objective - prev) / prev.abs().max(f64::MIN_POSITIVE)).abs() < cfg.tol
        {
            converged = true;
            break;
        }
        prev = objective;
    }
    if !converged {
        warn!(
            "inference stopped after {done} iterations without reaching tol {}",
            cfg.tol
        );
        (objective, state) = best;
    }
    Ok(Inferred {
        features: state.features(),
        state,
        objective,
        iterations: done,
        converged,
    })
}

/// Features of many images in parallel; image `n` uses its own stream
/// derived from `cfg.seed` and `n`.
pub fn infer_dataset(
    spec: &NetworkSpec,
    dicts: &DictionarySet,
    images: &[Tensor3],
    cfg: &InferConfig,
) -> Result<Vec<Vec<f64>>> {
    images
        .par_iter()
        .enumerate()
        .map(|(n, im)| {
            let mut rng = RngStream::derive(cfg.seed, purpose::INFERENCE, n as u64, 0);
            infer_features(spec, dicts, im, None, cfg, &mut rng).map(|r| r.features)
        })
        .collect()
}

/// Label and per-class decision values for one image. `id` selects the
/// image's random stream, so repeated calls are reproducible.
pub fn classify(
    ck: &Checkpoint,
    image: &Tensor3,
    cfg: &InferConfig,
    id: u64,
) -> Result<(usize, Vec<f64>)> {
    let svm = ck
        .svm
        .as_ref()
        .ok_or_else(|| Error::param("checkpoint has no classifier"))?;
    let mut rng = RngStream::derive(cfg.seed, purpose::INFERENCE, id, 0);
    let inf = infer_features(&ck.spec, &ck.dicts, image, None, cfg, &mut rng)?;
    let scores = svm.scores(&inf.features);
    Ok((argmax(&scores), scores))
}

/// Averages decision values class by class and returns the argmax (lowest
/// index on ties) together with the averages.
pub fn average_decisions(decisions: &[Vec<f64>]) -> Result<(usize, Vec<f64>)> {
    let first = decisions
        .first()
        .ok_or_else(|| Error::Empty("no decision values".into()))?;
    let mut avg = vec![0.0; first.len()];
    for d in decisions {
        if d.len() != avg.len() {
            return Err(Error::shape("decision vectors differ in length"));
        }
        for (a, v) in avg.iter_mut().zip(d) {
            *a += v;
        }
    }
    avg.iter_mut().for_each(|a| *a /= decisions.len() as f64);
    Ok((argmax(&avg), avg))
}

/// Classification by averaging the decision values of several checkpoints.
pub fn model_average(
    checkpoints: &[Checkpoint],
    image: &Tensor3,
    cfg: &InferConfig,
    id: u64,
) -> Result<(usize, Vec<f64>)> {
    if checkpoints.is_empty() {
        return Err(Error::Empty(
            "model averaging needs at least one checkpoint".into(),
        ));
    }
    let decisions = checkpoints
        .iter()
        .map(|ck| classify(ck, image, cfg, id).map(|(_, s)| s))
        .collect::<Result<Vec<_>>>()?;
    average_decisions(&decisions)
}

/// Decision values of `svm` for each feature vector.
pub fn decisions(svm: &SvmState, features: &[Vec<f64>]) -> Vec<Vec<f64>> {
    features.iter().map(|f| svm.scores(f)).collect()
}
