//! Layer-wise unsupervised pretraining.
//!
//! Each layer is fitted on its own as a single-layer convolutional model
//! `X = sum_k D_k * (Z_k . W_k) + E` with Gaussian slabs `W`, stochastic
//! unpooling indicators `Z` and per-image precisions, starting from the
//! images and feeding the pooled activations of one layer to the next.

use log::info;
use rand::Rng;
use rayon::prelude::*;

use crate::distributions::{
    sample_gamma, sample_gaussian, sample_log_categorical, standard_normal, RngStream,
};
use crate::error::{Error, Result};
use crate::gibbs::{purpose, sample_theta};
use crate::model::{DictionarySet, Hyperparams, LatentState, LayerSpec, NetworkSpec};
use crate::tensor::{add_patch, dot_patch, IndicatorGrid, Tensor3};

/// Sampling protocol for pretraining.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub burn_in: usize,
    /// Sweeps whose dictionaries are averaged into the result.
    pub collection: usize,
    /// Use only the first `images` training images (0: all).
    pub images: usize,
    /// Drop elements whose mean block activation falls below this (0 keeps all).
    pub prune_threshold: f64,
    pub seed: u64,
    /// Scale of the initial prior draw of the dictionaries.
    pub init_scale: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            burn_in: 1000,
            collection: 500,
            images: 0,
            prune_threshold: 0.01,
            seed: 0,
            init_scale: 0.1,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.collection == 0 {
            return Err(Error::param("collection must be positive"));
        }
        if !(0.0..1.0).contains(&self.prune_threshold) {
            return Err(Error::param("prune_threshold must lie in [0, 1)"));
        }
        if !(self.init_scale > 0.0) {
            return Err(Error::param("init_scale must be positive"));
        }
        Ok(())
    }
}

/// Latent variables of one image in a single-layer model.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainLayerState {
    /// Slab weights at every position, `s_h x s_w x K`. Only positions
    /// selected by `z` contribute to the image.
    pub w: Tensor3,
    pub z: Vec<IndicatorGrid>,
    pub theta: Vec<Vec<f64>>,
    pub gamma_w: Vec<f64>,
    pub gamma_e: f64,
    /// `X - sum_k D_k * S_k`.
    pub residual: Tensor3,
}

impl PretrainLayerState {
    pub fn new(input: &Tensor3, layer: &LayerSpec) -> Self {
        let (h, w, _) = input.dims();
        let (s_h, s_w) = (h - layer.dict_h + 1, w - layer.dict_w + 1);
        let grid = IndicatorGrid::new(
            s_h / layer.pool_y,
            s_w / layer.pool_x,
            layer.pool_y,
            layer.pool_x,
        );
        let cats = layer.pool_len() + 1;
        PretrainLayerState {
            w: Tensor3::zeros(s_h, s_w, layer.dicts),
            z: vec![grid; layer.dicts],
            theta: vec![vec![1.0 / cats as f64; cats]; layer.dicts],
            gamma_w: vec![1.0; layer.dicts],
            gamma_e: (input.len() as f64 / input.norm_sq().max(1e-12)).clamp(1e-2, 1e6),
            residual: input.clone(),
        }
    }

    /// `S = Z . W`.
    pub fn activations(&self) -> Tensor3 {
        let mut s = Tensor3::zeros(self.w.height(), self.w.width(), self.w.bands());
        for (k, grid) in self.z.iter().enumerate() {
            for i in 0..grid.blocks_y() {
                for j in 0..grid.blocks_x() {
                    if let Some((y, x)) = grid.active(i, j) {
                        s.set(y, x, k, self.w.get(y, x, k));
                    }
                }
            }
        }
        s
    }

    /// Pooled layer output: the active weight of each block, 0 if off.
    pub fn pooled(&self) -> Tensor3 {
        let g = &self.z[0];
        let mut out = Tensor3::zeros(g.blocks_y(), g.blocks_x(), self.z.len());
        for (k, grid) in self.z.iter().enumerate() {
            for i in 0..grid.blocks_y() {
                for j in 0..grid.blocks_x() {
                    if let Some((y, x)) = grid.active(i, j) {
                        out.set(i, j, k, self.w.get(y, x, k));
                    }
                }
            }
        }
        out
    }

    /// Recomputes the residual from scratch.
    pub fn refresh_residual(&mut self, input: &Tensor3, dicts: &[Tensor3]) {
        self.residual = input.clone();
        for (k, grid) in self.z.iter().enumerate() {
            let d = &dicts[k];
            for i in 0..grid.blocks_y() {
                for j in 0..grid.blocks_x() {
                    if let Some((y, x)) = grid.active(i, j) {
                        place(&mut self.residual, d, y, x, -self.w.get(y, x, k));
                    }
                }
            }
        }
    }
}

fn place(out: &mut Tensor3, d: &Tensor3, y: usize, x: usize, v: f64) {
    let w = out.width();
    for b in 0..d.bands() {
        add_patch(
            out.band_mut(b),
            w,
            y,
            x,
            d.band(b),
            d.height(),
            d.width(),
            v,
        );
    }
}

fn patch_dot(e: &Tensor3, d: &Tensor3, y: usize, x: usize) -> f64 {
    (0..d.bands())
        .map(|b| dot_patch(e.band(b), e.width(), y, x, d.band(b), d.height(), d.width()))
        .sum()
}

/// Unnormalised log-probabilities of the categories of block `(i, j)` of
/// element `k` with its weight integrated out, given everything else.
/// Category 0 is off; `m >= 1` activates block position `m - 1`.
pub fn block_log_weights(
    st: &PretrainLayerState,
    dicts: &[Tensor3],
    k: usize,
    i: usize,
    j: usize,
) -> Vec<f64> {
    let grid = &st.z[k];
    let d = &dicts[k];
    let theta = &st.theta[k];
    let gw = st.gamma_w[k];
    let prec = st.gamma_e * d.norm_sq() + gw;
    let mut a = st.residual.clone();
    if let Some((y, x)) = grid.active(i, j) {
        place(&mut a, d, y, x, st.w.get(y, x, k));
    }
    let mut logw = Vec::with_capacity(grid.num_categories());
    logw.push(theta[0].ln());
    for m in 1..grid.num_categories() {
        let (y, x) = grid.position(i, j, m).expect("active category");
        let h = st.gamma_e * patch_dot(&a, d, y, x);
        logw.push(theta[m].ln() + 0.5 * (gw / prec).ln() + h * h / (2.0 * prec));
    }
    logw
}

/// One sweep over the local variables of one image with the dictionaries
/// fixed: blocks (indicator and weight jointly), the inactive weights, the
/// block probabilities, the slab precisions and the noise precision.
pub fn sweep_layer_state<R: Rng + ?Sized>(
    st: &mut PretrainLayerState,
    dicts: &[Tensor3],
    hyper: &Hyperparams,
    rng: &mut R,
) -> Result<()> {
    let kn = dicts.len();
    for k in 0..kn {
        let d = &dicts[k];
        let dn = d.norm_sq();
        let (by, bx) = (st.z[k].blocks_y(), st.z[k].blocks_x());
        let cats = st.z[k].num_categories();
        let mut logw = vec![0.0; cats];
        let mut hs = vec![0.0; cats];
        for i in 0..by {
            for j in 0..bx {
                let gw = st.gamma_w[k];
                let prec = st.gamma_e * dn + gw;
                if let Some((y, x)) = st.z[k].active(i, j) {
                    let wv = st.w.get(y, x, k);
                    place(&mut st.residual, d, y, x, wv);
                }
                let theta = &st.theta[k];
                logw[0] = theta[0].ln();
                for m in 1..cats {
                    let (y, x) = st.z[k].position(i, j, m).expect("active category");
                    let h = st.gamma_e * patch_dot(&st.residual, d, y, x);
                    hs[m] = h;
                    logw[m] = theta[m].ln() + 0.5 * (gw / prec).ln() + h * h / (2.0 * prec);
                }
                let m = sample_log_categorical(&logw, rng);
                st.z[k].set_category(i, j, m);
                let sd = 1.0 / gw.sqrt();
                for c in 1..cats {
                    let (y, x) = st.z[k].position(i, j, c).expect("active category");
                    let v = if c == m {
                        sample_gaussian(hs[m] / prec, 1.0 / prec, rng)?
                    } else {
                        sd * standard_normal(rng)
                    };
                    st.w.set(y, x, k, v);
                }
                if m > 0 {
                    let (y, x) = st.z[k].position(i, j, m).expect("active category");
                    place(&mut st.residual, d, y, x, -st.w.get(y, x, k));
                }
            }
        }
    }
    for k in 0..kn {
        st.theta[k] = sample_theta(&st.z[k], rng)?;
        let band = st.w.band(k);
        let ss: f64 = band.iter().map(|v| v * v).sum();
        st.gamma_w[k] = sample_gamma(
            hyper.a_w + 0.5 * band.len() as f64,
            hyper.b_w + 0.5 * ss,
            rng,
        )?;
    }
    let n = st.residual.len() as f64;
    st.gamma_e = sample_gamma(
        hyper.a_e + 0.5 * n,
        hyper.b_e + 0.5 * st.residual.norm_sq(),
        rng,
    )?;
    Ok(())
}

/// Mean and variance of the conditional of dictionary pixel `(k, b, p, q)`
/// given every image's state.
pub fn dictionary_pixel_conditional(
    states: &[PretrainLayerState],
    dicts: &[Tensor3],
    k: usize,
    b: usize,
    p: usize,
    q: usize,
) -> (f64, f64) {
    let d = dicts[k].get(p, q, b);
    let (num, prec) = states
        .par_chunks(16)
        .map(|chunk| {
            let mut num = 0.0;
            let mut prec = 0.0;
            for st in chunk {
                let (mut nn, mut pp) = (0.0, 0.0);
                let grid = &st.z[k];
                for i in 0..grid.blocks_y() {
                    for j in 0..grid.blocks_x() {
                        if let Some((y, x)) = grid.active(i, j) {
                            let s = st.w.get(y, x, k);
                            let e = st.residual.get(y + p, x + q, b);
                            nn += s * (e + d * s);
                            pp += s * s;
                        }
                    }
                }
                num += st.gamma_e * nn;
                prec += st.gamma_e * pp;
            }
            (num, prec)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold((0.0, 1.0), |(a, b), (x, y)| (a + x, b + y));
    (num / prec, 1.0 / prec)
}

fn sample_dictionaries<R: Rng + ?Sized>(
    states: &mut [PretrainLayerState],
    dicts: &mut [Tensor3],
    rng: &mut R,
) -> Result<()> {
    for k in 0..dicts.len() {
        let (dh, dw, bands) = dicts[k].dims();
        for b in 0..bands {
            for p in 0..dh {
                for q in 0..dw {
                    let (mean, var) = dictionary_pixel_conditional(states, dicts, k, b, p, q);
                    let new = sample_gaussian(mean, var, rng)?;
                    let delta = new - dicts[k].get(p, q, b);
                    dicts[k].set(p, q, b, new);
                    states.par_iter_mut().for_each(|st| {
                        let grid = &st.z[k];
                        for i in 0..grid.blocks_y() {
                            for j in 0..grid.blocks_x() {
                                if let Some((y, x)) = grid.active(i, j) {
                                    let s = st.w.get(y, x, k);
                                    let idx = st.residual.index(y + p, x + q, b);
                                    st.residual.data_mut()[idx] -= delta * s;
                                }
                            }
                        }
                    });
                }
            }
        }
    }
    Ok(())
}

/// Result of pretraining one layer.
#[derive(Debug, Clone)]
pub struct LayerFit {
    /// Mean of the dictionaries over the collection sweeps.
    pub dicts: Vec<Tensor3>,
    /// Final per-image states, consistent with `dicts`.
    pub states: Vec<PretrainLayerState>,
    /// Mean fraction of active blocks per element.
    pub usage: Vec<f64>,
}

impl LayerFit {
    pub fn pooled(&self) -> Vec<Tensor3> {
        self.states.iter().map(|s| s.pooled()).collect()
    }

    /// Keeps only the elements listed in `keep`, in that order.
    pub fn retain(&mut self, keep: &[usize], inputs: &[Tensor3]) {
        self.dicts = keep.iter().map(|&k| self.dicts[k].clone()).collect();
        self.usage = keep.iter().map(|&k| self.usage[k]).collect();
        for (st, x) in self.states.iter_mut().zip(inputs) {
            let (h, w, _) = st.w.dims();
            let mut nw = Tensor3::zeros(h, w, keep.len());
            for (nk, &k) in keep.iter().enumerate() {
                nw.band_mut(nk).copy_from_slice(st.w.band(k));
            }
            st.w = nw;
            st.z = keep.iter().map(|&k| st.z[k].clone()).collect();
            st.theta = keep.iter().map(|&k| st.theta[k].clone()).collect();
            st.gamma_w = keep.iter().map(|&k| st.gamma_w[k]).collect();
            st.refresh_residual(x, &self.dicts);
        }
    }
}

/// Gibbs sampling of a single-layer model: `burn_in` sweeps, then
/// `collection` sweeps whose dictionaries are averaged, then one final sweep
/// of the local variables against the averaged dictionaries.
pub fn pretrain_layer(
    inputs: &[Tensor3],
    layer: &LayerSpec,
    hyper: &Hyperparams,
    cfg: &PretrainConfig,
    layer_index: usize,
) -> Result<LayerFit> {
    cfg.validate()?;
    let first = inputs
        .first()
        .ok_or_else(|| Error::Empty("no pretraining inputs".into()))?;
    let (h, w, bands) = first.dims();
    if inputs.iter().any(|x| x.dims() != (h, w, bands)) {
        return Err(Error::shape("pretraining inputs differ in dims"));
    }
    if h < layer.dict_h || w < layer.dict_w {
        return Err(Error::shape("dictionary larger than the layer input"));
    }
    let (s_h, s_w) = (h - layer.dict_h + 1, w - layer.dict_w + 1);
    if s_h % layer.pool_y != 0 || s_w % layer.pool_x != 0 {
        return Err(Error::shape("pooling does not tile the activation map"));
    }
    if inputs.iter().any(|x| !x.is_finite()) {
        return Err(Error::param("pretraining inputs must be finite"));
    }
    let tag = (layer_index as u64) << 32;
    let mut rng = RngStream::derive(cfg.seed, purpose::PRETRAIN, tag, u64::MAX);
    let mut dicts: Vec<Tensor3> = (0..layer.dicts)
        .map(|_| {
            let mut d = Tensor3::zeros(layer.dict_h, layer.dict_w, bands);
            d.data_mut()
                .iter_mut()
                .for_each(|v| *v = cfg.init_scale * standard_normal(&mut rng));
            d
        })
        .collect();
    let mut states: Vec<PretrainLayerState> = inputs
        .iter()
        .map(|x| PretrainLayerState::new(x, layer))
        .collect();
    let mut mean: Vec<Tensor3> = dicts
        .iter()
        .map(|d| Tensor3::zeros(d.height(), d.width(), d.bands()))
        .collect();

    let total = cfg.burn_in + cfg.collection;
    for sweep in 0..=total {
        let a = tag | sweep as u64;
        states
            .par_iter_mut()
            .enumerate()
            .map(|(n, st)| {
                let mut r = RngStream::derive(cfg.seed, purpose::PRETRAIN, a, n as u64);
                sweep_layer_state(st, &dicts, hyper, &mut r)
            })
            .collect::<Result<Vec<()>>>()?;
        if sweep == total {
            break;
        }
        let mut r = RngStream::derive(cfg.seed, purpose::PRETRAIN, a, u64::MAX);
        sample_dictionaries(&mut states, &mut dicts, &mut r)?;
        if sweep >= cfg.burn_in {
            for (m, d) in mean.iter_mut().zip(&dicts) {
                m.add_scaled(1.0, d);
            }
        }
        if sweep % 50 == 0 {
            info!("pretrain layer {layer_index}: sweep {sweep}/{total}");
        }
        if sweep + 1 == total {
            // Continue against the averaged dictionaries.
            for m in mean.iter_mut() {
                m.scale(1.0 / cfg.collection as f64);
            }
            dicts = mean.clone();
            for (st, x) in states.iter_mut().zip(inputs) {
                st.refresh_residual(x, &dicts);
            }
        }
    }
    let usage = (0..layer.dicts)
        .map(|k| {
            states
                .iter()
                .map(|st| st.z[k].active_count() as f64 / st.z[k].num_blocks() as f64)
                .sum::<f64>()
                / states.len() as f64
        })
        .collect();
    Ok(LayerFit {
        dicts,
        states,
        usage,
    })
}

/// Indices of the elements whose usage reaches `threshold`; the most used
/// element is always kept.
pub fn prune_indices(usage: &[f64], threshold: f64) -> Vec<usize> {
    let keep: Vec<usize> = (0..usage.len())
        .filter(|&k| usage[k] >= threshold)
        .collect();
    if keep.is_empty() && !usage.is_empty() {
        let best = (0..usage.len())
            .max_by(|&a, &b| usage[a].total_cmp(&usage[b]).then(b.cmp(&a)))
            .expect("non-empty");
        return vec![best];
    }
    keep
}

/// Output of [`stack_pretrain`].
#[derive(Debug, Clone)]
pub struct Pretrained {
    /// The architecture with element counts reduced by pruning.
    pub spec: NetworkSpec,
    pub dicts: DictionarySet,
    /// One initial latent state per pretraining image.
    pub states: Vec<LatentState>,
    /// Mean activation of each kept element, per layer.
    pub usage: Vec<Vec<f64>>,
}

/// Pretrains every layer bottom-up on `images`, pruning rarely used
/// elements after each layer, and assembles the initial globals plus one
/// latent state per image.
pub fn stack_pretrain(
    images: &[Tensor3],
    spec: &NetworkSpec,
    cfg: &PretrainConfig,
) -> Result<Pretrained> {
    cfg.validate()?;
    let images = if cfg.images > 0 && cfg.images < images.len() {
        &images[..cfg.images]
    } else {
        images
    };
    if images.is_empty() {
        return Err(Error::Empty("no pretraining images".into()));
    }
    let mut layers = spec.layers.clone();
    let mut fits: Vec<LayerFit> = Vec::with_capacity(layers.len());
    let mut inputs: Vec<Tensor3> = images.to_vec();
    for l in 0..layers.len() {
        let mut fit = pretrain_layer(&inputs, &layers[l], &spec.hyper, cfg, l)?;
        if cfg.prune_threshold > 0.0 {
            let keep = prune_indices(&fit.usage, cfg.prune_threshold);
            if keep.len() < layers[l].dicts {
                info!(
                    "layer {l}: keeping {} of {} elements",
                    keep.len(),
                    layers[l].dicts
                );
                fit.retain(&keep, &inputs);
                layers[l].dicts = keep.len();
            }
        }
        inputs = fit.pooled();
        fits.push(fit);
    }
    let new_spec = NetworkSpec::new(
        spec.input_height,
        spec.input_width,
        spec.channels,
        spec.classes,
        layers,
        spec.hyper,
    )?;
    let dicts =
        DictionarySet::from_layers(&new_spec, fits.iter().map(|f| f.dicts.clone()).collect())?;
    let top = new_spec.top();
    let states = (0..images.len())
        .map(|n| {
            let mut st = LatentState::new(&new_spec);
            for (l, fit) in fits.iter().enumerate() {
                st.z[l] = fit.states[n].z.clone();
                st.theta[l] = fit.states[n].theta.clone();
            }
            let ts = &fits[top].states[n];
            st.top_w = ts.w.clone();
            st.gamma_s = ts.gamma_w.clone();
            st.gamma_e = fits[0].states[n].gamma_e;
            st
        })
        .collect();
    Ok(Pretrained {
        spec: new_spec,
        dicts,
        states,
        usage: fits.into_iter().map(|f| f.usage).collect(),
    })
}
