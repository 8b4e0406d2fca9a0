//! Top-down generative pass and the linear responses derived from it.
//!
//! Layer `l` (0-based) maps its feature maps `S_l` (`K_l` bands) to its input
//! grid `X_l` by `X_l[b] = sum_k S_l[k] (*) D_l[k][b]`. Below the top layer
//! `S_l[k] = unpool(X_{l+1}[k], Z_l[k])`. `X_0` is the noiseless image.

use rand::Rng;

use super::dicts::DictionarySet;
use super::spec::NetworkSpec;
use super::state::LatentState;
use crate::distributions::{sample_categorical, sample_gaussian, DEGENERATE_VARIANCE};
use crate::error::{Error, Result};
use crate::tensor::{add_patch, conv_full_acc, unpool_into, IndicatorGrid, Tensor3};

/// Feature maps and layer inputs of one decoded image.
#[derive(Debug, Clone, PartialEq)]
pub struct Activations {
    /// `s[l]`: `s_h x s_w x K_l`.
    pub s: Vec<Tensor3>,
    /// `x[l]`: input grid of layer `l`; `x[0]` is the reconstruction.
    pub x: Vec<Tensor3>,
}

impl Activations {
    pub fn reconstruction(&self) -> &Tensor3 {
        &self.x[0]
    }
}

/// `out[b] += sum_k s[k] (*) dicts[k][b]`
pub(crate) fn synthesize_into(out: &mut Tensor3, s: &Tensor3, dicts: &[Tensor3]) {
    let (s_h, s_w) = (s.height(), s.width());
    for (k, d) in dicts.iter().enumerate() {
        let plane = s.band(k);
        if plane.iter().all(|v| *v == 0.0) {
            continue;
        }
        for b in 0..d.bands() {
            conv_full_acc(
                out.band_mut(b),
                plane,
                s_h,
                s_w,
                d.band(b),
                d.height(),
                d.width(),
                1.0,
            );
        }
    }
}

pub(crate) fn unpool_layer(x_up: &Tensor3, z: &[IndicatorGrid]) -> Tensor3 {
    let (h, w) = z[0].expanded_dims();
    let mut s = Tensor3::zeros(h, w, z.len());
    for (k, grid) in z.iter().enumerate() {
        unpool_into(s.band_mut(k), x_up.band(k), grid);
    }
    s
}

fn check_layout(spec: &NetworkSpec, dicts: &DictionarySet, z: &[Vec<IndicatorGrid>]) -> Result<()> {
    if dicts.num_layers() != spec.num_layers() || z.len() != spec.num_layers() {
        return Err(Error::shape(
            "layer count of dictionaries or indicators does not match the spec",
        ));
    }
    for l in 0..spec.num_layers() {
        let g = spec.geometry(l);
        let ls = spec.layers[l];
        if dicts.layer(l).len() != ls.dicts || z[l].len() != ls.dicts {
            return Err(Error::shape(format!(
                "layer {}: band count mismatch",
                l + 1
            )));
        }
        if dicts
            .layer(l)
            .iter()
            .any(|d| d.dims() != (ls.dict_h, ls.dict_w, g.in_bands))
        {
            return Err(Error::shape(format!(
                "layer {}: dictionary dims mismatch",
                l + 1
            )));
        }
        if z[l].iter().any(|grid| {
            (
                grid.blocks_y(),
                grid.blocks_x(),
                grid.pool_y(),
                grid.pool_x(),
            ) != (g.out_h, g.out_w, ls.pool_y, ls.pool_x)
        }) {
            return Err(Error::shape(format!(
                "layer {}: indicator grid mismatch",
                l + 1
            )));
        }
    }
    Ok(())
}

/// Decodes from explicit top-layer feature maps.
pub fn decode_with_top(
    spec: &NetworkSpec,
    dicts: &DictionarySet,
    top_s: &Tensor3,
    z: &[Vec<IndicatorGrid>],
) -> Result<Activations> {
    check_layout(spec, dicts, z)?;
    let top = spec.top();
    let gt = spec.geometry(top);
    if top_s.dims() != (gt.s_h, gt.s_w, spec.layers[top].dicts) {
        return Err(Error::shape(format!(
            "top feature maps are {:?}, expected {:?}",
            top_s.dims(),
            (gt.s_h, gt.s_w, spec.layers[top].dicts)
        )));
    }
    let n = spec.num_layers();
    let mut s: Vec<Option<Tensor3>> = vec![None; n];
    let mut x: Vec<Option<Tensor3>> = vec![None; n];
    let mut cur = top_s.clone();
    for l in (0..n).rev() {
        if l < top {
            cur = unpool_layer(x[l + 1].as_ref().expect("decoded above"), &z[l]);
        }
        let g = spec.geometry(l);
        let mut xl = Tensor3::zeros(g.in_h, g.in_w, g.in_bands);
        synthesize_into(&mut xl, &cur, dicts.layer(l));
        s[l] = Some(cur.clone());
        x[l] = Some(xl);
    }
    Ok(Activations {
        s: s.into_iter().map(|v| v.expect("filled")).collect(),
        x: x.into_iter().map(|v| v.expect("filled")).collect(),
    })
}

/// Decodes a latent state. Panics if the state was built for another spec.
pub fn decode(spec: &NetworkSpec, dicts: &DictionarySet, state: &LatentState) -> Activations {
    decode_with_top(spec, dicts, &state.top_s(), &state.z).expect("state matches spec")
}

/// Noiseless image for the given top-layer maps and indicators.
pub fn generative_decode(
    spec: &NetworkSpec,
    top_s: &Tensor3,
    z: &[Vec<IndicatorGrid>],
    dicts: &DictionarySet,
) -> Result<Tensor3> {
    Ok(decode_with_top(spec, dicts, top_s, z)?.x.swap_remove(0))
}

/// Image-plane response of a map `x_l` living on the input grid of layer `l`
/// (so `l = 0` returns `x_l` itself), under the lower-layer indicators `z`.
pub fn respond_x(
    dicts: &DictionarySet,
    z: &[Vec<IndicatorGrid>],
    l: usize,
    x_l: Tensor3,
) -> Tensor3 {
    let mut cur = x_l;
    for ll in (0..l).rev() {
        let s = unpool_layer(&cur, &z[ll]);
        let d0 = dicts.get(ll, 0);
        let (h, w) = (s.height() + d0.height() - 1, s.width() + d0.width() - 1);
        let mut next = Tensor3::zeros(h, w, d0.bands());
        synthesize_into(&mut next, &s, dicts.layer(ll));
        cur = next;
    }
    cur
}

/// Image-plane response of a unit activation at `S_l[k](y, x)`.
pub fn respond_unit(
    spec: &NetworkSpec,
    dicts: &DictionarySet,
    z: &[Vec<IndicatorGrid>],
    l: usize,
    k: usize,
    y: usize,
    x: usize,
) -> Tensor3 {
    let g = spec.geometry(l);
    let d = dicts.get(l, k);
    let mut xl = Tensor3::zeros(g.in_h, g.in_w, g.in_bands);
    for b in 0..g.in_bands {
        add_patch(
            xl.band_mut(b),
            g.in_w,
            y,
            x,
            d.band(b),
            d.height(),
            d.width(),
            1.0,
        );
    }
    respond_x(dicts, z, l, xl)
}

/// Contribution to the image of band `k` of the input grid of layer `l`
/// (`l >= 1`), when that band holds the single-band map `x`.
pub fn g_response(
    spec: &NetworkSpec,
    dicts: &DictionarySet,
    state: &LatentState,
    l: usize,
    k: usize,
    x: &Tensor3,
) -> Result<Tensor3> {
    if l == 0 || l >= spec.num_layers() {
        return Err(Error::OutOfRange(format!(
            "g_response needs an internal layer in 1..{}, got {l}",
            spec.num_layers()
        )));
    }
    let g = spec.geometry(l);
    if k >= g.in_bands {
        return Err(Error::OutOfRange(format!("band {k} of {}", g.in_bands)));
    }
    if x.dims() != (g.in_h, g.in_w, 1) {
        return Err(Error::shape(format!(
            "g_response input is {:?}, expected {:?}",
            x.dims(),
            (g.in_h, g.in_w, 1)
        )));
    }
    let mut xl = Tensor3::zeros(g.in_h, g.in_w, g.in_bands);
    xl.band_mut(k).copy_from_slice(x.data());
    Ok(respond_x(dicts, &state.z, l, xl))
}

/// `E = image - decode(state)`.
pub fn residual(
    spec: &NetworkSpec,
    image: &Tensor3,
    state: &LatentState,
    dicts: &DictionarySet,
) -> Result<Tensor3> {
    if image.dims() != (spec.input_height, spec.input_width, spec.channels) {
        return Err(Error::shape(format!(
            "image is {:?}, model expects {:?}",
            image.dims(),
            (spec.input_height, spec.input_width, spec.channels)
        )));
    }
    let acts = decode_with_top(spec, dicts, &state.top_s(), &state.z)?;
    let mut e = image.clone();
    e.add_scaled(-1.0, acts.reconstruction());
    Ok(e)
}

/// Projects dictionary element `element` of layer `layer` (0-based) to the
/// data plane: a unit impulse on its feature map is pushed down through the
/// lower layers, each pooled value being placed at the centre of its block.
/// For the bottom layer this is the kernel itself.
pub fn visualize_dictionary(
    spec: &NetworkSpec,
    dicts: &DictionarySet,
    layer: usize,
    element: usize,
) -> Result<Tensor3> {
    if layer >= dicts.num_layers() || layer >= spec.num_layers() {
        return Err(Error::OutOfRange(format!(
            "layer {layer} of {}",
            dicts.num_layers()
        )));
    }
    if element >= dicts.layer(layer).len() {
        return Err(Error::OutOfRange(format!(
            "element {element} of {} in layer {layer}",
            dicts.layer(layer).len()
        )));
    }
    let mut cur = dicts.get(layer, element).clone();
    for ll in (0..layer).rev() {
        let ls = spec.layers[ll];
        let c = center_category(ls.pool_y, ls.pool_x);
        let grid = IndicatorGrid::from_categories(
            cur.height(),
            cur.width(),
            ls.pool_y,
            ls.pool_x,
            vec![c as u16; cur.height() * cur.width()],
        )?;
        let z = vec![grid; cur.bands()];
        let s = unpool_layer(&cur, &z);
        let d0 = dicts.get(ll, 0);
        let mut next = Tensor3::zeros(
            s.height() + d0.height() - 1,
            s.width() + d0.width() - 1,
            d0.bands(),
        );
        synthesize_into(&mut next, &s, dicts.layer(ll));
        cur = next;
    }
    Ok(cur)
}

/// Position index (1-based category) of the centre of a `pool_y x pool_x`
/// block.
pub fn center_category(pool_y: usize, pool_x: usize) -> usize {
    1 + ((pool_y - 1) / 2) * pool_x + (pool_x - 1) / 2
}

/// Options for [`sample_prior_image`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorOptions {
    /// Noise precision; huge values give noiseless images.
    pub gamma_e: f64,
    /// Pins the slab precision of the top layer; `None` samples it from the
    /// Gamma prior.
    pub gamma_s: Option<f64>,
    /// Overrides the top-layer "on" probability; `None` draws it from the
    /// Dirichlet prior.
    pub top_density: Option<f64>,
}

impl Default for PriorOptions {
    fn default() -> Self {
        PriorOptions {
            gamma_e: 1e4,
            gamma_s: Some(1.0),
            top_density: None,
        }
    }
}

/// One draw from the generative model.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSample {
    pub image: Tensor3,
    pub state: LatentState,
    /// The additive noise, so that `decode(state) + noise == image` exactly.
    pub noise: Tensor3,
}

pub fn sample_prior_image<R: Rng + ?Sized>(
    spec: &NetworkSpec,
    dicts: &DictionarySet,
    opts: &PriorOptions,
    rng: &mut R,
) -> Result<PriorSample> {
    if !(opts.gamma_e > 0.0) {
        return Err(Error::param(format!(
            "gamma_e must be positive, got {}",
            opts.gamma_e
        )));
    }
    let mut state = LatentState::sample_prior(spec, opts.gamma_s, opts.gamma_e, rng)?;
    if let Some(p) = opts.top_density {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::param(format!(
                "top density must lie in [0, 1], got {p}"
            )));
        }
        let top = spec.top();
        for k in 0..spec.layers[top].dicts {
            let theta = vec![1.0 - p, p];
            let grid = &mut state.z[top][k];
            for i in 0..grid.blocks_y() {
                for j in 0..grid.blocks_x() {
                    grid.set_category(i, j, sample_categorical(&theta, rng)?);
                }
            }
            state.theta[top][k] = theta;
        }
    }
    let acts = decode_with_top(spec, dicts, &state.top_s(), &state.z)?;
    let recon = acts.x.into_iter().next().expect("bottom layer");
    let var = 1.0 / opts.gamma_e;
    let mut noise = Tensor3::zeros(recon.height(), recon.width(), recon.bands());
    if var >= DEGENERATE_VARIANCE {
        for v in noise.data_mut() {
            *v = sample_gaussian(0.0, var, rng)?;
        }
    }
    let mut image = recon;
    for (p, e) in image.data_mut().iter_mut().zip(noise.data()) {
        *p += e;
    }
    Ok(PriorSample {
        image,
        state,
        noise,
    })
}
