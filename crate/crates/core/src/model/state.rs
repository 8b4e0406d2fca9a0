use rand::Rng;

use super::spec::{dirichlet_concentration, NetworkSpec};
use crate::distributions::{sample_categorical, sample_dirichlet, sample_gamma, standard_normal};
use crate::error::Result;
use crate::tensor::{IndicatorGrid, Tensor3};

/// Per-image latent variables.
///
/// Lower layers carry only unpooling indicators: their feature maps are
/// `S_l = unpool(X_{l+1}, Z_l)` and are recomputed by decoding. The top layer
/// keeps a dense weight map `top_w`; its feature maps are `top_w * Z_L`
/// where `Z_L` is a binary (pool 1x1 plus off-state) indicator grid. Slab
/// weights under an inactive spike are kept and follow their prior, so the
/// precision `gamma_s` sees every position of a band.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    /// `z[l][k]`: indicators of band `k` of layer `l`.
    pub z: Vec<Vec<IndicatorGrid>>,
    /// `theta[l][k]`: block category probabilities, off-state first.
    pub theta: Vec<Vec<Vec<f64>>>,
    /// Top-layer slab weights, `s_h x s_w x K_L`.
    pub top_w: Tensor3,
    /// Slab precision per top band.
    pub gamma_s: Vec<f64>,
    /// Noise precision.
    pub gamma_e: f64,
    /// SVM latent scales, one per class (empty when unsupervised).
    pub lambdas: Vec<f64>,
}

impl LatentState {
    /// Everything off, weights zero, unit precisions, uniform `theta`.
    pub fn new(spec: &NetworkSpec) -> Self {
        let mut z = Vec::with_capacity(spec.num_layers());
        let mut theta = Vec::with_capacity(spec.num_layers());
        for l in 0..spec.num_layers() {
            let g = spec.geometry(l);
            let ls = spec.layers[l];
            let grid = IndicatorGrid::new(g.out_h, g.out_w, ls.pool_y, ls.pool_x);
            z.push(vec![grid; ls.dicts]);
            let cats = ls.pool_len() + 1;
            theta.push(vec![vec![1.0 / cats as f64; cats]; ls.dicts]);
        }
        let gt = spec.geometry(spec.top());
        let kt = spec.layers[spec.top()].dicts;
        LatentState {
            z,
            theta,
            top_w: Tensor3::zeros(gt.s_h, gt.s_w, kt),
            gamma_s: vec![1.0; kt],
            gamma_e: 1.0,
            lambdas: vec![1.0; spec.classes],
        }
    }

    /// Draws every latent variable from its prior except `gamma_e`, which is
    /// set by the caller. Precisions come from their Gamma priors; pass
    /// `gamma_s` to pin the slab precision instead (the default diffuse prior
    /// produces weights too extreme to be useful for simulation).
    pub fn sample_prior<R: Rng + ?Sized>(
        spec: &NetworkSpec,
        gamma_s: Option<f64>,
        gamma_e: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut st = LatentState::new(spec);
        st.gamma_e = gamma_e;
        for l in 0..spec.num_layers() {
            let alpha = dirichlet_concentration(spec.layers[l].pool_len());
            for k in 0..spec.layers[l].dicts {
                let cats = st.z[l][k].num_categories();
                let theta = sample_dirichlet(&vec![alpha; cats], rng)?;
                let grid = &mut st.z[l][k];
                for i in 0..grid.blocks_y() {
                    for j in 0..grid.blocks_x() {
                        grid.set_category(i, j, sample_categorical(&theta, rng)?);
                    }
                }
                st.theta[l][k] = theta;
            }
        }
        let h = spec.hyper;
        for k in 0..st.gamma_s.len() {
            let gs = match gamma_s {
                Some(v) => v,
                None => sample_gamma(h.a_s, h.b_s, rng)?,
            };
            st.gamma_s[k] = gs;
            let sd = 1.0 / gs.sqrt();
            st.top_w
                .band_mut(k)
                .iter_mut()
                .for_each(|w| *w = sd * standard_normal(rng));
        }
        Ok(st)
    }

    /// Top-layer feature maps `S_L = W * Z_L`.
    pub fn top_s(&self) -> Tensor3 {
        let mut s = self.top_w.clone();
        let top = self.z.last().expect("at least one layer");
        for (k, grid) in top.iter().enumerate() {
            let plane = s.band_mut(k);
            for (v, &c) in plane.iter_mut().zip(grid.categories()) {
                if c == 0 {
                    *v = 0.0;
                }
            }
        }
        s
    }

    /// Unfolded top-layer features with the constant bias appended.
    pub fn features(&self) -> Vec<f64> {
        let mut f = self.top_s().into_vec();
        f.push(1.0);
        f
    }

    pub fn top_active(&self, k: usize, i: usize, j: usize) -> bool {
        self.z.last().expect("at least one layer")[k].category(i, j) != 0
    }
}
