use crate::error::{Error, Result};
use crate::model::{residual, Activations, DictionarySet, LatentState, NetworkSpec};
use crate::tensor::Tensor3;

/// Residual `E = X - decode(state)` of one image, plus optional per-pixel
/// observation weights (1 = observed, 0 = missing). Every inner product and
/// norm the conditionals use goes through the weights, so missing pixels drop
/// out of the likelihood entirely.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualCache {
    residual: Tensor3,
    weights: Option<Vec<f64>>,
    n_obs: f64,
}

impl ResidualCache {
    pub fn new(residual: Tensor3, weights: Option<Vec<f64>>) -> Result<Self> {
        let n_obs = match &weights {
            Some(w) => {
                if w.len() != residual.len() {
                    return Err(Error::shape(format!(
                        "mask has {} entries, image has {}",
                        w.len(),
                        residual.len()
                    )));
                }
                w.iter().sum()
            }
            None => residual.len() as f64,
        };
        if n_obs <= 0.0 {
            return Err(Error::Empty("no observed pixels".into()));
        }
        Ok(ResidualCache {
            residual,
            weights,
            n_obs,
        })
    }

    /// Residual of `image` under `acts`.
    pub fn from_activations(
        image: &Tensor3,
        acts: &Activations,
        weights: Option<Vec<f64>>,
    ) -> Result<Self> {
        if !image.same_dims(acts.reconstruction()) {
            return Err(Error::shape("image does not match reconstruction"));
        }
        let mut e = image.clone();
        e.add_scaled(-1.0, acts.reconstruction());
        ResidualCache::new(e, weights)
    }

    pub fn from_state(
        spec: &NetworkSpec,
        dicts: &DictionarySet,
        image: &Tensor3,
        state: &LatentState,
        weights: Option<Vec<f64>>,
    ) -> Result<Self> {
        ResidualCache::new(residual(spec, image, state, dicts)?, weights)
    }

    pub fn residual(&self) -> &Tensor3 {
        &self.residual
    }

    pub fn residual_mut(&mut self) -> &mut Tensor3 {
        &mut self.residual
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    pub fn take_weights(self) -> Option<Vec<f64>> {
        self.weights
    }

    /// Number of observed values (pixels times bands).
    pub fn n_obs(&self) -> f64 {
        self.n_obs
    }

    /// `<E, r>` over observed pixels.
    pub fn dot_residual(&self, r: &Tensor3) -> f64 {
        self.wdot(self.residual.data(), r.data())
    }

    pub fn wdot(&self, a: &[f64], b: &[f64]) -> f64 {
        match &self.weights {
            None => a.iter().zip(b).map(|(x, y)| x * y).sum(),
            Some(w) => a.iter().zip(b).zip(w).map(|((x, y), w)| w * x * y).sum(),
        }
    }

    pub fn wnorm_sq(&self, a: &[f64]) -> f64 {
        self.wdot(a, a)
    }

    /// `||E||^2` over observed pixels.
    pub fn norm_sq(&self) -> f64 {
        self.wnorm_sq(self.residual.data())
    }

    /// `E += alpha * r`
    pub fn add(&mut self, alpha: f64, r: &Tensor3) {
        if alpha != 0.0 {
            self.residual.add_scaled(alpha, r);
        }
    }

    /// Replaces the residual with a freshly computed one.
    pub fn reset(&mut self, image: &Tensor3, acts: &Activations) {
        self.residual.data_mut().copy_from_slice(image.data());
        self.residual.add_scaled(-1.0, acts.reconstruction());
    }
}

/// `sum_{p,q} w[y0+p, x0+q] d[p,q]^2`
pub(crate) fn weighted_patch_norm(
    w: &[f64],
    w_w: usize,
    y0: usize,
    x0: usize,
    d: &[f64],
    d_h: usize,
    d_w: usize,
) -> f64 {
    let mut acc = 0.0;
    for p in 0..d_h {
        let off = (y0 + p) * w_w + x0;
        for q in 0..d_w {
            let v = d[p * d_w + q];
            acc += w[off + q] * v * v;
        }
    }
    acc
}
