use rand::Rng;

use super::spec::NetworkSpec;
use crate::distributions::standard_normal;
use crate::error::{Error, Result};
use crate::tensor::Tensor3;

/// Convolutional dictionaries of every layer. `layers[l][k]` is element `k`
/// of layer `l`, a `dict_h x dict_w x in_bands` kernel whose band `b` couples
/// it to band `b` of the layer's input.
#[derive(Debug, Clone, PartialEq)]
pub struct DictionarySet {
    layers: Vec<Vec<Tensor3>>,
}

impl DictionarySet {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        let layers = (0..spec.num_layers())
            .map(|l| {
                let ls = spec.layers[l];
                let bands = spec.geometry(l).in_bands;
                (0..ls.dicts)
                    .map(|_| Tensor3::zeros(ls.dict_h, ls.dict_w, bands))
                    .collect()
            })
            .collect();
        DictionarySet { layers }
    }

    /// Draws every pixel from `N(0, 1)` and multiplies by `scale`.
    pub fn sample_prior<R: Rng + ?Sized>(spec: &NetworkSpec, scale: f64, rng: &mut R) -> Self {
        let mut d = DictionarySet::zeros(spec);
        for layer in &mut d.layers {
            for t in layer.iter_mut() {
                t.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = scale * standard_normal(rng));
            }
        }
        d
    }

    pub fn from_layers(spec: &NetworkSpec, layers: Vec<Vec<Tensor3>>) -> Result<Self> {
        let expected = DictionarySet::zeros(spec);
        if layers.len() != expected.layers.len() {
            return Err(Error::shape(format!(
                "expected {} dictionary layers, got {}",
                expected.layers.len(),
                layers.len()
            )));
        }
        for (l, (got, want)) in layers.iter().zip(&expected.layers).enumerate() {
            if got.len() != want.len() {
                return Err(Error::shape(format!(
                    "layer {}: expected {} dictionaries, got {}",
                    l + 1,
                    want.len(),
                    got.len()
                )));
            }
            if let Some(bad) = got.iter().zip(want).find(|(g, w)| !g.same_dims(w)) {
                return Err(Error::shape(format!(
                    "layer {}: dictionary is {:?}, expected {:?}",
                    l + 1,
                    bad.0.dims(),
                    bad.1.dims()
                )));
            }
        }
        Ok(DictionarySet { layers })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, l: usize) -> &[Tensor3] {
        &self.layers[l]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut [Tensor3] {
        &mut self.layers[l]
    }

    pub fn get(&self, l: usize, k: usize) -> &Tensor3 {
        &self.layers[l][k]
    }

    pub fn get_mut(&mut self, l: usize, k: usize) -> &mut Tensor3 {
        &mut self.layers[l][k]
    }

    pub fn layers(&self) -> &[Vec<Tensor3>] {
        &self.layers
    }

    pub fn into_layers(self) -> Vec<Vec<Tensor3>> {
        self.layers
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor3> {
        self.layers.iter().flatten()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Tensor3> {
        self.layers.iter_mut().flatten()
    }

    /// Total number of scalar parameters.
    pub fn param_len(&self) -> usize {
        self.iter().map(|t| t.len()).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.iter().map(|t| t.norm_sq()).sum()
    }

    /// All parameters in layer, element, tensor order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_len());
        for t in self.iter() {
            v.extend_from_slice(t.data());
        }
        v
    }

    pub fn copy_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_len() {
            return Err(Error::shape(format!(
                "flat dictionary vector has {} values, expected {}",
                flat.len(),
                self.param_len()
            )));
        }
        let mut off = 0;
        for t in self.iter_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|t| t.is_finite())
    }
}
