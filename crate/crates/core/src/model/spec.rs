use crate::error::{Error, Result};

/// One generative layer: `dicts` kernels of `dict_h x dict_w` (with as many
/// bands as the layer below has dictionaries), and the pooling ratio that links
/// this layer's feature maps to the next layer's input. The top layer must
/// use a 1x1 pooling ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub dicts: usize,
    pub dict_h: usize,
    pub dict_w: usize,
    pub pool_y: usize,
    pub pool_x: usize,
}

impl LayerSpec {
    pub fn new(dicts: usize, dict_h: usize, dict_w: usize, pool_y: usize, pool_x: usize) -> Self {
        LayerSpec {
            dicts,
            dict_h,
            dict_w,
            pool_y,
            pool_x,
        }
    }

    pub fn pool_len(&self) -> usize {
        self.pool_y * self.pool_x
    }
}

/// Prior hyperparameters and the SVM margin scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparams {
    /// Gamma prior on the top-layer slab precisions.
    pub a_s: f64,
    pub b_s: f64,
    /// Gamma prior on the noise precision.
    pub a_e: f64,
    pub b_e: f64,
    /// Gamma prior on the pretraining weight precisions.
    pub a_w: f64,
    pub b_w: f64,
    /// Margin scale of the SVM pseudo-likelihood.
    pub svm_gamma: f64,
    /// Lower bound on `|beta|` in the shrinkage weights `1 / |beta|`.
    pub beta_floor: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            a_s: 1e-6,
            b_s: 1e-6,
            a_e: 1e-6,
            b_e: 1e-6,
            a_w: 1e-6,
            b_w: 1e-6,
            svm_gamma: 1.0,
            beta_floor: 1e-6,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("a_s", self.a_s),
            ("b_s", self.b_s),
            ("a_e", self.a_e),
            ("b_e", self.b_e),
            ("a_w", self.a_w),
            ("b_w", self.b_w),
            ("svm_gamma", self.svm_gamma),
            ("beta_floor", self.beta_floor),
        ];
        for (name, v) in all {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::param(format!(
                    "hyperparameter {name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Symmetric Dirichlet concentration for a block with `pool_len` positions
/// plus the off-state.
pub fn dirichlet_concentration(pool_len: usize) -> f64 {
    1.0 / (pool_len as f64 + 1.0)
}

/// Architecture of the deep model, bottom layer first.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub input_height: usize,
    pub input_width: usize,
    pub channels: usize,
    /// Number of classes; 0 for an unsupervised model.
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
    pub hyper: Hyperparams,
}

/// Spatial geometry of one layer, derived from the shape chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerGeometry {
    /// Input grid `X` of this layer: height, width, bands.
    pub in_h: usize,
    pub in_w: usize,
    pub in_bands: usize,
    /// Feature maps `S`: `in - dict + 1`.
    pub s_h: usize,
    pub s_w: usize,
    /// Pooled grid handed to the layer above (`s / pool`).
    pub out_h: usize,
    pub out_w: usize,
}

impl NetworkSpec {
    pub fn new(
        input_height: usize,
        input_width: usize,
        channels: usize,
        classes: usize,
        layers: Vec<LayerSpec>,
        hyper: Hyperparams,
    ) -> Result<Self> {
        let spec = NetworkSpec {
            input_height,
            input_width,
            channels,
            classes,
            layers,
            hyper,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_height == 0 || self.input_width == 0 || self.channels == 0 {
            return Err(Error::shape("input dimensions must be positive"));
        }
        if self.layers.is_empty() {
            return Err(Error::shape("network needs at least one layer"));
        }
        if self.classes == 1 {
            return Err(Error::param("a supervised model needs at least 2 classes"));
        }
        self.hyper.validate()?;
        let (mut h, mut w) = (self.input_height, self.input_width);
        let top = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.dicts == 0 || layer.dict_h == 0 || layer.dict_w == 0 {
                return Err(Error::shape(format!(
                    "layer {}: dictionary sizes must be positive",
                    l + 1
                )));
            }
            if layer.pool_y == 0 || layer.pool_x == 0 {
                return Err(Error::shape(format!(
                    "layer {}: pooling ratios must be positive",
                    l + 1
                )));
            }
            if layer.dict_h > h || layer.dict_w > w {
                return Err(Error::shape(format!(
                    "layer {}: {}x{} dictionary does not fit a {}x{} input",
                    l + 1,
                    layer.dict_h,
                    layer.dict_w,
                    h,
                    w
                )));
            }
            let (sh, sw) = (h - layer.dict_h + 1, w - layer.dict_w + 1);
            if l == top && (layer.pool_y != 1 || layer.pool_x != 1) {
                return Err(Error::shape("the top layer must use 1x1 pooling"));
            }
            if sh % layer.pool_y != 0 || sw % layer.pool_x != 0 {
                return Err(Error::shape(format!(
                    "layer {}: {}x{} feature map is not divisible by {}x{} pooling",
                    l + 1,
                    sh,
                    sw,
                    layer.pool_y,
                    layer.pool_x
                )));
            }
            h = sh / layer.pool_y;
            w = sw / layer.pool_x;
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn top(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn supervised(&self) -> bool {
        self.classes >= 2
    }

    /// Geometry of layer `l` (0-based). Assumes a validated spec.
    pub fn geometry(&self, l: usize) -> LayerGeometry {
        let (mut h, mut w, mut bands) = (self.input_height, self.input_width, self.channels);
        for layer in &self.layers[..l] {
            h = (h - layer.dict_h + 1) / layer.pool_y;
            w = (w - layer.dict_w + 1) / layer.pool_x;
            bands = layer.dicts;
        }
        let layer = &self.layers[l];
        let (s_h, s_w) = (h - layer.dict_h + 1, w - layer.dict_w + 1);
        LayerGeometry {
            in_h: h,
            in_w: w,
            in_bands: bands,
            s_h,
            s_w,
            out_h: s_h / layer.pool_y,
            out_w: s_w / layer.pool_x,
        }
    }

    pub fn geometries(&self) -> Vec<LayerGeometry> {
        (0..self.layers.len()).map(|l| self.geometry(l)).collect()
    }

    /// Length of the unfolded top-layer feature vector (without bias).
    pub fn feature_len(&self) -> usize {
        let g = self.geometry(self.top());
        g.s_h * g.s_w * self.layers[self.top()].dicts
    }

    pub fn image_len(&self) -> usize {
        self.input_height * self.input_width * self.channels
    }
}
