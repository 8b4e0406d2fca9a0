//! Generation, inpainting and dictionary visualisation.

use rand::Rng;
use rayon::prelude::*;

use crate::distributions::RngStream;
use crate::error::{Error, Result};
use crate::gibbs::purpose;
use crate::io::{tile_images, Checkpoint};
use crate::mcem::{infer_features, InferConfig};
use crate::model::{
    decode, sample_prior_image, visualize_dictionary, DictionarySet, NetworkSpec, PriorOptions,
};
use crate::tensor::Tensor3;

/// Which pixels of an image are observed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    height: usize,
    width: usize,
    observed: Vec<bool>,
}

impl PixelMask {
    /// Row-major `observed` flags; at least one pixel must be observed.
    pub fn new(height: usize, width: usize, observed: Vec<bool>) -> Result<Self> {
        if observed.len() != height * width {
            return Err(Error::shape(format!(
                "mask has {} entries for a {height}x{width} image",
                observed.len()
            )));
        }
        if !observed.iter().any(|&o| o) {
            return Err(Error::param("mask hides every pixel"));
        }
        Ok(PixelMask {
            height,
            width,
            observed,
        })
    }

    pub fn full(height: usize, width: usize) -> Self {
        PixelMask {
            height,
            width,
            observed: vec![true; height * width],
        }
    }

    /// Each pixel observed independently with probability `keep`; retries
    /// until at least one pixel is observed.
    pub fn random<R: Rng + ?Sized>(
        height: usize,
        width: usize,
        keep: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(Error::param(format!(
                "keep fraction must lie in (0, 1], got {keep}"
            )));
        }
        loop {
            let observed: Vec<bool> = (0..height * width)
                .map(|_| rng.random::<f64>() < keep)
                .collect();
            if let Ok(m) = PixelMask::new(height, width, observed) {
                return Ok(m);
            }
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn is_observed(&self, y: usize, x: usize) -> bool {
        self.observed[y * self.width + x]
    }

    pub fn observed_count(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    /// Likelihood weights for an image with `bands` bands (1 observed, 0 hidden).
    pub fn weights(&self, bands: usize) -> Vec<f64> {
        let plane: Vec<f64> = self
            .observed
            .iter()
            .map(|&o| if o { 1.0 } else { 0.0 })
            .collect();
        plane.repeat(bands)
    }
}

/// Options for [`generate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerateOptions {
    pub prior: PriorOptions,
    /// Return the noiseless reconstruction instead of the noisy draw.
    pub suppress_noise: bool,
    /// Clamp pixels to the range seen at training time.
    pub clamp: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            prior: PriorOptions::default(),
            suppress_noise: true,
            clamp: true,
        }
    }
}

/// `count` independent draws from the model; draw `n` uses its own stream
/// derived from `seed`.
pub fn generate(
    ck: &Checkpoint,
    count: usize,
    opts: &GenerateOptions,
    seed: u64,
) -> Result<Vec<Tensor3>> {
    let (lo, hi) = ck.data_range;
    (0..count)
        .into_par_iter()
        .map(|n| {
            let mut rng = RngStream::derive(seed, purpose::TASK, n as u64, 0);
            let draw = sample_prior_image(&ck.spec, &ck.dicts, &opts.prior, &mut rng)?;
            let mut img = draw.image;
            if opts.suppress_noise {
                img.add_scaled(-1.0, &draw.noise);
            }
            if opts.clamp && lo <= hi {
                img.data_mut().iter_mut().for_each(|v| *v = v.clamp(lo, hi));
            }
            Ok(img)
        })
        .collect()
}

/// Result of [`inpaint`].
#[derive(Debug, Clone)]
pub struct Inpainted {
    /// Observed pixels copied verbatim, hidden ones from the reconstruction.
    pub completed: Tensor3,
    pub reconstruction: Tensor3,
    /// Final value of the masked inference objective.
    pub objective: f64,
}

/// Fills the hidden pixels of `image`: features are inferred with only the
/// observed pixels in the likelihood, and the hidden pixels are taken from
/// the model's reconstruction.
pub fn inpaint<R: Rng + ?Sized>(
    spec: &NetworkSpec,
    dicts: &DictionarySet,
    image: &Tensor3,
    mask: &PixelMask,
    cfg: &InferConfig,
    rng: &mut R,
) -> Result<Inpainted> {
    if mask.dims() != (image.height(), image.width()) {
        return Err(Error::shape("mask and image dims differ"));
    }
    if mask.observed_count() == 0 {
        return Err(Error::param("mask hides every pixel"));
    }
    let w = mask.weights(image.bands());
    let inf = infer_features(spec, dicts, image, Some(&w), cfg, rng)?;
    let recon = decode(spec, dicts, &inf.state)
        .x
        .into_iter()
        .next()
        .expect("bottom layer");
    let mut completed = recon.clone();
    for ((c, &o), &wv) in completed.data_mut().iter_mut().zip(image.data()).zip(&w) {
        if wv > 0.0 {
            *c = o;
        }
    }
    Ok(Inpainted {
        completed,
        reconstruction: recon,
        objective: inf.objective,
    })
}

/// Grid of the data-plane projections of every element of `layer`, each
/// tile min-max normalised, `ceil(sqrt(K))` tiles per row. Multi-band
/// projections are averaged over bands.
pub fn dict_grid(spec: &NetworkSpec, dicts: &DictionarySet, layer: usize) -> Result<Tensor3> {
    if layer >= spec.num_layers() {
        return Err(Error::OutOfRange(format!(
            "layer {layer} of {}",
            spec.num_layers()
        )));
    }
    let k = dicts.layer(layer).len();
    let tiles = (0..k)
        .map(|e| visualize_dictionary(spec, dicts, layer, e).map(|t| band_mean(&t)))
        .collect::<Result<Vec<_>>>()?;
    tile_images(&tiles, grid_cols(k))
}

/// Tiles per row for `k` tiles.
pub fn grid_cols(k: usize) -> usize {
    let mut c = (k as f64).sqrt() as usize;
    while c * c < k {
        c += 1;
    }
    c.max(1)
}

fn band_mean(t: &Tensor3) -> Tensor3 {
    if t.bands() == 1 {
        return t.clone();
    }
    let mut out = Tensor3::zeros(t.height(), t.width(), 1);
    for b in 0..t.bands() {
        for (o, v) in out.data_mut().iter_mut().zip(t.band(b)) {
            *o += v / t.bands() as f64;
        }
    }
    out
}
