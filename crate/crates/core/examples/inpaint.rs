//! Inpainting on images drawn from a known model: half of the pixels are
//! hidden, the features are inferred from the rest, and the hidden pixels
//! are filled from the reconstruction. Compares against filling with the
//! mean of the observed pixels.
//!
//! ```text
//! cargo run --release --example inpaint -- [out.pgm]
//! ```

use std::env;

use dgdn::distributions::RngStream;
use dgdn::io::{tile_images, write_pgm};
use dgdn::mcem::InferConfig;
use dgdn::model::{sample_prior_image, PriorOptions};
use dgdn::tasks::{inpaint, PixelMask};
use dgdn::{DictionarySet, Hyperparams, LayerSpec, NetworkSpec, Tensor3};

fn hidden_mse(a: &Tensor3, b: &Tensor3, mask: &PixelMask) -> f64 {
    let (h, w) = mask.dims();
    let mut sum = 0.0;
    let mut n = 0;
    for y in 0..h {
        for x in 0..w {
            if !mask.is_observed(y, x) {
                sum += (a.get(y, x, 0) - b.get(y, x, 0)).powi(2);
                n += 1;
            }
        }
    }
    sum / n.max(1) as f64
}

fn main() -> dgdn::Result<()> {
    let out = env::args().nth(1).unwrap_or_else(|| "inpaint.pgm".into());
    let spec = NetworkSpec::new(
        16,
        16,
        1,
        0,
        vec![LayerSpec::new(4, 5, 5, 2, 2), LayerSpec::new(4, 3, 3, 1, 1)],
        Hyperparams::default(),
    )?;
    let mut rng = RngStream::new(3, 0);
    let dicts = DictionarySet::sample_prior(&spec, 1.0, &mut rng);
    let prior = PriorOptions {
        gamma_e: 1e6,
        top_density: Some(0.5),
        ..PriorOptions::default()
    };
    let iterations = env::var("ITERS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(50);
    let cfg = InferConfig {
        iterations,
        ..InferConfig::default()
    };
    let mut tiles = Vec::new();
    let mut wins = 0;
    let trials = 8;
    for _ in 0..trials {
        let image = sample_prior_image(&spec, &dicts, &prior, &mut rng)?.image;
        let mask = PixelMask::random(16, 16, 0.5, &mut rng)?;
        let result = inpaint(&spec, &dicts, &image, &mask, &cfg, &mut rng)?;

        let w = mask.weights(1);
        let mean = image.data().iter().zip(&w).map(|(v, w)| v * w).sum::<f64>()
            / mask.observed_count() as f64;
        let mut observed = image.clone();
        let mut mean_fill = image.clone();
        for ((o, m), w) in observed
            .data_mut()
            .iter_mut()
            .zip(mean_fill.data_mut())
            .zip(&w)
        {
            if *w == 0.0 {
                *o = 0.0;
                *m = mean;
            }
        }
        let (model, base) = (
            hidden_mse(&result.completed, &image, &mask),
            hidden_mse(&mean_fill, &image, &mask),
        );
        println!("hidden-pixel MSE: model {model:.4}, mean fill {base:.4}");
        wins += (model < base) as usize;
        tiles.extend([image, observed, result.completed]);
    }
    println!("model beats the mean fill on {wins} of {trials} images");
    // one row per image: original, observed, completed
    write_pgm(&tile_images(&tiles, 3)?, out.as_ref())?;
    println!("wrote {out}");
    Ok(())
}
