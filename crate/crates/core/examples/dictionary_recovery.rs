//! Learns a single convolutional layer from synthetic images built out of
//! three random 4x4 kernels and reports how well each kernel is recovered.
//!
//! ```text
//! cargo run --release --example dictionary_recovery -- [dicts.pgm]
//! ```

use std::env;
use std::path::PathBuf;

use dgdn::distributions::{standard_normal, RngStream};
use dgdn::io::{tile_images, write_pgm};
use dgdn::pretrain::{pretrain_layer, prune_indices, PretrainConfig};
use dgdn::tensor::conv_full;
use dgdn::{Hyperparams, LayerSpec, Tensor3};
use rand::Rng;

fn main() -> dgdn::Result<()> {
    let out = PathBuf::from(
        env::args()
            .nth(1)
            .unwrap_or_else(|| "dictionary.pgm".into()),
    );
    let mut rng = RngStream::new(707, 0);
    let truth: Vec<Tensor3> = (0..3)
        .map(|_| {
            let mut d = Tensor3::zeros(4, 4, 1);
            d.data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-1.0..1.0));
            let n = d.norm_sq().sqrt();
            d.scale(1.0 / n);
            d
        })
        .collect();

    // sparse signed spikes convolved with each kernel, plus a little noise
    let mut images = Vec::new();
    for _ in 0..200 {
        let mut img = Tensor3::zeros(16, 16, 1);
        for d in &truth {
            let mut s = Tensor3::zeros(13, 13, 1);
            for v in s.data_mut() {
                if rng.random::<f64>() < 0.04 {
                    let m: f64 = rng.random_range(1.0..2.0);
                    *v = if rng.random::<bool>() { m } else { -m };
                }
            }
            img.add_scaled(1.0, &conv_full(&s, d)?);
        }
        img.data_mut()
            .iter_mut()
            .for_each(|v| *v += 0.02 * standard_normal(&mut rng));
        images.push(img);
    }

    // six elements for three kernels; restarts are ranked by residual energy
    let layer = LayerSpec::new(6, 4, 4, 1, 1);
    let mut best = None;
    for seed in 1..=3 {
        let cfg = PretrainConfig {
            burn_in: 150,
            collection: 50,
            images: 0,
            prune_threshold: 0.01,
            seed,
            init_scale: 0.1,
        };
        let mut fit = pretrain_layer(&images, &layer, &Hyperparams::default(), &cfg, 0)?;
        fit.retain(&prune_indices(&fit.usage, cfg.prune_threshold), &images);
        let sse: f64 = fit.states.iter().map(|s| s.residual.norm_sq()).sum();
        println!(
            "restart {seed}: {} elements, residual energy {sse:.2}",
            fit.dicts.len()
        );
        if best.as_ref().is_none_or(|(b, _)| sse < *b) {
            best = Some((sse, fit));
        }
    }
    let (_, fit) = best.expect("at least one restart");

    for (t, d) in truth.iter().enumerate() {
        let (e, c) = fit
            .dicts
            .iter()
            .enumerate()
            .map(|(e, l)| (e, (d.dot(l) / (d.norm_sq() * l.norm_sq()).sqrt()).abs()))
            .fold((0, 0.0), |a, b| if b.1 > a.1 { b } else { a });
        println!("kernel {t}: best match element {e}, |correlation| {c:.3}");
    }
    for (e, u) in fit.usage.iter().enumerate() {
        println!("element {e}: usage {u:.4}");
    }

    let mut tiles = truth.clone();
    tiles.extend(fit.dicts.iter().cloned());
    write_pgm(&tile_images(&tiles, 3)?, &out)?;
    println!("wrote {} (first row: true kernels)", out.display());
    Ok(())
}
