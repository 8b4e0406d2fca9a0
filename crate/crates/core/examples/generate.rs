//! Draws images from a two-layer model with random dictionaries and writes
//! them as a PGM grid.
//!
//! ```text
//! cargo run --release --example generate -- [out.pgm] [checkpoint]
//! ```
//!
//! With a checkpoint the trained dictionaries are used instead.

use std::env;
use std::path::PathBuf;

use dgdn::distributions::RngStream;
use dgdn::io::{load_checkpoint, tile_images, write_pgm, Checkpoint};
use dgdn::tasks::{generate, grid_cols, GenerateOptions};
use dgdn::{DictionarySet, Hyperparams, LayerSpec, NetworkSpec};

fn main() -> dgdn::Result<()> {
    let mut args = env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "generated.pgm".into()));
    let ck = match args.next() {
        Some(path) => load_checkpoint(path.as_ref())?,
        None => {
            let spec = NetworkSpec::new(
                28,
                28,
                1,
                0,
                vec![LayerSpec::new(8, 8, 8, 3, 3), LayerSpec::new(6, 6, 6, 1, 1)],
                Hyperparams::default(),
            )?;
            let dicts = DictionarySet::sample_prior(&spec, 1.0, &mut RngStream::new(1, 0));
            Checkpoint::new(spec, dicts, None)
        }
    };
    let opts = GenerateOptions {
        clamp: false,
        ..GenerateOptions::default()
    };
    let images = generate(&ck, 16, &opts, 7)?;
    for (n, im) in images.iter().enumerate().take(4) {
        let (lo, hi) = im.min_max();
        println!("draw {n}: range [{lo:.3}, {hi:.3}]");
    }
    write_pgm(&tile_images(&images, grid_cols(images.len()))?, &out)?;
    println!("wrote {}", out.display());
    Ok(())
}
