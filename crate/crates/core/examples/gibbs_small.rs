//! Small-data training by full Gibbs sampling, then classification by
//! averaging the decision values of every kept sample.
//!
//! ```text
//! cargo run --release --example gibbs_small
//! ```
//!
//! The data are vertical (class 0) and horizontal (class 1) bars on a 10x10
//! canvas.

use dgdn::distributions::RngStream;
use dgdn::io::{Checkpoint, Dataset};
use dgdn::mcem::{gibbs_train, model_average, InferConfig, Init, TrainConfig};
use dgdn::{Hyperparams, LayerSpec, NetworkSpec, Tensor3};
use rand::Rng;

fn bars(n: usize, seed: u64) -> dgdn::Result<Dataset> {
    let mut rng = RngStream::new(seed, 0);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let class = i % 2;
        let at = rng.random_range(1..8usize);
        let mut t = Tensor3::zeros(10, 10, 1);
        for y in 0..10 {
            for x in 0..10 {
                let pos = if class == 0 { x } else { y };
                let v = if pos == at || pos == at + 1 { 1.0 } else { 0.0 };
                t.set(y, x, 0, v + 0.02 * rng.random_range(-1.0..1.0));
            }
        }
        images.push(t);
        labels.push(class);
    }
    Dataset::new(images, Some(labels), 2)
}

fn main() -> dgdn::Result<()> {
    let spec = NetworkSpec::new(
        10,
        10,
        1,
        2,
        vec![LayerSpec::new(4, 3, 3, 2, 2), LayerSpec::new(4, 4, 4, 1, 1)],
        Hyperparams::default(),
    )?;
    let train = bars(20, 1)?;
    let test = bars(20, 2)?;
    let cfg = TrainConfig {
        gibbs_burn_in: 300,
        gibbs_collection: 100,
        gibbs_thinning: 20,
        seed: 4,
        init_scale: 0.5,
        ..TrainConfig::default()
    };
    let run = gibbs_train(&train, &spec, &cfg, Init::Prior)?;
    println!("kept {} samples", run.samples.len());

    let models: Vec<Checkpoint> = run
        .samples
        .into_iter()
        .map(|(d, svm)| Checkpoint::new(spec.clone(), d, svm))
        .collect();
    let infer = InferConfig::default();
    let labels = test.labels.as_ref().expect("labelled");
    let mut errors = 0;
    for (n, (im, &y)) in test.images.iter().zip(labels).enumerate() {
        let (pred, _) = model_average(&models, im, &infer, n as u64)?;
        errors += (pred != y) as usize;
    }
    println!(
        "held-out error {:.3} ({errors} of {})",
        errors as f64 / test.len() as f64,
        test.len()
    );
    Ok(())
}
