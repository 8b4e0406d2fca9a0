//! End-to-end MNIST run: pretraining, supervised MCEM, test-time inference.
//!
//! ```text
//! cargo run --release --example mnist -- [data_dir]
//! ```
//!
//! The data directory must hold the four IDX files. Sizes and budgets can be
//! adjusted with `MNIST_TRAIN`, `MNIST_TEST`, `MNIST_PRETRAIN`,
//! `MNIST_ITERS`.

use std::env;
use std::path::PathBuf;
use std::time::Instant;

use dgdn::io::{load_checkpoint, read_idx, save_checkpoint, Checkpoint, Dataset};
use dgdn::mcem::{infer_dataset, InferConfig, Init, TrainConfig, Trainer};
use dgdn::pretrain::{stack_pretrain, PretrainConfig};
use dgdn::svm::{argmax, fit_em};
use dgdn::{Hyperparams, LayerSpec, NetworkSpec};

fn var(name: &str, default: usize) -> usize {
    env::var(name)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(default)
}

fn main() -> dgdn::Result<()> {
    env_logger::init();
    let dir = env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data/mnist"));
    let train = read_idx(
        &dir.join("train-images-idx3-ubyte"),
        Some(&dir.join("train-labels-idx1-ubyte")),
    )?
    .truncated(var("MNIST_TRAIN", 10_000));
    let test = read_idx(
        &dir.join("t10k-images-idx3-ubyte"),
        Some(&dir.join("t10k-labels-idx1-ubyte")),
    )?
    .truncated(var("MNIST_TEST", 2_000));

    let spec = NetworkSpec::new(
        28,
        28,
        1,
        10,
        vec![
            LayerSpec::new(16, 8, 8, 3, 3),
            LayerSpec::new(32, 6, 6, 1, 1),
        ],
        Hyperparams::default(),
    )?;
    let clock = Instant::now();
    let ck_path = env::var("MNIST_CKPT").ok().map(PathBuf::from);
    let ck = match ck_path.as_ref().filter(|p| p.exists()) {
        Some(p) => load_checkpoint(p)?,
        None => {
            let ck = fit(&train, &spec, &clock)?;
            if let Some(p) = &ck_path {
                save_checkpoint(&ck, p)?;
            }
            ck
        }
    };

    let icfg = InferConfig {
        iterations: var("MNIST_T", 20),
        learning_rate: env::var("MNIST_LR")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(0.05),
        ..InferConfig::default()
    };
    let refit = train.truncated(var("MNIST_REFIT", 2_000));
    let train_feats = infer_dataset(&ck.spec, &ck.dicts, &refit.images, &icfg)?;
    let mut svm = ck.svm.clone().expect("supervised");
    fit_em(&mut svm, &train_feats, refit.labels.as_ref().unwrap(), 20)?;
    println!("refit: {:.1}s", clock.elapsed().as_secs_f64());

    let feats = infer_dataset(&ck.spec, &ck.dicts, &test.images, &icfg)?;
    let labels = test.labels.as_ref().unwrap();
    let err = |s: &dgdn::svm::SvmState| {
        feats
            .iter()
            .zip(labels)
            .filter(|(f, &l)| argmax(&s.scores(f)) != l)
            .count() as f64
            / feats.len() as f64
    };
    println!(
        "test error (trained head) {:.4}",
        err(ck.svm.as_ref().unwrap())
    );
    println!("test error (refit head)   {:.4}", err(&svm));
    println!("total: {:.1}s", clock.elapsed().as_secs_f64());
    Ok(())
}

fn fit(train: &Dataset, spec: &NetworkSpec, clock: &Instant) -> dgdn::Result<Checkpoint> {
    let pcfg = PretrainConfig {
        burn_in: var("MNIST_BURN", 20),
        collection: var("MNIST_COLLECT", 10),
        images: var("MNIST_PRETRAIN", 500),
        prune_threshold: 0.0,
        ..PretrainConfig::default()
    };
    let pre = stack_pretrain(&train.images, spec, &pcfg)?;
    println!("pretrain: {:.1}s", clock.elapsed().as_secs_f64());

    let tcfg = TrainConfig {
        iterations: var("MNIST_ITERS", 50),
        minibatch: 256,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(
        train,
        &pre.spec,
        &tcfg,
        Init::Pretrained {
            dicts: pre.dicts,
            states: pre.states,
        },
    )?;
    for _ in 0..tcfg.iterations {
        let m = trainer.step()?;
        if m.iteration % 10 == 0 {
            println!(
                "iter {:4} qbar {:.4e} hinge {:.3} ({:.1}s)",
                m.iteration,
                m.qbar,
                m.hinge,
                clock.elapsed().as_secs_f64()
            );
        }
    }
    println!("train: {:.1}s", clock.elapsed().as_secs_f64());
    Ok(trainer.checkpoint())
}
