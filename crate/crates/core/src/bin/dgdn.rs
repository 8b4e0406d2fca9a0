use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use dgdn::distributions::RngStream;
use dgdn::gibbs::purpose;
use dgdn::io::{
    load_checkpoint, parse_config, read_idx, save_checkpoint, tile_images, write_pgm, Checkpoint,
    Config, Dataset, MetricsWriter,
};
use dgdn::mcem::{infer_dataset, model_average, train, Init};
use dgdn::pretrain::stack_pretrain;
use dgdn::svm::argmax;
use dgdn::tasks::{dict_grid, generate, grid_cols, inpaint, GenerateOptions, PixelMask};
use dgdn::{Error, Result};

#[derive(Parser)]
#[command(
    name = "dgdn",
    version,
    about = "Deep generative deconvolutional image model"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Global {
    /// Model and run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Checkpoint to read (or resume from, for `train`).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Output path.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Per-iteration metrics CSV.
    #[arg(long, global = true)]
    metrics: Option<PathBuf>,
    /// IDX image file.
    #[arg(long, global = true)]
    images: Option<PathBuf>,
    /// IDX label file.
    #[arg(long, global = true)]
    labels: Option<PathBuf>,
    /// Use only the first N images.
    #[arg(long, global = true)]
    limit: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Layer-wise pretraining; writes a checkpoint.
    Pretrain,
    /// MCEM training; writes a checkpoint.
    Train {
        /// Pretrain before MCEM.
        #[arg(long)]
        pretrain: bool,
        /// Write 0 in the seconds column of the metrics.
        #[arg(long)]
        fixed_clock: bool,
    },
    /// Classifies labelled images and prints `test_error=<rate>`.
    Test {
        /// Refit the classifier on features inferred for these images first.
        #[arg(long)]
        refit_images: Option<PathBuf>,
        #[arg(long)]
        refit_labels: Option<PathBuf>,
    },
    /// Draws images from the model and writes them as one PGM grid.
    Generate {
        #[arg(long, default_value_t = 16)]
        count: usize,
    },
    /// Hides a random subset of pixels and fills them in.
    Inpaint {
        /// Fraction of pixels kept.
        #[arg(long, default_value_t = 0.5)]
        keep: f64,
    },
    /// Writes the data-plane projections of one layer's dictionary.
    Viz {
        #[arg(long, default_value_t = 0)]
        layer: usize,
    },
    /// Classifies by averaging several checkpoints' decision values.
    Average {
        /// Comma-separated checkpoint paths.
        #[arg(long, value_delimiter = ',', required = true)]
        checkpoints: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(t) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn need<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    v.as_deref()
        .ok_or_else(|| Error::InvalidParameter(format!("--{flag} is required")))
}

fn config(g: &Global) -> Result<Config> {
    let mut c = parse_config(need(&g.config, "config")?)?;
    if let Some(s) = g.seed {
        c.train.seed = s;
        c.pretrain.seed = s;
        c.test.seed = s;
    }
    Ok(c)
}

fn dataset(g: &Global, images: &Option<PathBuf>, labels: &Option<PathBuf>) -> Result<Dataset> {
    let d = read_idx(need(images, "images")?, labels.as_deref())?;
    Ok(match g.limit {
        Some(n) => d.truncated(n),
        None => d,
    })
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.cmd {
        Command::Pretrain => {
            let cfg = config(g)?;
            let data = dataset(g, &g.images, &None)?;
            data.check_against(&cfg.spec)?;
            let pre = stack_pretrain(&data.images, &cfg.spec, &cfg.pretrain)?;
            let mut ck = Checkpoint::new(pre.spec.clone(), pre.dicts, None);
            if pre.spec.supervised() {
                ck.svm = Some(dgdn::svm::SvmState::new(
                    pre.spec.classes,
                    pre.spec.feature_len() + 1,
                    pre.spec.hyper.svm_gamma,
                    pre.spec.hyper.beta_floor,
                ));
            }
            ck.data_range = data.range();
            save_checkpoint(&ck, need(&g.out, "out")?)
        }
        Command::Train {
            pretrain,
            fixed_clock,
        } => {
            let cfg = config(g)?;
            let data = dataset(g, &g.images, &g.labels)?;
            let (spec, init) = if let Some(p) = &g.checkpoint {
                let ck = load_checkpoint(p)?;
                (ck.spec.clone(), Init::Checkpoint(Box::new(ck)))
            } else if *pretrain {
                let pre = stack_pretrain(&data.images, &cfg.spec, &cfg.pretrain)?;
                (
                    pre.spec.clone(),
                    Init::Pretrained {
                        dicts: pre.dicts,
                        states: pre.states,
                    },
                )
            } else {
                (cfg.spec.clone(), Init::Prior)
            };
            let out = need(&g.out, "out")?.to_path_buf();
            let mut metrics = match &g.metrics {
                Some(p) => Some(MetricsWriter::create(p, *fixed_clock)?),
                None => None,
            };
            let every = cfg.train.checkpoint_every as u64;
            let ck = train(&data, &spec, &cfg.train, init, |m, t| {
                if let Some(w) = metrics.as_mut() {
                    w.write(m)?;
                }
                info!(
                    "iter {} qbar {:.6e} hinge {:.4}",
                    m.iteration, m.qbar, m.hinge
                );
                if every > 0 && m.iteration % every == 0 {
                    save_checkpoint(&t.checkpoint(), &out)?;
                }
                Ok(())
            })?;
            save_checkpoint(&ck, &out)
        }
        Command::Test {
            refit_images,
            refit_labels,
        } => {
            let cfg = config(g)?;
            let mut ck = load_checkpoint(need(&g.checkpoint, "checkpoint")?)?;
            if refit_images.is_some() {
                let train_data = dataset(g, refit_images, refit_labels)?;
                refit_head(&mut ck, &train_data, &cfg)?;
            }
            let data = dataset(g, &g.images, &g.labels)?;
            let labels = data
                .labels
                .as_ref()
                .ok_or_else(|| Error::InvalidParameter("--labels is required".into()))?;
            let svm = ck
                .svm
                .as_ref()
                .ok_or_else(|| Error::InvalidParameter("checkpoint has no classifier".into()))?;
            let feats = infer_dataset(&ck.spec, &ck.dicts, &data.images, &cfg.test)?;
            let wrong = feats
                .iter()
                .zip(labels)
                .filter(|(f, &l)| argmax(&svm.scores(f)) != l)
                .count();
            println!("test_error={}", wrong as f64 / data.len() as f64);
            Ok(())
        }
        Command::Generate { count } => {
            let ck = load_checkpoint(need(&g.checkpoint, "checkpoint")?)?;
            let imgs = generate(
                &ck,
                *count,
                &GenerateOptions::default(),
                g.seed.unwrap_or(0),
            )?;
            let grid = tile_images(&mono(&imgs), grid_cols(imgs.len()))?;
            write_pgm(&grid, need(&g.out, "out")?)
        }
        Command::Inpaint { keep } => {
            let cfg = config(g)?;
            let ck = load_checkpoint(need(&g.checkpoint, "checkpoint")?)?;
            let data = dataset(g, &g.images, &None)?;
            let mut rows = Vec::new();
            for (n, im) in data.images.iter().enumerate() {
                let mut rng = RngStream::derive(cfg.test.seed, purpose::TASK, n as u64, 1);
                let mask = PixelMask::random(im.height(), im.width(), *keep, &mut rng)?;
                let out = inpaint(&ck.spec, &ck.dicts, im, &mask, &cfg.test, &mut rng)?;
                let mut observed = im.clone();
                let w = mask.weights(im.bands());
                observed
                    .data_mut()
                    .iter_mut()
                    .zip(&w)
                    .for_each(|(v, w)| *v *= w);
                rows.extend([im.clone(), observed, out.completed]);
            }
            let grid = tile_images(&mono(&rows), 3)?;
            write_pgm(&grid, need(&g.out, "out")?)
        }
        Command::Viz { layer } => {
            let ck = load_checkpoint(need(&g.checkpoint, "checkpoint")?)?;
            let grid = dict_grid(&ck.spec, &ck.dicts, *layer)?;
            write_pgm(&grid, need(&g.out, "out")?)
        }
        Command::Average { checkpoints } => {
            let cfg = config(g)?;
            let cks = checkpoints
                .iter()
                .map(|p| load_checkpoint(p))
                .collect::<Result<Vec<_>>>()?;
            let data = dataset(g, &g.images, &g.labels)?;
            let labels = data
                .labels
                .as_ref()
                .ok_or_else(|| Error::InvalidParameter("--labels is required".into()))?;
            let mut wrong = 0;
            for (n, (im, &l)) in data.images.iter().zip(labels).enumerate() {
                let (pred, _) = model_average(&cks, im, &cfg.test, n as u64)?;
                wrong += (pred != l) as usize;
            }
            println!("test_error={}", wrong as f64 / data.len() as f64);
            Ok(())
        }
    }
}

/// Refits every class's weights on features inferred for `data`.
fn refit_head(ck: &mut Checkpoint, data: &Dataset, cfg: &Config) -> Result<()> {
    let labels = data
        .labels
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter("--refit-labels is required".into()))?;
    let feats = infer_dataset(&ck.spec, &ck.dicts, &data.images, &cfg.test)?;
    let svm = ck
        .svm
        .as_mut()
        .ok_or_else(|| Error::InvalidParameter("checkpoint has no classifier".into()))?;
    dgdn::svm::fit_em(svm, &feats, labels, 20)?;
    Ok(())
}

fn mono(imgs: &[dgdn::Tensor3]) -> Vec<dgdn::Tensor3> {
    imgs.iter()
        .map(|t| {
            if t.bands() == 1 {
                return t.clone();
            }
            let mut out = dgdn::Tensor3::zeros(t.height(), t.width(), 1);
            for b in 0..t.bands() {
                out.data_mut()
                    .iter_mut()
                    .zip(t.band(b))
                    .for_each(|(o, v)| *o += v / t.bands() as f64);
            }
            out
        })
        .collect()
}
