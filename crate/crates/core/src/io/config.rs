//! Plain-text run configuration.
//!
//! ```text
//! # comment
//! input_height = 28
//! input_width = 28
//! channels = 1
//! classes = 10
//!
//! [layer]            # bottom layer first, one section per layer
//! dicts = 39
//! dict_height = 8
//! dict_width = 8
//! pool_y = 3
//! pool_x = 3
//!
//! [hyper]            # a_s b_s a_e b_e a_w b_w svm_gamma beta_floor
//! [train]            # fields of TrainConfig
//! [pretrain]         # fields of PretrainConfig
//! [test]             # fields of InferConfig
//! ```
//!
//! Every key is optional except the four top-level ones and the five keys of
//! each `[layer]`. Unknown keys and sections are errors.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::mcem::{InferConfig, TrainConfig};
use crate::model::{Hyperparams, LayerSpec, NetworkSpec};
use crate::pretrain::PretrainConfig;

/// Everything a configuration file describes.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub spec: NetworkSpec,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub test: InferConfig,
}

pub fn parse_config(path: &Path) -> Result<Config> {
    let text = fs::read_to_string(path)?;
    parse_config_str(&text)
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    Top,
    Layer,
    Hyper,
    Train,
    Pretrain,
    Test,
}

#[derive(Default)]
struct LayerDraft {
    line: usize,
    vals: [Option<usize>; 5],
}

const LAYER_KEYS: [&str; 5] = ["dicts", "dict_height", "dict_width", "pool_y", "pool_x"];

pub fn parse_config_str(text: &str) -> Result<Config> {
    let mut top: [Option<usize>; 4] = [None; 4];
    let top_keys = ["input_height", "input_width", "channels", "classes"];
    let mut layers: Vec<LayerDraft> = Vec::new();
    let mut hyper = Hyperparams::default();
    let mut train = TrainConfig::default();
    let mut pretrain = PretrainConfig::default();
    let mut test = InferConfig::default();
    let mut section = Section::Top;

    for (no, raw) in text.lines().enumerate() {
        let line_no = no + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Config { line: line_no, msg };
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| err(format!("unterminated section header {line:?}")))?
                .trim();
            section = match name {
                "layer" => {
                    layers.push(LayerDraft {
                        line: line_no,
                        ..Default::default()
                    });
                    Section::Layer
                }
                "hyper" => Section::Hyper,
                "train" => Section::Train,
                "pretrain" => Section::Pretrain,
                "test" => Section::Test,
                other => return Err(err(format!("unknown section [{other}]"))),
            };
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
        if value.is_empty() {
            return Err(err(format!("missing value for {key}")));
        }
        let unknown = || err(format!("unknown key {key:?}"));
        match section {
            Section::Top => {
                let i = top_keys
                    .iter()
                    .position(|k| *k == key)
                    .ok_or_else(unknown)?;
                top[i] = Some(num(value, key, line_no)?);
            }
            Section::Layer => {
                let i = LAYER_KEYS
                    .iter()
                    .position(|k| *k == key)
                    .ok_or_else(unknown)?;
                layers.last_mut().expect("inside a layer section").vals[i] =
                    Some(num(value, key, line_no)?);
            }
            Section::Hyper => {
                let v: f64 = num(value, key, line_no)?;
                let slot = match key {
                    "a_s" => &mut hyper.a_s,
                    "b_s" => &mut hyper.b_s,
                    "a_e" => &mut hyper.a_e,
                    "b_e" => &mut hyper.b_e,
                    "a_w" => &mut hyper.a_w,
                    "b_w" => &mut hyper.b_w,
                    "svm_gamma" => &mut hyper.svm_gamma,
                    "beta_floor" => &mut hyper.beta_floor,
                    _ => return Err(unknown()),
                };
                *slot = v;
            }
            Section::Train => {
                if !set_train(&mut train, key, value, line_no)? {
                    return Err(unknown());
                }
            }
            Section::Pretrain => {
                if !set_pretrain(&mut pretrain, key, value, line_no)? {
                    return Err(unknown());
                }
            }
            Section::Test => {
                if !set_test(&mut test, key, value, line_no)? {
                    return Err(unknown());
                }
            }
        }
    }

    let mut dims = [0usize; 4];
    for (i, v) in top.iter().enumerate() {
        dims[i] = v.ok_or_else(|| Error::Config {
            line: 0,
            msg: format!("missing top-level key {}", top_keys[i]),
        })?;
    }
    if layers.is_empty() {
        return Err(Error::Config {
            line: 0,
            msg: "no [layer] sections".into(),
        });
    }
    let mut specs = Vec::with_capacity(layers.len());
    for d in &layers {
        let mut v = [0usize; 5];
        for (i, x) in d.vals.iter().enumerate() {
            v[i] = x.ok_or_else(|| Error::Config {
                line: d.line,
                msg: format!("[layer] is missing {}", LAYER_KEYS[i]),
            })?;
        }
        specs.push(LayerSpec::new(v[0], v[1], v[2], v[3], v[4]));
    }
    let spec = NetworkSpec::new(dims[0], dims[1], dims[2], dims[3], specs, hyper).map_err(|e| {
        Error::Config {
            line: 0,
            msg: e.to_string(),
        }
    })?;
    let check = |r: Result<()>, what: &str| {
        r.map_err(|e| Error::Config {
            line: 0,
            msg: format!("[{what}] {e}"),
        })
    };
    check(train.validate(), "train")?;
    check(pretrain.validate(), "pretrain")?;
    check(test.validate(), "test")?;
    Ok(Config {
        spec,
        train,
        pretrain,
        test,
    })
}

fn num<T: FromStr>(value: &str, key: &str, line: usize) -> Result<T> {
    value.parse().map_err(|_| Error::Config {
        line,
        msg: format!("cannot parse {value:?} for {key}"),
    })
}

/// Returns `false` for an unknown key.
fn set_train(c: &mut TrainConfig, key: &str, v: &str, line: usize) -> Result<bool> {
    match key {
        "minibatch" => c.minibatch = num(v, key, line)?,
        "samples" => c.samples = num(v, key, line)?,
        "sweeps_per_sample" => c.sweeps_per_sample = num(v, key, line)?,
        "iterations" => c.iterations = num(v, key, line)?,
        "seed" => c.seed = num(v, key, line)?,
        "learning_rate" => c.learning_rate = num(v, key, line)?,
        "lr_decay" => c.lr_decay = num(v, key, line)?,
        "lr_decay_every" => c.lr_decay_every = num(v, key, line)?,
        "rmsprop_decay" => c.rmsprop_decay = num(v, key, line)?,
        "beta_every" => c.beta_every = num(v, key, line)?,
        "checkpoint_every" => c.checkpoint_every = num(v, key, line)?,
        "init_scale" => c.init_scale = num(v, key, line)?,
        "gibbs_burn_in" => c.gibbs_burn_in = num(v, key, line)?,
        "gibbs_collection" => c.gibbs_collection = num(v, key, line)?,
        "gibbs_thinning" => c.gibbs_thinning = num(v, key, line)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn set_pretrain(c: &mut PretrainConfig, key: &str, v: &str, line: usize) -> Result<bool> {
    match key {
        "burn_in" => c.burn_in = num(v, key, line)?,
        "collection" => c.collection = num(v, key, line)?,
        "images" => c.images = num(v, key, line)?,
        "prune_threshold" => c.prune_threshold = num(v, key, line)?,
        "seed" => c.seed = num(v, key, line)?,
        "init_scale" => c.init_scale = num(v, key, line)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn set_test(c: &mut InferConfig, key: &str, v: &str, line: usize) -> Result<bool> {
    match key {
        "iterations" => c.iterations = num(v, key, line)?,
        "tol" => c.tol = num(v, key, line)?,
        "learning_rate" => c.learning_rate = num(v, key, line)?,
        "rmsprop_decay" => c.rmsprop_decay = num(v, key, line)?,
        "sweeps" => c.sweeps = num(v, key, line)?,
        "seed" => c.seed = num(v, key, line)?,
        _ => return Ok(false),
    }
    Ok(true)
}
