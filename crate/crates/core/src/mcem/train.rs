use std::time::Instant;

use rand::seq::index::sample;
use rayon::prelude::*;

use super::infer::initial_state;
use super::objective::{accumulate_likelihood_grad, backprop_delta, sample_energy};
use super::rmsprop::{rmsprop_step, RmspropState};
use crate::distributions::RngStream;
use crate::error::{Error, Result};
use crate::gibbs::{
    gibbs_sweep, local_sweep, purpose, refresh_betas, SvmCoupling, SweepMode, SweepOptions,
};
use crate::io::{Checkpoint, Dataset, RngSnapshot};
use crate::model::{decode, DictionarySet, LatentState, NetworkSpec};
use crate::svm::{omega_inverse, target, update_beta, SvmState};

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub minibatch: usize,
    /// Monte Carlo samples per image and E-step.
    pub samples: usize,
    /// Gibbs sweeps between consecutive samples.
    pub sweeps_per_sample: usize,
    pub iterations: usize,
    pub seed: u64,
    pub learning_rate: f64,
    /// The learning rate is multiplied by `lr_decay` every `lr_decay_every`
    /// iterations (0 disables the schedule).
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub rmsprop_decay: f64,
    /// Refresh the SVM weights every this many iterations.
    pub beta_every: usize,
    /// Write a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: usize,
    /// Scale of the prior draw used when no pretrained dictionaries are given.
    pub init_scale: f64,
    /// Full-Gibbs protocol for small data.
    pub gibbs_burn_in: usize,
    pub gibbs_collection: usize,
    pub gibbs_thinning: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            minibatch: 256,
            samples: 1,
            sweeps_per_sample: 1,
            iterations: 1000,
            seed: 0,
            learning_rate: 1e-3,
            lr_decay: 1.0,
            lr_decay_every: 0,
            rmsprop_decay: 0.95,
            beta_every: 1,
            checkpoint_every: 0,
            init_scale: 0.1,
            gibbs_burn_in: 1000,
            gibbs_collection: 500,
            gibbs_thinning: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("minibatch", self.minibatch),
            ("samples", self.samples),
            ("sweeps_per_sample", self.sweeps_per_sample),
            ("beta_every", self.beta_every),
            ("gibbs_thinning", self.gibbs_thinning),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::param(format!("{name} must be positive")));
            }
        }
        let reals = [
            ("learning_rate", self.learning_rate),
            ("lr_decay", self.lr_decay),
            ("init_scale", self.init_scale),
        ];
        for (name, v) in reals {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::param(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.rmsprop_decay) {
            return Err(Error::param("rmsprop_decay must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, iteration: u64) -> f64 {
        if self.lr_decay_every == 0 {
            return self.learning_rate;
        }
        self.learning_rate
            * self
                .lr_decay
                .powi((iteration / self.lr_decay_every as u64) as i32)
    }
}

/// Starting point of training.
#[derive(Debug, Clone)]
pub enum Init {
    /// Dictionaries drawn from the prior (scaled by `init_scale`), latent
    /// states drawn at random.
    Prior,
    /// Dictionaries and per-image states from pretraining. If there are
    /// fewer states than images, the remaining images are initialised
    /// bottom-up.
    Pretrained {
        dicts: DictionarySet,
        states: Vec<LatentState>,
    },
    /// Resume the globals of a checkpoint; latent states start at random.
    Checkpoint(Box<Checkpoint>),
}

/// One row of the metrics stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationMetrics {
    pub iteration: u64,
    /// Objective on the minibatch samples (before the M-step).
    pub qbar: f64,
    /// Mean over training images of the one-vs-all hinge losses summed over
    /// classes (0 when unsupervised).
    pub hinge: f64,
    pub seconds: f64,
}

impl IterationMetrics {
    pub const CSV_HEADER: &'static str = "iter,qbar,hinge,seconds";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.12e},{:.12e},{:.6}",
            self.iteration, self.qbar, self.hinge, self.seconds
        )
    }
}

/// Random starting state for MCEM: every lower block active at a uniformly
/// chosen position, every top spike on with zero weight.
pub fn random_state(spec: &NetworkSpec, rng: &mut RngStream) -> LatentState {
    use rand::Rng;
    let mut st = LatentState::new(spec);
    for l in 0..spec.num_layers() {
        for grid in st.z[l].iter_mut() {
            let p = grid.block_len();
            for i in 0..grid.blocks_y() {
                for j in 0..grid.blocks_x() {
                    grid.set_category(i, j, 1 + rng.random_range(0..p));
                }
            }
        }
    }
    st
}

/// Stochastic Monte Carlo EM.
///
/// Each iteration draws a minibatch, advances the persistent Gibbs chain of
/// every selected image with the globals frozen (E-step), takes one RMSprop
/// ascent step on the dictionaries along the Monte Carlo estimate of the
/// objective gradient, and refreshes the SVM weights in closed form from the
/// latest averaged features and scales of all training images.
pub struct Trainer<'a> {
    spec: NetworkSpec,
    cfg: TrainConfig,
    data: &'a Dataset,
    pub dicts: DictionarySet,
    pub svm: Option<SvmState>,
    pub states: Vec<LatentState>,
    feat_bar: Vec<Vec<f64>>,
    lambda_bar: Vec<Vec<f64>>,
    rms: RmspropState,
    rng: RngStream,
    iteration: u64,
    clock: Instant,
    data_range: (f64, f64),
}

impl<'a> Trainer<'a> {
    pub fn new(
        data: &'a Dataset,
        spec: &NetworkSpec,
        cfg: &TrainConfig,
        init: Init,
    ) -> Result<Self> {
        cfg.validate()?;
        data.check_against(spec)?;
        let supervised = spec.supervised();
        if supervised && data.labels.is_none() {
            return Err(Error::param("a supervised model needs labels"));
        }
        let mut init_rng = RngStream::derive(cfg.seed, purpose::INIT, 0, 0);
        let fresh_states = |rng: &mut RngStream| -> Vec<LatentState> {
            (0..data.len()).map(|_| random_state(spec, rng)).collect()
        };
        let dim = spec.feature_len() + 1;
        let mut rng = RngStream::derive(cfg.seed, purpose::MINIBATCH, 0, 0);
        let (dicts, states, svm, rms_v, iteration) = match init {
            Init::Prior => {
                let d = DictionarySet::sample_prior(spec, cfg.init_scale, &mut init_rng);
                (d, fresh_states(&mut init_rng), None, None, 0)
            }
            Init::Pretrained { dicts, mut states } => {
                if states.len() > data.len() {
                    return Err(Error::shape("more pretrained states than training images"));
                }
                // Images left out of pretraining start from a bottom-up fit.
                for im in &data.images[states.len()..] {
                    states.push(initial_state(spec, &dicts, im, None));
                }
                (dicts, states, None, None, 0)
            }
            Init::Checkpoint(ck) => {
                if ck.spec != *spec {
                    return Err(Error::param(
                        "checkpoint was written for a different architecture",
                    ));
                }
                rng = ck.rng.restore();
                let rms = if ck.rmsprop.is_empty() {
                    None
                } else {
                    Some(ck.rmsprop.clone())
                };
                (
                    ck.dicts.clone(),
                    fresh_states(&mut init_rng),
                    ck.svm.clone(),
                    rms,
                    ck.iteration,
                )
            }
        };
        let svm = if supervised {
            Some(svm.unwrap_or_else(|| {
                SvmState::new(
                    spec.classes,
                    dim,
                    spec.hyper.svm_gamma,
                    spec.hyper.beta_floor,
                )
            }))
        } else {
            None
        };
        let mut states = states;
        for st in states.iter_mut() {
            if st.lambdas.len() != spec.classes {
                st.lambdas = vec![1.0; spec.classes];
            }
        }
        let feat_bar = states.iter().map(|s| s.features()).collect();
        let lambda_bar = states.iter().map(|s| s.lambdas.clone()).collect();
        let mut rms = RmspropState::new(dicts.param_len(), cfg.rmsprop_decay, cfg.learning_rate);
        if let Some(v) = rms_v {
            rms.v = v;
        }
        Ok(Trainer {
            spec: spec.clone(),
            cfg: cfg.clone(),
            data,
            dicts,
            svm,
            states,
            feat_bar,
            lambda_bar,
            rms,
            rng,
            iteration,
            clock: Instant::now(),
            data_range: data.range(),
        })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// Averaged features of every training image from its latest E-step.
    pub fn features(&self) -> &[Vec<f64>] {
        &self.feat_bar
    }

    pub fn step(&mut self) -> Result<IterationMetrics> {
        let n = self.data.len();
        let b = self.cfg.minibatch.min(n);
        let mut batch: Vec<usize> = sample(&mut self.rng, n, b).into_vec();
        batch.sort_unstable();

        let spec = &self.spec;
        let dicts = &self.dicts;
        let svm = self.svm.as_ref();
        let data = self.data;
        let cfg = &self.cfg;
        let it = self.iteration;
        let ns = cfg.samples;
        let opts = SweepOptions::default();

        // Move the selected chains out so the workers own them.
        let mut work: Vec<(usize, LatentState)> = batch
            .iter()
            .map(|&i| {
                (
                    i,
                    std::mem::replace(&mut self.states[i], LatentState::new(spec)),
                )
            })
            .collect();

        let chunk = 8;
        let partials: Vec<Result<Partial>> = work
            .par_chunks_mut(chunk)
            .map(|items| {
                let mut part = Partial::new(spec);
                for (idx, st) in items.iter_mut() {
                    let image = &data.images[*idx];
                    let label = data.labels.as_ref().map(|l| l[*idx]);
                    let mut rng = RngStream::derive(cfg.seed, purpose::LOCAL, it, *idx as u64);
                    let coupling = match (svm, label) {
                        (Some(s), Some(l)) => Some(SvmCoupling {
                            betas: &s.betas,
                            gamma: s.gamma,
                            label: l,
                        }),
                        _ => None,
                    };
                    let mut fsum = vec![0.0; spec.feature_len() + 1];
                    let mut lsum = vec![0.0; spec.classes];
                    let mut energy = 0.0;
                    for _ in 0..ns {
                        for _ in 0..cfg.sweeps_per_sample {
                            local_sweep(spec, dicts, image, st, None, coupling, &opts, &mut rng)?;
                        }
                        let acts = decode(spec, dicts, st);
                        let mut e = image.clone();
                        e.add_scaled(-1.0, acts.reconstruction());
                        let deltas = backprop_delta(spec, dicts, st, &e, None)?;
                        accumulate_likelihood_grad(
                            spec,
                            &deltas,
                            &acts,
                            1.0 / ns as f64,
                            &mut part.grad,
                        );
                        energy += sample_energy(spec, dicts, svm, image, label, st, None)?;
                        for (a, v) in fsum.iter_mut().zip(st.features()) {
                            *a += v;
                        }
                        for (a, v) in lsum.iter_mut().zip(&st.lambdas) {
                            *a += v;
                        }
                    }
                    fsum.iter_mut().for_each(|v| *v /= ns as f64);
                    lsum.iter_mut().for_each(|v| *v /= ns as f64);
                    part.energy += energy / ns as f64;
                    part.feats.push((*idx, fsum, lsum));
                }
                Ok(part)
            })
            .collect();

        for (i, st) in work {
            self.states[i] = st;
        }
        let mut grad = DictionarySet::zeros(spec);
        let mut energy = 0.0;
        for p in partials {
            let p = p?;
            for (g, pg) in grad.iter_mut().zip(p.grad.iter()) {
                g.add_scaled(1.0, pg);
            }
            energy += p.energy;
            for (idx, f, l) in p.feats {
                self.feat_bar[idx] = f;
                self.lambda_bar[idx] = l;
            }
        }
        let qbar = -energy - 0.5 * self.dicts.norm_sq();
        if !qbar.is_finite() {
            return Err(Error::Divergence {
                iteration: self.iteration,
                msg: format!("objective is {qbar}"),
            });
        }

        // M-step on the dictionaries: likelihood part scaled to the full data set.
        let scale = n as f64 / b as f64;
        let mut g = Vec::with_capacity(self.dicts.param_len());
        for (gt, d) in grad.iter().zip(self.dicts.iter()) {
            g.extend(
                gt.data()
                    .iter()
                    .zip(d.data())
                    .map(|(gv, dv)| scale * gv - dv),
            );
        }
        let mut flat = self.dicts.to_flat();
        self.rms.lr = self.cfg.learning_rate_at(self.iteration);
        rmsprop_step(&mut flat, &g, &mut self.rms);
        self.dicts.copy_from_flat(&flat)?;
        if !self.dicts.is_finite() {
            return Err(Error::Divergence {
                iteration: self.iteration,
                msg: "dictionaries became non-finite".into(),
            });
        }

        if self.svm.is_some() && (self.iteration + 1).is_multiple_of(self.cfg.beta_every as u64) {
            self.update_betas()?;
        }
        let hinge = self.hinge();
        self.iteration += 1;
        Ok(IterationMetrics {
            iteration: self.iteration,
            qbar,
            hinge,
            seconds: self.clock.elapsed().as_secs_f64(),
        })
    }

    fn update_betas(&mut self) -> Result<()> {
        let labels = self
            .data
            .labels
            .as_ref()
            .expect("supervised data has labels");
        let svm = self.svm.as_mut().expect("supervised");
        let (gamma, floor) = (svm.gamma, svm.beta_floor);
        let feats = &self.feat_bar;
        let lambda_bar = &self.lambda_bar;
        let new: Vec<Vec<f64>> = (0..svm.classes())
            .into_par_iter()
            .map(|cls| {
                let ys: Vec<f64> = labels.iter().map(|&l| target(l, cls)).collect();
                let lams: Vec<f64> = lambda_bar.iter().map(|l| l[cls]).collect();
                update_beta(
                    feats,
                    &ys,
                    &lams,
                    &omega_inverse(&svm.betas[cls], floor),
                    gamma,
                )
            })
            .collect::<Result<_>>()?;
        svm.betas = new;
        Ok(())
    }

    /// Mean summed one-vs-all hinge loss over the training images.
    pub fn hinge(&self) -> f64 {
        let (Some(svm), Some(labels)) = (&self.svm, &self.data.labels) else {
            return 0.0;
        };
        let total: f64 = self
            .feat_bar
            .iter()
            .zip(labels)
            .map(|(f, &l)| {
                svm.betas
                    .iter()
                    .enumerate()
                    .map(|(cls, b)| (1.0 - target(l, cls) * crate::svm::dot(b, f)).max(0.0))
                    .sum::<f64>()
            })
            .sum();
        total / self.feat_bar.len() as f64
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            spec: self.spec.clone(),
            dicts: self.dicts.clone(),
            svm: self.svm.clone(),
            rmsprop: self.rms.v.clone(),
            rng: RngSnapshot::of(&self.rng),
            iteration: self.iteration,
            data_range: self.data_range,
        }
    }
}

struct Partial {
    grad: DictionarySet,
    energy: f64,
    feats: Vec<(usize, Vec<f64>, Vec<f64>)>,
}

impl Partial {
    fn new(spec: &NetworkSpec) -> Self {
        Partial {
            grad: DictionarySet::zeros(spec),
            energy: 0.0,
            feats: Vec::new(),
        }
    }
}

/// Runs [`Trainer`] for `cfg.iterations` iterations, handing every metrics
/// row to `on_metrics`, and returns the final checkpoint.
pub fn train(
    data: &Dataset,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    init: Init,
    mut on_metrics: impl FnMut(&IterationMetrics, &Trainer<'_>) -> Result<()>,
) -> Result<Checkpoint> {
    let mut t = Trainer::new(data, spec, cfg, init)?;
    for _ in 0..cfg.iterations {
        let m = t.step()?;
        on_metrics(&m, &t)?;
    }
    Ok(t.checkpoint())
}

/// Result of the full-Gibbs protocol: thinned posterior samples of the
/// globals, plus the final chain state.
#[derive(Debug, Clone)]
pub struct GibbsRun {
    pub samples: Vec<(DictionarySet, Option<SvmState>)>,
    pub states: Vec<LatentState>,
}

/// Small-data regime: Gibbs sampling over dictionaries, SVM weights and all
/// latent variables. After `gibbs_burn_in` sweeps, `gibbs_collection` sweeps
/// are run and every `gibbs_thinning`-th one is kept.
pub fn gibbs_train(
    data: &Dataset,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    init: Init,
) -> Result<GibbsRun> {
    cfg.validate()?;
    data.check_against(spec)?;
    let mut rng = RngStream::derive(cfg.seed, purpose::INIT, 0, 0);
    let (mut dicts, mut states) = match init {
        Init::Prior => {
            let d = DictionarySet::sample_prior(spec, cfg.init_scale, &mut rng);
            let s = (0..data.len())
                .map(|_| random_state(spec, &mut rng))
                .collect();
            (d, s)
        }
        Init::Pretrained { dicts, mut states } => {
            states.truncate(data.len());
            for im in &data.images[states.len()..] {
                states.push(initial_state(spec, &dicts, im, None));
            }
            (dicts, states)
        }
        Init::Checkpoint(ck) => {
            let s = (0..data.len())
                .map(|_| random_state(spec, &mut rng))
                .collect();
            (ck.dicts.clone(), s)
        }
    };
    let mut svm = if spec.supervised() {
        Some(SvmState::new(
            spec.classes,
            spec.feature_len() + 1,
            spec.hyper.svm_gamma,
            spec.hyper.beta_floor,
        ))
    } else {
        None
    };
    let labels = data.labels.as_deref();
    let mut samples = Vec::new();
    let total = cfg.gibbs_burn_in + cfg.gibbs_collection;
    for it in 0..total {
        gibbs_sweep(
            spec,
            &data.images,
            labels,
            &mut dicts,
            svm.as_mut(),
            &mut states,
            SweepMode::Full,
            cfg.seed,
            it as u64,
        )?;
        if it >= cfg.gibbs_burn_in
            && (it - cfg.gibbs_burn_in + 1).is_multiple_of(cfg.gibbs_thinning)
        {
            samples.push((dicts.clone(), svm.clone()));
        }
    }
    if let (Some(s), Some(l)) = (svm.as_mut(), labels) {
        refresh_betas(s, &states, l)?;
    }
    Ok(GibbsRun { samples, states })
}
