mod common;

use common::*;
use dgdn::distributions::RngStream;
use dgdn::io::{Checkpoint, Dataset};
use dgdn::mcem::{
    average_decisions, backprop_delta, classify, gibbs_train, grad_dictionary, infer_features,
    model_average, qbar, qbar_gradient, rmsprop_step, update_z, InferConfig, Init, RmspropState,
    SampleSet, TrainConfig, Trainer,
};
use dgdn::model::decode;
use dgdn::svm::SvmState;
use dgdn::{DictionarySet, Hyperparams, LatentState, LayerSpec, NetworkSpec, Tensor3};
use proptest::prelude::*;
use rand::Rng;

/// Vertical (class 0) or horizontal (class 1) two-pixel bars at a shifting
/// position on a 10x10 canvas.
fn bars(n: usize, seed: u64) -> Dataset {
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
    Dataset::new(images, Some(labels), 2).unwrap()
}

/// A state whose top spikes are on exactly in `bands` with weights drawn
/// away from zero; lower indicators random.
fn planted_state(spec: &NetworkSpec, bands: &[usize], rng: &mut RngStream) -> LatentState {
    let mut st = random_state(spec, rng);
    let top = spec.top();
    for k in 0..spec.layers[top].dicts {
        let grid = &mut st.z[top][k];
        for i in 0..grid.blocks_y() {
            for j in 0..grid.blocks_x() {
                let on = bands.contains(&k);
                grid.set_category(i, j, on as usize);
                let w = if on {
                    rng.random_range(1.0..2.0) * if rng.random::<bool>() { 1.0 } else { -1.0 }
                } else {
                    0.0
                };
                st.top_w.set(i, j, k, w);
            }
        }
    }
    st
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn one_iteration_on_four_images_is_finite() {
    let mut data = bars(4, 1);
    data.labels = None;
    data.classes = 0;
    let spec = small_spec(0);
    let cfg = TrainConfig {
        minibatch: 4,
        iterations: 1,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(&data, &spec, &cfg, Init::Prior).unwrap();
    let m = t.step().unwrap();
    assert!(m.qbar.is_finite());
    assert_eq!(m.hinge, 0.0);
    assert_eq!(t.iteration(), 1);
    assert_eq!(t.features().len(), 4);
    assert!(t
        .features()
        .iter()
        .all(|f| f.len() == spec.feature_len() + 1));
}

#[test]
fn training_is_deterministic_under_a_fixed_seed() {
    let data = bars(6, 2);
    let spec = small_spec(2);
    let cfg = TrainConfig {
        minibatch: 3,
        seed: 17,
        ..TrainConfig::default()
    };
    let run = || {
        let mut t = Trainer::new(&data, &spec, &cfg, Init::Prior).unwrap();
        let qs: Vec<f64> = (0..4).map(|_| t.step().unwrap().qbar).collect();
        (qs, t.dicts.clone(), t.svm.clone(), t.states.clone())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
    assert_eq!(a.3, b.3);
}

#[test]
fn supervised_bars_are_separated() {
    let data = bars(20, 3);
    let spec = small_spec(2);
    let cfg = TrainConfig {
        minibatch: 20,
        iterations: 200,
        learning_rate: 1e-2,
        seed: 4,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(&data, &spec, &cfg, Init::Prior).unwrap();
    for _ in 0..cfg.iterations {
        t.step().unwrap();
    }
    let svm = t.svm.as_ref().unwrap();
    let labels = data.labels.as_ref().unwrap();
    let wrong = t
        .features()
        .iter()
        .zip(labels)
        .filter(|(f, &l)| dgdn::svm::argmax(&svm.scores(f)) != l)
        .count();
    assert!(
        wrong as f64 / data.len() as f64 <= 0.05,
        "{wrong} of {} misclassified",
        data.len()
    );
}

#[test]
fn qbar_of_nothing_is_zero_and_the_penalty_is_quadratic() {
    let spec = small_spec(0);
    let image = Tensor3::zeros(10, 10, 1);
    let st = [LatentState::new(&spec)];
    let set = [SampleSet {
        image: &image,
        label: None,
        samples: &st,
        weights: None,
    }];
    let zero = DictionarySet::zeros(&spec);
    assert_eq!(qbar(&spec, &zero, None, &set).unwrap(), 0.0);

    // all top spikes off: nothing is decoded, only the penalty remains
    let mut off = LatentState::new(&spec);
    for g in off.z[spec.top()].iter_mut() {
        for i in 0..g.blocks_y() {
            for j in 0..g.blocks_x() {
                g.set_category(i, j, 0);
            }
        }
    }
    let off = [off];
    let set = [SampleSet {
        samples: &off,
        ..set[0]
    }];
    let mut rng = RngStream::new(60, 0);
    let d = DictionarySet::sample_prior(&spec, 1.0, &mut rng);
    let mut d2 = d.clone();
    d2.iter_mut().for_each(|t| t.scale(2.0));
    let (q1, q2) = (
        qbar(&spec, &d, None, &set).unwrap(),
        qbar(&spec, &d2, None, &set).unwrap(),
    );
    assert!(q1 < 0.0);
    assert!(rel_err(q2, 4.0 * q1) < 1e-12);
}

#[test]
fn qbar_matches_a_naive_evaluation() {
    let spec = small_spec(3);
    let mut rng = RngStream::new(61, 0);
    let dicts = DictionarySet::sample_prior(&spec, 0.7, &mut rng);
    let svm = SvmState {
        betas: (0..3)
            .map(|_| {
                (0..spec.feature_len() + 1)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect()
            })
            .collect(),
        gamma: 1.3,
        beta_floor: 1e-6,
    };
    let images: Vec<Tensor3> = (0..2).map(|_| random_tensor(10, 10, 1, &mut rng)).collect();
    let samples: Vec<Vec<LatentState>> = (0..2)
        .map(|_| {
            (0..3)
                .map(|_| {
                    let mut s = random_state(&spec, &mut rng);
                    s.lambdas = (0..3).map(|_| rng.random_range(0.2..2.0)).collect();
                    s
                })
                .collect()
        })
        .collect();
    let labels = [1usize, 2];
    let sets: Vec<SampleSet> = (0..2)
        .map(|n| SampleSet {
            image: &images[n],
            label: Some(labels[n]),
            samples: &samples[n],
            weights: None,
        })
        .collect();
    let got = qbar(&spec, &dicts, Some(&svm), &sets).unwrap();

    let mut want = 0.0;
    for n in 0..2 {
        let mut acc = 0.0;
        for st in &samples[n] {
            acc += 0.5 * st.gamma_e * residual_sq_naive(&spec, &dicts, st, &images[n]);
            let f = st.features();
            for c in 0..3 {
                let y = if c == labels[n] { 1.0 } else { -1.0 };
                let m: f64 = svm.betas[c].iter().zip(&f).map(|(b, s)| b * s).sum();
                let r = 1.0 + st.lambdas[c] - y * m;
                acc += svm.gamma * r * r / (2.0 * st.lambdas[c]);
            }
        }
        want -= acc / 3.0;
    }
    let dsq: f64 = dicts
        .iter()
        .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
        .sum();
    want -= 0.5 * dsq;
    assert!(rel_err(got, want) <= 1e-10, "{got} vs {want}");

    let mut bad = samples[0].clone();
    bad[0].lambdas[1] = 0.0;
    let set = [SampleSet {
        samples: &bad,
        ..sets[0]
    }];
    assert!(qbar(&spec, &dicts, Some(&svm), &set).is_err());
}

#[test]
fn backprop_base_cases() {
    let spec = small_spec(0);
    let mut rng = RngStream::new(62, 0);
    let dicts = DictionarySet::sample_prior(&spec, 1.0, &mut rng);
    let st = random_state(&spec, &mut rng);
    let deltas = backprop_delta(&spec, &dicts, &st, &Tensor3::zeros(10, 10, 1), None).unwrap();
    assert_eq!(deltas.len(), 2);
    assert!(deltas.iter().all(|d| d.norm_sq() == 0.0));

    // one layer: delta is the weighted, masked residual
    let one = NetworkSpec::new(
        6,
        6,
        1,
        0,
        vec![LayerSpec::new(2, 3, 3, 1, 1)],
        Hyperparams::default(),
    )
    .unwrap();
    let d1 = DictionarySet::sample_prior(&one, 1.0, &mut rng);
    let s1 = random_state(&one, &mut rng);
    let image = random_tensor(6, 6, 1, &mut rng);
    let mut e = image.clone();
    e.add_scaled(-1.0, decode(&one, &d1, &s1).reconstruction());
    let mask: Vec<f64> = (0..36).map(|p| (p % 3 != 0) as u8 as f64).collect();
    let deltas = backprop_delta(&one, &d1, &s1, &e, Some(&mask)).unwrap();
    assert_eq!(deltas.len(), 1);
    for ((d, r), m) in deltas[0].data().iter().zip(e.data()).zip(&mask) {
        assert!((d - s1.gamma_e * r * m).abs() < 1e-14);
    }
    assert!(backprop_delta(&one, &d1, &s1, &Tensor3::zeros(5, 6, 1), None).is_err());
}

#[test]
fn dictionary_gradient_is_prior_pull_plus_a_linear_term() {
    let spec = small_spec(0);
    let mut rng = RngStream::new(63, 0);
    let dicts = DictionarySet::sample_prior(&spec, 1.0, &mut rng);
    let st = random_state(&spec, &mut rng);
    let acts = decode(&spec, &dicts, &st);
    let zero: Vec<Tensor3> = acts
        .x
        .iter()
        .take(spec.num_layers())
        .map(|x| Tensor3::zeros(x.height(), x.width(), x.bands()))
        .collect();
    let g = grad_dictionary(&spec, &dicts, &[(zero, acts.clone())], 1.0);
    for (gt, d) in g.iter().zip(dicts.iter()) {
        for (a, b) in gt.data().iter().zip(d.data()) {
            assert_eq!(*a, -b);
        }
    }

    let e = random_tensor(10, 10, 1, &mut rng);
    let deltas = backprop_delta(&spec, &dicts, &st, &e, None).unwrap();
    let g1 = grad_dictionary(&spec, &dicts, &[(deltas.clone(), acts.clone())], 1.0);
    let g3 = grad_dictionary(&spec, &dicts, &[(deltas, acts)], 3.0);
    for ((a, b), d) in g1.iter().zip(g3.iter()).zip(dicts.iter()) {
        for ((x, y), dv) in a.data().iter().zip(b.data()).zip(d.data()) {
            assert!((3.0 * (x + dv) - (y + dv)).abs() < 1e-10);
        }
    }
}

/// Ascent with a small step on fixed samples: each trial is 20 M-steps.
#[test]
fn qbar_rises_under_small_steps_on_fixed_samples() {
    let spec = tiny_spec();
    let mut monotone = 0;
    let trials = 20;
    for trial in 0..trials {
        let mut rng = RngStream::new(64, trial);
        let mut dicts = DictionarySet::sample_prior(&spec, 0.5, &mut rng);
        let images: Vec<Tensor3> = (0..2).map(|_| random_tensor(6, 6, 1, &mut rng)).collect();
        let samples: Vec<Vec<LatentState>> = (0..2)
            .map(|_| (0..64).map(|_| random_state(&spec, &mut rng)).collect())
            .collect();
        let sets: Vec<SampleSet> = (0..2)
            .map(|n| SampleSet {
                image: &images[n],
                label: None,
                samples: &samples[n],
                weights: None,
            })
            .collect();
        let mut rms = RmspropState::new(dicts.param_len(), 0.95, 1e-3);
        let mut prev = qbar(&spec, &dicts, None, &sets).unwrap();
        let mut ok = true;
        for _ in 0..20 {
            let g = qbar_gradient(&spec, &dicts, &sets).unwrap().to_flat();
            let mut flat = dicts.to_flat();
            rmsprop_step(&mut flat, &g, &mut rms);
            dicts.copy_from_flat(&flat).unwrap();
            let q = qbar(&spec, &dicts, None, &sets).unwrap();
            ok &= q >= prev;
            prev = q;
        }
        monotone += ok as usize;
    }
    assert!(
        monotone * 100 >= 95 * trials as usize,
        "{monotone} of {trials}"
    );
}

#[test]
fn zero_image_infers_zero_features() {
    let spec = small_spec(0);
    let mut rng = RngStream::new(65, 0);
    let dicts = DictionarySet::sample_prior(&spec, 1.0, &mut rng);
    let inf = infer_features(
        &spec,
        &dicts,
        &Tensor3::zeros(10, 10, 1),
        None,
        &InferConfig::default(),
        &mut rng,
    )
    .unwrap();
    let f = &inf.features;
    let norm: f64 = f[..f.len() - 1].iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm <= 1e-3, "{norm}");
    assert_eq!(*f.last().unwrap(), 1.0);
}

#[test]
fn even_prior_odds_threshold_at_unit_likelihood_ratio() {
    let half = [0.5, 0.5];
    assert!(update_z(&half, 0.1, 0.0));
    assert!(!update_z(&half, -0.1, 0.0));
    assert!(!update_z(&half, 0.0, 0.0));
    // prior odds 3:1 against the spike need a ratio above 3
    let skew = [0.75, 0.25];
    assert!(!update_z(&skew, 3f64.ln() - 1e-9, 0.0));
    assert!(update_z(&skew, 3f64.ln() + 1e-9, 0.0));
}

#[test]
fn generated_images_give_back_their_top_weights() {
    let spec = small_spec(0);
    // noiseless images need a longer budget than the default to settle the
    // lower-layer indicators
    let cfg = InferConfig {
        iterations: 200,
        tol: 0.0,
        ..InferConfig::default()
    };
    let mut hits = 0;
    for trial in 0..5 {
        let mut rng = RngStream::new(66, trial);
        let dicts = DictionarySet::sample_prior(&spec, 1.0, &mut rng);
        let truth = planted_state(&spec, &[0, 1], &mut rng);
        let image = decode(&spec, &dicts, &truth).x.swap_remove(0);
        let inf = infer_features(&spec, &dicts, &image, None, &cfg, &mut rng).unwrap();
        let n = spec.feature_len();
        let c = correlation(&inf.features[..n], &truth.features()[..n]);
        hits += (c > 0.95) as usize;
    }
    assert!(hits >= 4, "{hits} of 5 recovered");
}

#[test]
fn inference_is_deterministic_and_validates_input() {
    let spec = small_spec(0);
    let mut rng = RngStream::new(67, 0);
    let dicts = DictionarySet::sample_prior(&spec, 1.0, &mut rng);
    let image = random_tensor(10, 10, 1, &mut rng);
    let cfg = InferConfig {
        iterations: 10,
        ..InferConfig::default()
    };
    let a = infer_features(&spec, &dicts, &image, None, &cfg, &mut RngStream::new(1, 2)).unwrap();
    let b = infer_features(&spec, &dicts, &image, None, &cfg, &mut RngStream::new(1, 2)).unwrap();
    assert_eq!(a.features, b.features);
    assert_eq!(a.objective, b.objective);
    assert!(a.iterations <= 10);

    let wrong = Tensor3::zeros(9, 10, 1);
    assert!(infer_features(&spec, &dicts, &wrong, None, &cfg, &mut rng).is_err());
    let bad = InferConfig {
        iterations: 0,
        ..cfg
    };
    assert!(infer_features(&spec, &dicts, &image, None, &bad, &mut rng).is_err());
}

fn two_band_checkpoint(betas: Vec<Vec<f64>>, seed: u64) -> Checkpoint {
    let spec = small_spec(2);
    let mut rng = RngStream::new(seed, 0);
    let dicts = DictionarySet::sample_prior(&spec, 1.0, &mut rng);
    let svm = SvmState {
        betas,
        gamma: 1.0,
        beta_floor: 1e-6,
    };
    Checkpoint::new(spec, dicts, Some(svm))
}

/// Energy of each top band: class `c` images only use band `c`.
fn band_energy_betas(spec: &NetworkSpec) -> Vec<Vec<f64>> {
    let g = spec.geometry(spec.top());
    let plane = g.s_h * g.s_w;
    (0..2)
        .map(|c| {
            let mut b = vec![0.0; spec.feature_len() + 1];
            b[c * plane..(c + 1) * plane]
                .iter_mut()
                .for_each(|v| *v = 1.0);
            b
        })
        .collect()
}

#[test]
fn classify_with_constructed_weights() {
    let spec = small_spec(2);
    let ck0 = two_band_checkpoint(vec![vec![0.0; spec.feature_len() + 1]; 2], 68);
    let betas = band_energy_betas(&spec);
    let mut rng = RngStream::new(69, 0);
    let cfg = InferConfig::default();
    let mut right = 0;
    for n in 0..10 {
        let class = n % 2;
        // positive weights so the band sum is a fair score
        let mut truth = planted_state(&spec, &[class], &mut rng);
        truth.top_w.data_mut().iter_mut().for_each(|w| *w = w.abs());
        let image = decode(&spec, &ck0.dicts, &truth).x.swap_remove(0);
        let ck = Checkpoint::new(spec.clone(), ck0.dicts.clone(), ck0.svm.clone());
        let ck = Checkpoint {
            svm: Some(SvmState {
                betas: betas.clone(),
                ..ck.svm.unwrap()
            }),
            ..ck
        };
        let (label, scores) = classify(&ck, &image, &cfg, n as u64).unwrap();
        assert_eq!(scores.len(), 2);
        right += (label == class) as usize;
        assert_eq!(classify(&ck, &image, &cfg, n as u64).unwrap().0, label);
    }
    assert!(right >= 9, "{right} of 10");

    // identical weights tie, and ties go to the lowest class
    let same = vec![vec![0.5; spec.feature_len() + 1]; 2];
    let ck = two_band_checkpoint(same, 68);
    let image = random_tensor(10, 10, 1, &mut rng);
    assert_eq!(classify(&ck, &image, &cfg, 0).unwrap().0, 0);

    let unsupervised = Checkpoint::new(small_spec(0), DictionarySet::zeros(&small_spec(0)), None);
    assert!(classify(&unsupervised, &image, &cfg, 0).is_err());
}

#[test]
fn model_averaging_reduces_to_classify_and_averages_by_hand() {
    let spec = small_spec(2);
    let mut rng = RngStream::new(70, 0);
    let betas: Vec<Vec<f64>> = (0..2)
        .map(|_| {
            (0..spec.feature_len() + 1)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect()
        })
        .collect();
    let ck = two_band_checkpoint(betas, 71);
    let image = random_tensor(10, 10, 1, &mut rng);
    let cfg = InferConfig {
        iterations: 10,
        ..InferConfig::default()
    };
    let single = classify(&ck, &image, &cfg, 5).unwrap();
    assert_eq!(
        model_average(std::slice::from_ref(&ck), &image, &cfg, 5).unwrap(),
        single
    );
    let (label, avg) = model_average(&[ck.clone(), ck.clone()], &image, &cfg, 5).unwrap();
    assert_eq!(label, single.0);
    for (a, b) in avg.iter().zip(&single.1) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(model_average(&[], &image, &cfg, 5).is_err());

    // (1 + 0 - 4) / 3 = -1, (0 + 2 + 1) / 3 = 1, (2 + 1 + 0) / 3 = 1
    let d = vec![
        vec![1.0, 0.0, 2.0],
        vec![0.0, 2.0, 1.0],
        vec![-4.0, 1.0, 0.0],
    ];
    let (label, avg) = average_decisions(&d).unwrap();
    assert_eq!(avg, vec![-1.0, 1.0, 1.0]);
    assert_eq!(label, 1);
    assert!(average_decisions(&[vec![1.0], vec![1.0, 2.0]]).is_err());
}

#[test]
fn gibbs_protocol_keeps_every_thinned_sample() {
    let data = bars(6, 5);
    let spec = small_spec(2);
    let cfg = TrainConfig {
        gibbs_burn_in: 3,
        gibbs_collection: 6,
        gibbs_thinning: 2,
        seed: 8,
        ..TrainConfig::default()
    };
    let run = gibbs_train(&data, &spec, &cfg, Init::Prior).unwrap();
    assert_eq!(run.samples.len(), 3);
    assert_eq!(run.states.len(), 6);
    for (d, svm) in &run.samples {
        assert!(d.is_finite());
        assert_eq!(svm.as_ref().unwrap().betas.len(), 2);
    }
    let again = gibbs_train(&data, &spec, &cfg, Init::Prior).unwrap();
    assert_eq!(again.samples[2].0, run.samples[2].0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spike_update_ignores_a_common_likelihood_factor(
        t in 0.01f64..0.99, on in -20.0f64..20.0, off in -20.0f64..20.0, c in -50.0f64..50.0,
    ) {
        let theta = [1.0 - t, t];
        prop_assume!((t.ln() + on - (1.0 - t).ln() - off).abs() > 1e-9);
        prop_assert_eq!(update_z(&theta, on, off), update_z(&theta, on + c, off + c));
    }

    #[test]
    fn gradient_matches_central_differences(seed in any::<u64>()) {
        let spec = tiny_spec();
        let mut rng = RngStream::new(seed, 3);
        let dicts = DictionarySet::sample_prior(&spec, 0.8, &mut rng);
        let image = random_tensor(6, 6, 1, &mut rng);
        let samples: Vec<LatentState> = (0..2).map(|_| random_state(&spec, &mut rng)).collect();
        let mask: Vec<f64> = (0..36).map(|_| rng.random_range(0..2) as f64).collect();
        let set = [SampleSet { image: &image, label: None, samples: &samples, weights: Some(&mask) }];
        let g = qbar_gradient(&spec, &dicts, &set).unwrap().to_flat();
        let flat = dicts.to_flat();
        let h = 1e-5;
        for _ in 0..4 {
            let p = rng.random_range(0..flat.len());
            let at = |v: f64| {
                let mut f = flat.clone();
                f[p] = v;
                let mut d = dicts.clone();
                d.copy_from_flat(&f).unwrap();
                qbar(&spec, &d, None, &set).unwrap()
            };
            let fd = (at(flat[p] + h) - at(flat[p] - h)) / (2.0 * h);
            prop_assert!((g[p] - fd).abs() <= 1e-4 * fd.abs().max(1.0), "{} vs {}", g[p], fd);
        }
    }
}
