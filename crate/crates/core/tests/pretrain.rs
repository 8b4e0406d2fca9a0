mod common;

use common::*;
use dgdn::distributions::RngStream;
use dgdn::pretrain::{
    block_log_weights, dictionary_pixel_conditional, pretrain_layer, prune_indices, stack_pretrain,
    sweep_layer_state, PretrainConfig, PretrainLayerState,
};
use dgdn::{Hyperparams, LayerSpec, NetworkSpec, Tensor3};
use rand::Rng;

fn layer() -> LayerSpec {
    LayerSpec::new(2, 3, 3, 2, 2)
}

/// A state with random indicators, weights and precisions and a residual
/// consistent with them.
fn random_layer_state(
    input: &Tensor3,
    dicts: &[Tensor3],
    rng: &mut RngStream,
) -> PretrainLayerState {
    let mut st = PretrainLayerState::new(input, &layer());
    for (k, grid) in st.z.iter_mut().enumerate() {
        let cats = grid.num_categories();
        for i in 0..grid.blocks_y() {
            for j in 0..grid.blocks_x() {
                grid.set_category(i, j, rng.random_range(0..cats));
            }
        }
        let theta: Vec<f64> = (0..cats).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = theta.iter().sum();
        st.theta[k] = theta.iter().map(|t| t / total).collect();
        st.gamma_w[k] = rng.random_range(0.5..3.0);
    }
    st.w.data_mut()
        .iter_mut()
        .for_each(|v| *v = rng.random_range(-1.5..1.5));
    st.gamma_e = rng.random_range(2.0..8.0);
    st.refresh_residual(input, dicts);
    st
}

/// `sum_k D_k * S_k` by nested loops.
fn synth_naive(st: &PretrainLayerState, dicts: &[Tensor3], h: usize, w: usize) -> Vec<Vec<f64>> {
    let s = st.activations();
    let mut out = vec![vec![0.0; w]; h];
    for (k, d) in dicts.iter().enumerate() {
        for y in 0..s.height() {
            for x in 0..s.width() {
                let v = s.get(y, x, k);
                for p in 0..d.height() {
                    for q in 0..d.width() {
                        out[y + p][x + q] += v * d.get(p, q, 0);
                    }
                }
            }
        }
    }
    out
}

fn sq_err(input: &Tensor3, synth: &[Vec<f64>]) -> f64 {
    let mut e = 0.0;
    for (y, row) in synth.iter().enumerate() {
        for (x, v) in row.iter().enumerate() {
            e += (input.get(y, x, 0) - v).powi(2);
        }
    }
    e
}

#[test]
fn block_weights_match_quadrature_over_the_collapsed_weight() {
    let mut rng = RngStream::new(41, 0);
    for _ in 0..10 {
        let input = random_tensor(6, 6, 1, &mut rng);
        let dicts: Vec<Tensor3> = (0..2).map(|_| random_tensor(3, 3, 1, &mut rng)).collect();
        let st = random_layer_state(&input, &dicts, &mut rng);
        let (k, i, j) = (
            rng.random_range(0..2),
            rng.random_range(0..2),
            rng.random_range(0..2),
        );
        let got = block_log_weights(&st, &dicts, k, i, j);

        // log-likelihood of the data with block (i, j) of element k set to
        // category m and weight v, everything else fixed
        let gw = st.gamma_w[k];
        let loglik = |m: usize, v: f64| {
            let mut alt = st.clone();
            alt.z[k].set_category(i, j, m);
            if m > 0 {
                let (y, x) = alt.z[k].position(i, j, m).unwrap();
                alt.w.set(y, x, k, v);
            }
            -0.5 * st.gamma_e * sq_err(&input, &synth_naive(&alt, &dicts, 6, 6))
        };
        let base = loglik(0, 0.0);
        for m in 1..got.len() {
            let integrand = |v: f64| {
                let lp = 0.5 * (gw / std::f64::consts::TAU).ln() - 0.5 * gw * v * v;
                (lp + loglik(m, v) - base).exp()
            };
            let want = st.theta[k][m].ln() + simpson(integrand, -12.0, 12.0, 2000).ln()
                - st.theta[k][0].ln();
            let diff = got[m] - got[0];
            assert!((diff - want).abs() < 1e-6, "m = {m}: {diff} vs {want}");
        }
    }
}

#[test]
fn dictionary_pixel_conditional_matches_the_quadratic_oracle() {
    let mut rng = RngStream::new(42, 0);
    let inputs: Vec<Tensor3> = (0..3).map(|_| random_tensor(6, 6, 1, &mut rng)).collect();
    let dicts: Vec<Tensor3> = (0..2).map(|_| random_tensor(3, 3, 1, &mut rng)).collect();
    let states: Vec<PretrainLayerState> = inputs
        .iter()
        .map(|x| random_layer_state(x, &dicts, &mut rng))
        .collect();
    for (k, p, q) in [(0, 0, 0), (1, 2, 1), (0, 1, 2)] {
        let (mean, var) = dictionary_pixel_conditional(&states, &dicts, k, 0, p, q);
        let logpost = |v: f64| {
            let mut ds = dicts.clone();
            ds[k].set(p, q, 0, v);
            let lik: f64 = states
                .iter()
                .zip(&inputs)
                .map(|(st, x)| -0.5 * st.gamma_e * sq_err(x, &synth_naive(st, &ds, 6, 6)))
                .sum();
            lik - 0.5 * v * v
        };
        let (m, v) = gaussian_from_quadratic(logpost);
        assert!(
            rel_err(mean, m) < 1e-8 && rel_err(var, v) < 1e-8,
            "{mean} {var} vs {m} {v}"
        );
    }
}

#[test]
fn sweeps_keep_the_residual_consistent() {
    let mut rng = RngStream::new(43, 0);
    let input = random_tensor(6, 6, 1, &mut rng);
    let dicts: Vec<Tensor3> = (0..2).map(|_| random_tensor(3, 3, 1, &mut rng)).collect();
    let mut st = PretrainLayerState::new(&input, &layer());
    for _ in 0..20 {
        sweep_layer_state(&mut st, &dicts, &Hyperparams::default(), &mut rng).unwrap();
        let mut fresh = st.clone();
        fresh.refresh_residual(&input, &dicts);
        for (a, b) in st.residual.data().iter().zip(fresh.residual.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(st.gamma_e > 0.0 && st.gamma_w.iter().all(|g| *g > 0.0));
        for grid in &st.z {
            for i in 0..grid.blocks_y() {
                for j in 0..grid.blocks_x() {
                    assert!(grid.category(i, j) < grid.num_categories());
                }
            }
        }
    }
}

#[test]
fn pooled_output_picks_the_active_weight() {
    let mut rng = RngStream::new(44, 0);
    let input = random_tensor(6, 6, 1, &mut rng);
    let dicts: Vec<Tensor3> = (0..2).map(|_| random_tensor(3, 3, 1, &mut rng)).collect();
    let st = random_layer_state(&input, &dicts, &mut rng);
    let pooled = st.pooled();
    assert_eq!(pooled.dims(), (2, 2, 2));
    for k in 0..2 {
        for i in 0..2 {
            for j in 0..2 {
                let want = st.z[k].active(i, j).map_or(0.0, |(y, x)| st.w.get(y, x, k));
                assert_eq!(pooled.get(i, j, k), want);
            }
        }
    }
}

#[test]
fn pruning_keeps_used_elements_and_never_empties_a_layer() {
    assert_eq!(prune_indices(&[0.5, 0.001, 0.2], 0.01), vec![0, 2]);
    assert_eq!(prune_indices(&[0.001, 0.003, 0.002], 0.01), vec![1]);
    assert_eq!(prune_indices(&[0.3, 0.3], 0.0), vec![0, 1]);
}

#[test]
fn bad_inputs_are_rejected() {
    let cfg = PretrainConfig {
        burn_in: 1,
        collection: 1,
        ..PretrainConfig::default()
    };
    let h = Hyperparams::default();
    assert!(pretrain_layer(&[], &layer(), &h, &cfg, 0).is_err());
    let mixed = [Tensor3::zeros(6, 6, 1), Tensor3::zeros(5, 6, 1)];
    assert!(pretrain_layer(&mixed, &layer(), &h, &cfg, 0).is_err());
    // 5x5 maps do not split into 2x2 blocks
    assert!(pretrain_layer(&[Tensor3::zeros(7, 7, 1)], &layer(), &h, &cfg, 0).is_err());
    let mut nan = Tensor3::zeros(6, 6, 1);
    nan.set(0, 0, 0, f64::NAN);
    assert!(pretrain_layer(&[nan], &layer(), &h, &cfg, 0).is_err());
    let bad = PretrainConfig {
        collection: 0,
        ..cfg
    };
    assert!(pretrain_layer(&[Tensor3::zeros(6, 6, 1)], &layer(), &h, &bad, 0).is_err());
}

#[test]
fn stacked_pretraining_is_reproducible_and_fits_the_architecture() {
    let mut rng = RngStream::new(45, 0);
    let spec = NetworkSpec::new(
        10,
        10,
        1,
        0,
        vec![LayerSpec::new(4, 3, 3, 2, 2), LayerSpec::new(3, 2, 2, 1, 1)],
        Hyperparams::default(),
    )
    .unwrap();
    let images: Vec<Tensor3> = (0..6).map(|_| random_tensor(10, 10, 1, &mut rng)).collect();
    let cfg = PretrainConfig {
        burn_in: 5,
        collection: 3,
        images: 4,
        prune_threshold: 0.0,
        seed: 9,
        init_scale: 0.3,
    };
    let a = stack_pretrain(&images, &spec, &cfg).unwrap();
    let b = stack_pretrain(&images, &spec, &cfg).unwrap();
    assert_eq!(a.dicts, b.dicts);
    assert_eq!(a.states, b.states);
    assert_eq!(a.spec, spec);
    assert_eq!(a.states.len(), 4);
    assert_eq!(a.usage.len(), 2);
    let g = spec.geometry(1);
    assert_eq!(a.states[0].top_w.dims(), (g.s_h, g.s_w, 3));
    assert_eq!(a.dicts.get(1, 0).dims(), (2, 2, 4));

    // an impossible threshold prunes every layer to its most used element
    let pruned = stack_pretrain(
        &images,
        &spec,
        &PretrainConfig {
            prune_threshold: 0.999,
            ..cfg
        },
    )
    .unwrap();
    assert!(pruned.spec.layers.iter().all(|l| l.dicts == 1));
    assert_eq!(pruned.dicts.get(1, 0).dims(), (2, 2, 1));
}
