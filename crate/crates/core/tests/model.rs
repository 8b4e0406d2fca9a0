mod common;

use common::*;
use dgdn::distributions::RngStream;
use dgdn::model::{decode, decode_with_top, residual, sample_prior_image, PriorOptions};
use dgdn::{DictionarySet, Hyperparams, LatentState, LayerSpec, NetworkSpec};
use proptest::prelude::*;

fn mnist_like(k1: usize, k2: usize) -> NetworkSpec {
    NetworkSpec::new(
        28,
        28,
        1,
        10,
        vec![
            LayerSpec::new(k1, 8, 8, 3, 3),
            LayerSpec::new(k2, 6, 6, 1, 1),
        ],
        Hyperparams::default(),
    )
    .unwrap()
}

#[test]
fn mnist_geometry_chain() {
    let spec = mnist_like(16, 32);
    let g = spec.geometries();
    assert_eq!((g[0].s_h, g[0].s_w, g[0].out_h), (21, 21, 7));
    assert_eq!(
        (g[1].in_h, g[1].in_bands, g[1].s_h, g[1].s_w),
        (7, 16, 2, 2)
    );
    assert_eq!(spec.feature_len(), 2 * 2 * 32);
}

#[test]
fn invalid_architectures_are_rejected() {
    let h = Hyperparams::default();
    // dictionary larger than its input
    assert!(NetworkSpec::new(6, 6, 1, 0, vec![LayerSpec::new(2, 7, 3, 1, 1)], h).is_err());
    // 4x4 maps do not split into 3x3 blocks
    assert!(NetworkSpec::new(
        6,
        6,
        1,
        0,
        vec![LayerSpec::new(2, 3, 3, 3, 3), LayerSpec::new(2, 1, 1, 1, 1)],
        h
    )
    .is_err());
    // pooled top layer
    assert!(NetworkSpec::new(6, 6, 1, 0, vec![LayerSpec::new(2, 3, 3, 2, 2)], h).is_err());
    // a single class
    assert!(NetworkSpec::new(6, 6, 1, 1, vec![LayerSpec::new(2, 3, 3, 1, 1)], h).is_err());
}

#[test]
fn decode_matches_the_nested_loop_oracle() {
    let mut rng = RngStream::new(31, 0);
    for spec in [tiny_spec(), small_spec(0), deep_spec(3)] {
        for _ in 0..10 {
            let dicts = DictionarySet::sample_prior(&spec, 1.0, &mut rng);
            let st = random_state(&spec, &mut rng);
            let acts = decode(&spec, &dicts, &st);
            let want = decode_all_naive(&spec, &dicts, &st);
            for (l, w) in want.iter().enumerate() {
                let got = to_arr(&acts.x[l]);
                for (gb, wb) in got.iter().zip(w) {
                    for (gr, wr) in gb.iter().zip(wb) {
                        for (g, w) in gr.iter().zip(wr) {
                            assert!((g - w).abs() <= 1e-10, "layer {l}: {g} vs {w}");
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn residual_matches_oracle() {
    let mut rng = RngStream::new(32, 0);
    let spec = deep_spec(0);
    let dicts = DictionarySet::sample_prior(&spec, 0.5, &mut rng);
    let st = random_state(&spec, &mut rng);
    let image = random_tensor(spec.input_height, spec.input_width, spec.channels, &mut rng);
    let e = residual(&spec, &image, &st, &dicts).unwrap();
    let want = residual_sq_naive(&spec, &dicts, &st, &image);
    assert!(rel_err(e.norm_sq(), want) <= 1e-12);
}

#[test]
fn decoding_is_linear_in_the_top_maps() {
    let mut rng = RngStream::new(33, 0);
    let spec = small_spec(0);
    let dicts = DictionarySet::sample_prior(&spec, 1.0, &mut rng);
    let st = random_state(&spec, &mut rng);
    let g = spec.geometry(spec.top());
    let k = spec.layers[spec.top()].dicts;
    let a = random_tensor(g.s_h, g.s_w, k, &mut rng);
    let b = random_tensor(g.s_h, g.s_w, k, &mut rng);
    let mut ab = a.clone();
    ab.add_scaled(-2.5, &b);
    let xa = decode_with_top(&spec, &dicts, &a, &st.z)
        .unwrap()
        .x
        .swap_remove(0);
    let xb = decode_with_top(&spec, &dicts, &b, &st.z)
        .unwrap()
        .x
        .swap_remove(0);
    let mut want = xa;
    want.add_scaled(-2.5, &xb);
    let got = decode_with_top(&spec, &dicts, &ab, &st.z)
        .unwrap()
        .x
        .swap_remove(0);
    for (g, w) in got.data().iter().zip(want.data()) {
        assert!((g - w).abs() <= 1e-10);
    }
}

#[test]
fn all_off_top_decodes_to_zero_and_has_bias_only_features() {
    let spec = small_spec(2);
    let mut rng = RngStream::new(34, 0);
    let dicts = DictionarySet::sample_prior(&spec, 1.0, &mut rng);
    let mut st = random_state(&spec, &mut rng);
    for grid in st.z[spec.top()].iter_mut() {
        for i in 0..grid.blocks_y() {
            for j in 0..grid.blocks_x() {
                grid.set_category(i, j, 0);
            }
        }
    }
    assert_eq!(decode(&spec, &dicts, &st).reconstruction().norm_sq(), 0.0);
    let f = st.features();
    assert_eq!(f.len(), spec.feature_len() + 1);
    assert!(f[..f.len() - 1].iter().all(|v| *v == 0.0));
    assert_eq!(*f.last().unwrap(), 1.0);
}

#[test]
fn features_are_band_major() {
    let spec = small_spec(0);
    let mut st = LatentState::new(&spec);
    let g = spec.geometry(spec.top());
    let top = spec.top();
    st.z[top][1].set_category(0, 1, 1);
    st.top_w.set(0, 1, 1, 7.0);
    let f = st.features();
    assert_eq!(f[g.s_h * g.s_w + 1], 7.0);
    assert_eq!(f.iter().filter(|v| **v != 0.0).count(), 2);
}

#[test]
fn flat_dictionary_round_trip() {
    let spec = deep_spec(0);
    let mut rng = RngStream::new(35, 0);
    let d = DictionarySet::sample_prior(&spec, 1.0, &mut rng);
    let flat = d.to_flat();
    assert_eq!(flat.len(), d.param_len());
    let mut e = DictionarySet::zeros(&spec);
    e.copy_from_flat(&flat).unwrap();
    assert_eq!(d, e);
    assert!(e.copy_from_flat(&flat[1..]).is_err());
}

#[test]
fn prior_sample_is_decode_plus_noise() {
    let spec = small_spec(0);
    let mut rng = RngStream::new(36, 0);
    let dicts = DictionarySet::sample_prior(&spec, 1.0, &mut rng);
    let opts = PriorOptions {
        gamma_e: 100.0,
        gamma_s: Some(4.0),
        top_density: Some(0.5),
    };
    let s = sample_prior_image(&spec, &dicts, &opts, &mut rng).unwrap();
    let mut recon = decode(&spec, &dicts, &s.state).x.swap_remove(0);
    recon.add_scaled(1.0, &s.noise);
    assert_eq!(recon, s.image);
    let n = s.noise.len() as f64;
    let var = s.noise.norm_sq() / n;
    assert!((var - 0.01).abs() < 0.01, "noise variance {var}");
    assert!(sample_prior_image(
        &spec,
        &dicts,
        &PriorOptions {
            gamma_e: 0.0,
            ..opts
        },
        &mut rng
    )
    .is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn decode_is_linear_in_each_dictionary_layer(seed in any::<u64>(), l in 0usize..3, c in -3.0f64..3.0) {
        let spec = deep_spec(0);
        let mut rng = RngStream::new(seed, 0);
        let dicts = DictionarySet::sample_prior(&spec, 1.0, &mut rng);
        let st = random_state(&spec, &mut rng);
        let mut scaled = dicts.clone();
        scaled.layer_mut(l).iter_mut().for_each(|d| d.data_mut().iter_mut().for_each(|v| *v *= c));
        let base = decode(&spec, &dicts, &st).x.swap_remove(0);
        let got = decode(&spec, &scaled, &st).x.swap_remove(0);
        for (g, b) in got.data().iter().zip(base.data()) {
            prop_assert!((g - c * b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn shapes_follow_the_geometry(seed in any::<u64>()) {
        let spec = deep_spec(0);
        let mut rng = RngStream::new(seed, 1);
        let dicts = DictionarySet::sample_prior(&spec, 1.0, &mut rng);
        let acts = decode(&spec, &dicts, &random_state(&spec, &mut rng));
        for (l, g) in spec.geometries().iter().enumerate() {
            prop_assert_eq!(acts.x[l].dims(), (g.in_h, g.in_w, g.in_bands));
            prop_assert_eq!(acts.s[l].dims(), (g.s_h, g.s_w, spec.layers[l].dicts));
        }
    }
}
