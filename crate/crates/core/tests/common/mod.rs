//! Independent reference implementations used as test oracles. Nothing here
//! calls into the library's numerical kernels.
#![allow(dead_code)]

use dgdn::distributions::RngStream;
use dgdn::model::{DictionarySet, Hyperparams, LatentState, LayerSpec, NetworkSpec};
use dgdn::{IndicatorGrid, Tensor3};
use rand::Rng;

/// Plain nested arrays: `a[b][y][x]`.
pub type Arr3 = Vec<Vec<Vec<f64>>>;

pub fn to_arr(t: &Tensor3) -> Arr3 {
    (0..t.bands())
        .map(|b| {
            (0..t.height())
                .map(|y| (0..t.width()).map(|x| t.get(y, x, b)).collect())
                .collect()
        })
        .collect()
}

pub fn from_arr(a: &Arr3) -> Tensor3 {
    let (bands, h, w) = (a.len(), a[0].len(), a[0][0].len());
    let mut t = Tensor3::zeros(h, w, bands);
    for b in 0..bands {
        for y in 0..h {
            for x in 0..w {
                t.set(y, x, b, a[b][y][x]);
            }
        }
    }
    t
}

/// Full 2-D convolution of single planes, by definition.
pub fn conv_full_naive(s: &[Vec<f64>], d: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (sh, sw, dh, dw) = (s.len(), s[0].len(), d.len(), d[0].len());
    let mut out = vec![vec![0.0; sw + dw - 1]; sh + dh - 1];
    for (oy, row) in out.iter_mut().enumerate() {
        for (ox, o) in row.iter_mut().enumerate() {
            for y in 0..sh {
                for x in 0..sw {
                    if oy >= y && ox >= x && oy - y < dh && ox - x < dw {
                        *o += s[y][x] * d[oy - y][ox - x];
                    }
                }
            }
        }
    }
    out
}

/// Valid 2-D correlation of single planes, by definition.
pub fn correlate_valid_naive(b: &[Vec<f64>], c: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (bh, bw, ch, cw) = (b.len(), b[0].len(), c.len(), c[0].len());
    let mut out = vec![vec![0.0; bw - cw + 1]; bh - ch + 1];
    for (y, row) in out.iter_mut().enumerate() {
        for (x, o) in row.iter_mut().enumerate() {
            for p in 0..ch {
                for q in 0..cw {
                    *o += b[y + p][x + q] * c[p][q];
                }
            }
        }
    }
    out
}

/// Expanded unpooled map from pooled values and categories, by definition.
pub fn unpool_naive(x: &[Vec<f64>], grid: &IndicatorGrid) -> Vec<Vec<f64>> {
    let (py, px) = (grid.pool_y(), grid.pool_x());
    let mut out = vec![vec![0.0; grid.blocks_x() * px]; grid.blocks_y() * py];
    for i in 0..grid.blocks_y() {
        for j in 0..grid.blocks_x() {
            let c = grid.category(i, j);
            if c > 0 {
                let m = c - 1;
                out[i * py + m / px][j * px + m % px] = x[i][j];
            }
        }
    }
    out
}

/// Inputs `X_l` of every layer (bottom first) decoded from a latent state,
/// written from the model definition with nested arrays.
pub fn decode_all_naive(spec: &NetworkSpec, dicts: &DictionarySet, st: &LatentState) -> Vec<Arr3> {
    let top = spec.top();
    // top S = W . Z
    let ts = to_arr(&st.top_w);
    let mut s: Arr3 = ts
        .iter()
        .enumerate()
        .map(|(k, plane)| {
            plane
                .iter()
                .enumerate()
                .map(|(i, row)| {
                    row.iter()
                        .enumerate()
                        .map(|(j, &w)| {
                            if st.z[top][k].category(i, j) != 0 {
                                w
                            } else {
                                0.0
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let mut xs = vec![Vec::new(); top + 1];
    for l in (0..=top).rev() {
        let g = spec.geometry(l);
        let mut x: Arr3 = vec![vec![vec![0.0; g.in_w]; g.in_h]; g.in_bands];
        for (k, sk) in s.iter().enumerate() {
            let d = to_arr(dicts.get(l, k));
            for b in 0..g.in_bands {
                let c = conv_full_naive(sk, &d[b]);
                for y in 0..g.in_h {
                    for xx in 0..g.in_w {
                        x[b][y][xx] += c[y][xx];
                    }
                }
            }
        }
        if l > 0 {
            s = x
                .iter()
                .enumerate()
                .map(|(k, plane)| unpool_naive(plane, &st.z[l - 1][k]))
                .collect();
        }
        xs[l] = x;
    }
    xs
}

/// Reconstruction of the image plane.
pub fn decode_naive(spec: &NetworkSpec, dicts: &DictionarySet, st: &LatentState) -> Arr3 {
    decode_all_naive(spec, dicts, st).swap_remove(0)
}

/// `||image - decode(st)||^2`, optionally weighted per pixel.
pub fn residual_sq_naive(
    spec: &NetworkSpec,
    dicts: &DictionarySet,
    st: &LatentState,
    image: &Tensor3,
) -> f64 {
    let r = decode_naive(spec, dicts, st);
    let im = to_arr(image);
    let mut acc = 0.0;
    for b in 0..im.len() {
        for y in 0..im[b].len() {
            for x in 0..im[b][y].len() {
                let e = im[b][y][x] - r[b][y][x];
                acc += e * e;
            }
        }
    }
    acc
}

/// Tabulated CDF of an unnormalised log-density on `[lo, hi]` (trapezoid
/// rule on `n` intervals, linear interpolation between nodes).
pub fn numeric_cdf(logf: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> impl Fn(f64) -> f64 {
    let h = (hi - lo) / n as f64;
    let xs: Vec<f64> = (0..=n).map(|i| lo + i as f64 * h).collect();
    let lf: Vec<f64> = xs.iter().map(|&x| logf(x)).collect();
    let m = lf.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let f: Vec<f64> = lf.iter().map(|v| (v - m).exp()).collect();
    let mut c = vec![0.0; n + 1];
    for i in 1..=n {
        c[i] = c[i - 1] + 0.5 * h * (f[i - 1] + f[i]);
    }
    let total = c[n];
    c.iter_mut().for_each(|v| *v /= total);
    move |x: f64| {
        if x <= lo {
            return 0.0;
        }
        if x >= hi {
            return 1.0;
        }
        let t = (x - lo) / h;
        let i = (t as usize).min(n - 1);
        let u = t - i as f64;
        c[i] * (1.0 - u) + c[i + 1] * u
    }
}

/// Mean and variance of the Gaussian whose log-density (up to a constant) is
/// the quadratic through `f(-1), f(0), f(1)`.
pub fn gaussian_from_quadratic(f: impl Fn(f64) -> f64) -> (f64, f64) {
    let (fm, f0, fp) = (f(-1.0), f(0.0), f(1.0));
    let a = fm + fp - 2.0 * f0; // = -precision
    let b = 0.5 * (fp - fm);
    let prec = -a;
    (b / prec, 1.0 / prec)
}

/// Dense Gaussian elimination with partial pivoting.
pub fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for c in col..n {
                a[row][c] -= f * a[col][c];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|c| a[row][c] * x[c]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// Composite Simpson rule on `[a, b]` with `n` (even) intervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// Kolmogorov-Smirnov statistic of `xs` against a continuous CDF.
pub fn ks_statistic(xs: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    d
}

/// Asymptotic KS critical value at level 0.01.
pub fn ks_critical_01(n: usize) -> f64 {
    1.628 / (n as f64).sqrt()
}

/// Pearson χ² statistic and the 0.99 quantile for `counts` against `probs`.
/// Cells with small expectation are merged into their neighbour.
pub fn chi_square(counts: &[usize], probs: &[f64]) -> (f64, f64) {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let n: usize = counts.iter().sum();
    let mut cells: Vec<(f64, f64)> = Vec::new();
    let (mut o, mut e) = (0.0, 0.0);
    for (&c, &p) in counts.iter().zip(probs) {
        o += c as f64;
        e += p * n as f64;
        if e >= 5.0 {
            cells.push((o, e));
            o = 0.0;
            e = 0.0;
        }
    }
    if e > 0.0 || o > 0.0 {
        match cells.last_mut() {
            Some(last) => {
                last.0 += o;
                last.1 += e;
            }
            None => cells.push((o, e)),
        }
    }
    let stat: f64 = cells.iter().map(|(o, e)| (o - e) * (o - e) / e).sum();
    let df = (cells.len().max(2) - 1) as f64;
    (stat, ChiSquared::new(df).unwrap().inverse_cdf(0.99))
}

pub fn random_tensor(h: usize, w: usize, b: usize, rng: &mut impl Rng) -> Tensor3 {
    let mut t = Tensor3::zeros(h, w, b);
    t.data_mut()
        .iter_mut()
        .for_each(|v| *v = rng.random_range(-1.0..1.0));
    t
}

/// The small two-layer network used by most tests: 10x10 input, 3x3
/// dictionaries, 2x2 pooling below a 1x1-pooled top.
pub fn small_spec(classes: usize) -> NetworkSpec {
    NetworkSpec::new(
        10,
        10,
        1,
        classes,
        vec![LayerSpec::new(2, 3, 3, 2, 2), LayerSpec::new(2, 2, 2, 1, 1)],
        Hyperparams::default(),
    )
    .unwrap()
}

/// Two-layer 6x6 model: two 3x3 dictionaries with 2x2 pooling below a
/// trivial 1x1 top, matching the "tiny model" of the conditional tests.
pub fn tiny_spec() -> NetworkSpec {
    tiny_spec_with(0, Hyperparams::default())
}

pub fn tiny_spec_with(classes: usize, hyper: Hyperparams) -> NetworkSpec {
    NetworkSpec::new(
        6,
        6,
        1,
        classes,
        vec![LayerSpec::new(2, 3, 3, 2, 2), LayerSpec::new(2, 2, 2, 1, 1)],
        hyper,
    )
    .unwrap()
}

/// Three layers on a 12x12 input: 3x3/2x2/2x2 dictionaries, 2x2 pooling
/// twice, a 1x1 top.
pub fn deep_spec(classes: usize) -> NetworkSpec {
    NetworkSpec::new(
        12,
        12,
        1,
        classes,
        vec![
            LayerSpec::new(2, 3, 3, 2, 2),
            LayerSpec::new(2, 2, 2, 2, 2),
            LayerSpec::new(2, 2, 2, 1, 1),
        ],
        Hyperparams::default(),
    )
    .unwrap()
}

/// A random state with every category chosen uniformly and Gaussian weights.
pub fn random_state(spec: &NetworkSpec, rng: &mut RngStream) -> LatentState {
    let mut st = LatentState::new(spec);
    for l in 0..spec.num_layers() {
        for grid in st.z[l].iter_mut() {
            for i in 0..grid.blocks_y() {
                for j in 0..grid.blocks_x() {
                    let c = rng.random_range(0..grid.num_categories());
                    grid.set_category(i, j, c);
                }
            }
        }
    }
    st.top_w
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = rng.random_range(-1.0..1.0));
    st.gamma_e = rng.random_range(0.5..2.0);
    for g in st.gamma_s.iter_mut() {
        *g = rng.random_range(0.5..2.0);
    }
    st
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}
