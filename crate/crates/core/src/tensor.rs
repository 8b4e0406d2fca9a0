//! Dense rank-3 grids and the convolution / unpooling kernels the model is
//! built from.
//!
//! Layout of [`Tensor3`] is band-major and row-major within a band: element
//! `(y, x, b)` lives at `(b * height + y) * width + x`. Checkpoints store the
//! raw `data` vector, so this layout is part of the on-disk format.
//!
//! Generation uses *full* 2D convolution (output grows by `kernel - 1`);
//! gradients use *valid* correlation (output shrinks by `kernel - 1`). The two
//! are adjoint to each other, which is what the delta recursion relies on.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    height: usize,
    width: usize,
    bands: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(height: usize, width: usize, bands: usize) -> Self {
        assert!(
            height > 0 && width > 0 && bands > 0,
            "Tensor3 dims must be positive"
        );
        Tensor3 {
            height,
            width,
            bands,
            data: vec![0.0; height * width * bands],
        }
    }

    pub fn from_vec(height: usize, width: usize, bands: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::shape(format!(
                "Tensor3 dims must be positive, got {height}x{width}x{bands}"
            )));
        }
        let expected = checked_len(height, width, bands)?;
        if data.len() != expected {
            return Err(Error::shape(format!(
                "Tensor3 {height}x{width}x{bands} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor3 {
            height,
            width,
            bands,
            data,
        })
    }

    /// Builds a single-band map from rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != w) {
            return Err(Error::shape("ragged rows"));
        }
        Tensor3::from_vec(
            h,
            w,
            1,
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.bands)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, b: usize) -> usize {
        debug_assert!(y < self.height && x < self.width && b < self.bands);
        (b * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, b: usize) -> f64 {
        self.data[self.index(y, x, b)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, b: usize, v: f64) {
        let i = self.index(y, x, b);
        self.data[i] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn band(&self, b: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn band_mut(&mut self, b: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[b * n..(b + 1) * n]
    }

    /// Copies one band out as a single-band tensor.
    pub fn band_tensor(&self, b: usize) -> Tensor3 {
        Tensor3 {
            height: self.height,
            width: self.width,
            bands: 1,
            data: self.band(b).to_vec(),
        }
    }

    pub fn same_dims(&self, other: &Tensor3) -> bool {
        self.dims() == other.dims()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn dot(&self, other: &Tensor3) -> f64 {
        debug_assert!(self.same_dims(other));
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: f64, other: &Tensor3) {
        assert!(self.same_dims(other), "add_scaled dims differ");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor3) -> f64 {
        assert!(self.same_dims(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

fn checked_len(h: usize, w: usize, b: usize) -> Result<usize> {
    h.checked_mul(w)
        .and_then(|n| n.checked_mul(b))
        .ok_or_else(|| Error::shape(format!("dimension overflow for {h}x{w}x{b}")))
}

/// Adds `scale * s (*) d` into `out`, where `s` is `s_h x s_w`, `d` is
/// `d_h x d_w` and `out` is the full-convolution grid
/// `(s_h + d_h - 1) x (s_w + d_w - 1)`. Zero entries of `s` are skipped, which
/// matters because feature maps are sparse.
#[allow(clippy::too_many_arguments)]
#[inline]
pub fn conv_full_acc(
    out: &mut [f64],
    s: &[f64],
    s_h: usize,
    s_w: usize,
    d: &[f64],
    d_h: usize,
    d_w: usize,
    scale: f64,
) {
    let out_w = s_w + d_w - 1;
    debug_assert_eq!(out.len(), (s_h + d_h - 1) * out_w);
    for y in 0..s_h {
        for x in 0..s_w {
            let v = s[y * s_w + x];
            if v == 0.0 {
                continue;
            }
            let v = v * scale;
            add_patch(out, out_w, y, x, d, d_h, d_w, v);
        }
    }
}

/// `out[y0 + p, x0 + q] += v * d[p, q]`
#[allow(clippy::too_many_arguments)]
#[inline]
pub fn add_patch(
    out: &mut [f64],
    out_w: usize,
    y0: usize,
    x0: usize,
    d: &[f64],
    d_h: usize,
    d_w: usize,
    v: f64,
) {
    for p in 0..d_h {
        let row = &mut out[(y0 + p) * out_w + x0..(y0 + p) * out_w + x0 + d_w];
        let drow = &d[p * d_w..(p + 1) * d_w];
        for (o, k) in row.iter_mut().zip(drow) {
            *o += v * k;
        }
    }
}

/// `sum_{p,q} b[y0 + p, x0 + q] * d[p, q]`
#[inline]
pub fn dot_patch(
    b: &[f64],
    b_w: usize,
    y0: usize,
    x0: usize,
    d: &[f64],
    d_h: usize,
    d_w: usize,
) -> f64 {
    let mut acc = 0.0;
    for p in 0..d_h {
        let row = &b[(y0 + p) * b_w + x0..(y0 + p) * b_w + x0 + d_w];
        let drow = &d[p * d_w..(p + 1) * d_w];
        for (a, k) in row.iter().zip(drow) {
            acc += a * k;
        }
    }
    acc
}

/// Masked variant of [`dot_patch`]: `sum w[..] * b[..] * d[..]`.
#[allow(clippy::too_many_arguments)]
#[inline]
pub fn dot_patch_weighted(
    b: &[f64],
    w: &[f64],
    b_w: usize,
    y0: usize,
    x0: usize,
    d: &[f64],
    d_h: usize,
    d_w: usize,
) -> f64 {
    let mut acc = 0.0;
    for p in 0..d_h {
        let off = (y0 + p) * b_w + x0;
        for q in 0..d_w {
            acc += w[off + q] * b[off + q] * d[p * d_w + q];
        }
    }
    acc
}

/// Adds the valid correlation of `b` (`b_h x b_w`) with `c` (`c_h x c_w`)
/// into `out` (`(b_h - c_h + 1) x (b_w - c_w + 1)`).
#[allow(clippy::too_many_arguments)]
#[inline]
pub fn correlate_valid_acc(
    out: &mut [f64],
    b: &[f64],
    b_h: usize,
    b_w: usize,
    c: &[f64],
    c_h: usize,
    c_w: usize,
    scale: f64,
) {
    let o_h = b_h - c_h + 1;
    let o_w = b_w - c_w + 1;
    debug_assert_eq!(out.len(), o_h * o_w);
    for i in 0..o_h {
        for j in 0..o_w {
            out[i * o_w + j] += scale * dot_patch(b, b_w, i, j, c, c_h, c_w);
        }
    }
}

/// Full 2D convolution of a single-band map `s` with every band of `d`.
///
/// Output is `(H_s + h_d - 1) x (W_s + w_d - 1) x C` where `C = d.bands()`.
pub fn conv_full(s: &Tensor3, d: &Tensor3) -> Result<Tensor3> {
    if s.bands() != 1 {
        return Err(Error::shape(format!(
            "conv_full expects a single-band map, got {} bands",
            s.bands()
        )));
    }
    let oh = s
        .height()
        .checked_add(d.height() - 1)
        .ok_or_else(|| Error::shape("conv_full height overflow"))?;
    let ow = s
        .width()
        .checked_add(d.width() - 1)
        .ok_or_else(|| Error::shape("conv_full width overflow"))?;
    checked_len(oh, ow, d.bands())?;
    let mut out = Tensor3::zeros(oh, ow, d.bands());
    for c in 0..d.bands() {
        conv_full_acc(
            out.band_mut(c),
            s.data(),
            s.height(),
            s.width(),
            d.band(c),
            d.height(),
            d.width(),
            1.0,
        );
    }
    Ok(out)
}

/// Valid 2D correlation `A[i,j] = sum_{p,q} B[p+i, q+j] C[p,q]` of single-band
/// maps.
pub fn correlate_valid(b: &Tensor3, c: &Tensor3) -> Result<Tensor3> {
    if b.bands() != 1 || c.bands() != 1 {
        return Err(Error::shape("correlate_valid expects single-band maps"));
    }
    if c.height() > b.height() || c.width() > b.width() {
        return Err(Error::shape(format!(
            "correlation kernel {}x{} larger than input {}x{}",
            c.height(),
            c.width(),
            b.height(),
            b.width()
        )));
    }
    let mut out = Tensor3::zeros(b.height() - c.height() + 1, b.width() - c.width() + 1, 1);
    correlate_valid_acc(
        out.data_mut(),
        b.data(),
        b.height(),
        b.width(),
        c.data(),
        c.height(),
        c.width(),
        1.0,
    );
    Ok(out)
}

/// Per-block categorical unpooling indicators.
///
/// Category `0` is the off-state (whole block zero); category `m >= 1` puts
/// the pooled value at position `m - 1` of the block, counted row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndicatorGrid {
    blocks_y: usize,
    blocks_x: usize,
    pool_y: usize,
    pool_x: usize,
    cats: Vec<u16>,
}

impl IndicatorGrid {
    /// All blocks start in the off-state.
    pub fn new(blocks_y: usize, blocks_x: usize, pool_y: usize, pool_x: usize) -> Self {
        assert!(blocks_y > 0 && blocks_x > 0 && pool_y > 0 && pool_x > 0);
        assert!(
            pool_y * pool_x < u16::MAX as usize,
            "pooling block too large"
        );
        IndicatorGrid {
            blocks_y,
            blocks_x,
            pool_y,
            pool_x,
            cats: vec![0; blocks_y * blocks_x],
        }
    }

    pub fn from_categories(
        blocks_y: usize,
        blocks_x: usize,
        pool_y: usize,
        pool_x: usize,
        cats: Vec<u16>,
    ) -> Result<Self> {
        let grid = IndicatorGrid::new(blocks_y, blocks_x, pool_y, pool_x);
        if cats.len() != blocks_y * blocks_x {
            return Err(Error::shape(
                "indicator category count does not match block grid",
            ));
        }
        if let Some(&c) = cats.iter().find(|&&c| c as usize > grid.block_len()) {
            return Err(Error::param(format!(
                "category {c} exceeds block length {}",
                grid.block_len()
            )));
        }
        Ok(IndicatorGrid { cats, ..grid })
    }

    pub fn blocks_y(&self) -> usize {
        self.blocks_y
    }

    pub fn blocks_x(&self) -> usize {
        self.blocks_x
    }

    pub fn pool_y(&self) -> usize {
        self.pool_y
    }

    pub fn pool_x(&self) -> usize {
        self.pool_x
    }

    /// Positions per block, not counting the off-state.
    pub fn block_len(&self) -> usize {
        self.pool_y * self.pool_x
    }

    pub fn num_categories(&self) -> usize {
        self.block_len() + 1
    }

    pub fn num_blocks(&self) -> usize {
        self.cats.len()
    }

    pub fn expanded_dims(&self) -> (usize, usize) {
        (self.blocks_y * self.pool_y, self.blocks_x * self.pool_x)
    }

    #[inline]
    pub fn category(&self, i: usize, j: usize) -> usize {
        self.cats[i * self.blocks_x + j] as usize
    }

    #[inline]
    pub fn set_category(&mut self, i: usize, j: usize, c: usize) {
        debug_assert!(c <= self.block_len());
        self.cats[i * self.blocks_x + j] = c as u16;
    }

    pub fn categories(&self) -> &[u16] {
        &self.cats
    }

    /// Expanded-grid coordinates of category `c` in block `(i, j)`.
    #[inline]
    pub fn position(&self, i: usize, j: usize, c: usize) -> Option<(usize, usize)> {
        if c == 0 {
            return None;
        }
        let m = c - 1;
        Some((
            i * self.pool_y + m / self.pool_x,
            j * self.pool_x + m % self.pool_x,
        ))
    }

    /// Active expanded-grid position of block `(i, j)`, if any.
    #[inline]
    pub fn active(&self, i: usize, j: usize) -> Option<(usize, usize)> {
        self.position(i, j, self.category(i, j))
    }

    /// Count of blocks per category (index 0 = off).
    pub fn counts(&self) -> Vec<usize> {
        let mut n = vec![0; self.num_categories()];
        for &c in &self.cats {
            n[c as usize] += 1;
        }
        n
    }

    pub fn active_count(&self) -> usize {
        self.cats.iter().filter(|&&c| c != 0).count()
    }

    /// Binary expansion: one entry per expanded-grid pixel, 1 where active.
    pub fn expand(&self) -> Vec<u8> {
        let (h, w) = self.expanded_dims();
        let mut out = vec![0u8; h * w];
        for i in 0..self.blocks_y {
            for j in 0..self.blocks_x {
                if let Some((y, x)) = self.active(i, j) {
                    out[y * w + x] = 1;
                }
            }
        }
        out
    }
}

fn check_unpool_dims(x_h: usize, x_w: usize, z: &IndicatorGrid) -> Result<()> {
    if x_h != z.blocks_y() || x_w != z.blocks_x() {
        return Err(Error::shape(format!(
            "pooled map {}x{} does not match indicator block grid {}x{}",
            x_h,
            x_w,
            z.blocks_y(),
            z.blocks_x()
        )));
    }
    Ok(())
}

/// `S[i,j] = X[i / p_y, j / p_x] * Z[i,j]` (0-indexed).
pub fn unpool_apply(x: &Tensor3, z: &IndicatorGrid) -> Result<Tensor3> {
    if x.bands() != 1 {
        return Err(Error::shape("unpool_apply expects a single-band map"));
    }
    check_unpool_dims(x.height(), x.width(), z)?;
    let (h, w) = z.expanded_dims();
    let mut out = Tensor3::zeros(h, w, 1);
    unpool_into(out.data_mut(), x.data(), z);
    Ok(out)
}

/// Writes the unpooled map into `out` (overwrites). Slice version of
/// [`unpool_apply`].
pub fn unpool_into(out: &mut [f64], x: &[f64], z: &IndicatorGrid) {
    let (_, w) = z.expanded_dims();
    out.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..z.blocks_y() {
        for j in 0..z.blocks_x() {
            if let Some((y, xx)) = z.active(i, j) {
                out[y * w + xx] = x[i * z.blocks_x() + j];
            }
        }
    }
}

/// Adjoint of unpooling: each pooled entry receives the value at the active
/// position of its block (0 for off blocks).
pub fn unpool_adjoint(s: &Tensor3, z: &IndicatorGrid) -> Result<Tensor3> {
    if s.bands() != 1 {
        return Err(Error::shape("unpool_adjoint expects a single-band map"));
    }
    if (s.height(), s.width()) != z.expanded_dims() {
        return Err(Error::shape("map does not match expanded indicator grid"));
    }
    let mut out = Tensor3::zeros(z.blocks_y(), z.blocks_x(), 1);
    unpool_adjoint_acc(out.data_mut(), s.data(), z);
    Ok(out)
}

pub fn unpool_adjoint_acc(out: &mut [f64], s: &[f64], z: &IndicatorGrid) {
    let (_, w) = z.expanded_dims();
    for i in 0..z.blocks_y() {
        for j in 0..z.blocks_x() {
            if let Some((y, x)) = z.active(i, j) {
                out[i * z.blocks_x() + j] += s[y * w + x];
            }
        }
    }
}
