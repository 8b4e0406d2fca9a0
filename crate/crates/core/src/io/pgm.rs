use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor3;

/// Maps a single-band image to bytes: min-max scaled to `0..=255`, rounded
/// half to even. A constant image maps to its value clamped to `[0, 1]`.
pub fn to_gray_bytes(image: &Tensor3) -> Result<Vec<u8>> {
    if image.bands() != 1 {
        return Err(Error::shape(format!(
            "PGM needs a single band, got {}",
            image.bands()
        )));
    }
    if !image.is_finite() {
        return Err(Error::param("image contains non-finite values"));
    }
    let (lo, hi) = image.min_max();
    let span = hi - lo;
    Ok(image
        .data()
        .iter()
        .map(|&v| {
            let u = if span > 0.0 {
                (v - lo) / span
            } else {
                v.clamp(0.0, 1.0)
            };
            (u * 255.0).round_ties_even().clamp(0.0, 255.0) as u8
        })
        .collect())
}

/// Encodes a binary `P5` greymap with maxval 255.
pub fn encode_pgm(image: &Tensor3) -> Result<Vec<u8>> {
    let px = to_gray_bytes(image)?;
    let mut out = format!("P5\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend_from_slice(&px);
    Ok(out)
}

pub fn write_pgm(image: &Tensor3, path: &Path) -> Result<()> {
    fs::write(path, encode_pgm(image)?)?;
    Ok(())
}

/// Tiles equally sized single-band images row-major into a grid with a
/// one-pixel gap, after min-max normalising each tile to `[0, 1]`.
pub fn tile_images(tiles: &[Tensor3], cols: usize) -> Result<Tensor3> {
    let first = tiles
        .first()
        .ok_or_else(|| Error::Empty("no tiles".into()))?;
    let (th, tw) = (first.height(), first.width());
    if tiles.iter().any(|t| t.dims() != (th, tw, 1)) {
        return Err(Error::shape("tiles must be single-band and equally sized"));
    }
    let cols = cols.max(1);
    let rows = tiles.len().div_ceil(cols);
    let mut out = Tensor3::zeros(rows * (th + 1) - 1, cols * (tw + 1) - 1, 1);
    for (n, t) in tiles.iter().enumerate() {
        let (r, c) = (n / cols, n % cols);
        let (lo, hi) = t.min_max();
        let span = hi - lo;
        for y in 0..th {
            for x in 0..tw {
                let v = t.get(y, x, 0);
                let u = if span > 0.0 { (v - lo) / span } else { 0.5 };
                out.set(r * (th + 1) + y, c * (tw + 1) + x, 0, u);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_half_rounds_to_even() {
        let img = Tensor3::from_vec(1, 1, 1, vec![0.5]).unwrap();
        assert_eq!(to_gray_bytes(&img).unwrap(), vec![128]);
    }

    #[test]
    fn multiband_rejected() {
        assert!(encode_pgm(&Tensor3::zeros(2, 2, 3)).is_err());
    }

    #[test]
    fn header_layout() {
        let img = Tensor3::from_rows(&[&[0.0, 1.0, 2.0]]).unwrap();
        let bytes = encode_pgm(&img).unwrap();
        assert!(bytes.starts_with(b"P5\n3 1\n255\n"));
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 128, 255]);
    }
}
