use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor3;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        kind: "IDX",
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err(path, "truncated header"))
}

/// Parses an IDX image file (unsigned bytes, `count x rows x cols`) into
/// single-band images scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<Vec<Tensor3>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IMAGES_MAGIC {
        return Err(format_err(path, format!("bad image magic {magic:#010x}")));
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    if rows == 0 || cols == 0 {
        return Err(format_err(path, "zero image dimension"));
    }
    let plane = rows * cols;
    let need = count
        .checked_mul(plane)
        .and_then(|n| n.checked_add(16))
        .ok_or_else(|| format_err(path, "dimension overflow"))?;
    if bytes.len() < need {
        return Err(format_err(
            path,
            format!("truncated: need {need} bytes, have {}", bytes.len()),
        ));
    }
    Ok(bytes[16..need]
        .chunks_exact(plane)
        .map(|px| {
            let data = px.iter().map(|&b| b as f64 / 255.0).collect();
            Tensor3::from_vec(rows, cols, 1, data).expect("positive dims")
        })
        .collect())
}

/// Parses an IDX label file into raw byte labels.
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != LABELS_MAGIC {
        return Err(format_err(path, format!("bad label magic {magic:#010x}")));
    }
    let count = be_u32(bytes, 4, path)? as usize;
    if bytes.len() < 8 + count {
        return Err(format_err(
            path,
            format!("truncated: need {} bytes, have {}", 8 + count, bytes.len()),
        ));
    }
    Ok(bytes[8..8 + count].to_vec())
}

/// Reads an IDX image file and, optionally, its label file. Labels are
/// mapped to 0-based class indices; the class count is `max label + 1`.
pub fn read_idx(images: &Path, labels: Option<&Path>) -> Result<Dataset> {
    let imgs = parse_idx_images(&fs::read(images)?, images)?;
    let (labels, classes) = match labels {
        Some(p) => {
            let raw = parse_idx_labels(&fs::read(p)?, p)?;
            if raw.len() != imgs.len() {
                return Err(format_err(
                    p,
                    format!("{} labels for {} images", raw.len(), imgs.len()),
                ));
            }
            let classes = raw.iter().copied().max().map_or(0, |m| m as usize + 1);
            (Some(raw.into_iter().map(|l| l as usize).collect()), classes)
        }
        None => (None, 0),
    };
    Dataset::new(imgs, labels, classes)
}
