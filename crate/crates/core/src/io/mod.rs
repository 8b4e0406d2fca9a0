//! Data sets, file formats and configuration.

mod checkpoint;
mod config;
mod idx;
mod metrics;
mod pgm;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngSnapshot, MAGIC, VERSION};
pub use config::{parse_config, parse_config_str, Config};
pub use idx::{parse_idx_images, parse_idx_labels, read_idx};
pub use metrics::MetricsWriter;
pub use pgm::{encode_pgm, tile_images, to_gray_bytes, write_pgm};

use crate::error::{Error, Result};
use crate::model::NetworkSpec;
use crate::tensor::Tensor3;

/// Images of identical dimensions with optional 0-based class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor3>,
    pub labels: Option<Vec<usize>>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<Tensor3>, labels: Option<Vec<usize>>, classes: usize) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Empty("data set has no images".into()));
        }
        let dims = images[0].dims();
        if let Some(n) = images.iter().position(|im| im.dims() != dims) {
            return Err(Error::shape(format!(
                "image {n} has dims {:?}, expected {dims:?}",
                images[n].dims()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != images.len() {
                return Err(Error::shape(format!(
                    "{} labels for {} images",
                    l.len(),
                    images.len()
                )));
            }
            if let Some(&bad) = l.iter().find(|&&v| v >= classes) {
                return Err(Error::OutOfRange(format!(
                    "label {bad} with {classes} classes"
                )));
            }
        }
        Ok(Dataset {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.images[0].dims()
    }

    /// First `n` images (all of them if `n` is larger).
    pub fn truncated(&self, n: usize) -> Dataset {
        let n = n.min(self.len()).max(1);
        Dataset {
            images: self.images[..n].to_vec(),
            labels: self.labels.as_ref().map(|l| l[..n].to_vec()),
            classes: self.classes,
        }
    }

    /// The images at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let images = idx.iter().map(|&i| self.images[i].clone()).collect();
        let labels = self
            .labels
            .as_ref()
            .map(|l| idx.iter().map(|&i| l[i]).collect());
        Dataset::new(images, labels, self.classes)
    }

    /// Smallest and largest pixel over all images.
    pub fn range(&self) -> (f64, f64) {
        self.images
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), im| {
                let (a, b) = im.min_max();
                (lo.min(a), hi.max(b))
            })
    }

    /// Checks image dims and, for supervised architectures, the label range.
    pub fn check_against(&self, spec: &NetworkSpec) -> Result<()> {
        let want = (spec.input_height, spec.input_width, spec.channels);
        if self.dims() != want {
            return Err(Error::shape(format!(
                "images are {:?}, the architecture expects {want:?}",
                self.dims()
            )));
        }
        if let Some(l) = &self.labels {
            if spec.supervised() {
                if let Some(&bad) = l.iter().find(|&&v| v >= spec.classes) {
                    return Err(Error::OutOfRange(format!(
                        "label {bad} but the architecture has {} classes",
                        spec.classes
                    )));
                }
            }
        }
        Ok(())
    }
}
