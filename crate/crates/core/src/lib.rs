//! Deep generative deconvolutional image model.
//!
//! Images are synthesised top-down: sparse top-layer weight maps are convolved
//! with learned dictionaries, stochastically unpooled, and convolved again
//! until the data plane is reached. The crate provides
//!
//! * the numerical kernels ([`tensor`]) and samplers ([`distributions`]),
//! * the model itself ([`model`]) with its Gibbs conditionals ([`gibbs`]),
//! * a Bayesian max-margin classifier head ([`svm`]),
//! * Monte Carlo EM training and test-time feature inference ([`mcem`]),
//! * layer-wise unsupervised initialisation ([`pretrain`]),
//! * generation, inpainting and dictionary visualisation ([`tasks`]),
//! * file formats and configuration ([`io`]).

pub mod distributions;
pub mod error;
pub mod gibbs;
pub mod io;
pub mod mcem;
pub mod model;
pub mod pretrain;
pub mod svm;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{DictionarySet, Hyperparams, LatentState, LayerSpec, NetworkSpec};
pub use tensor::{IndicatorGrid, Tensor3};
