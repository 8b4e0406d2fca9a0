//! Architecture, parameters, latent state and the generative pass.

mod decode;
mod dicts;
mod spec;
mod state;

pub use decode::{
    center_category, decode, decode_with_top, g_response, generative_decode, residual,
    respond_unit, respond_x, sample_prior_image, visualize_dictionary, Activations, PriorOptions,
    PriorSample,
};
pub use dicts::DictionarySet;
pub use spec::{dirichlet_concentration, Hyperparams, LayerGeometry, LayerSpec, NetworkSpec};
pub use state::LatentState;
