//! Full conditionals of the deep model and the sweeps that chain them.

mod cache;
mod kernels;
mod sweep;

pub use cache::ResidualCache;
pub use kernels::{
    dictionary_pixel_posterior, indicator_probabilities, sample_dictionary_pixel, sample_gamma_e,
    sample_gamma_s, sample_theta, sample_top_site, sample_top_weight, sample_unpool_indicator,
    theta_posterior, top_weight_posterior, PixelImage, SvmCoupling, TopPosterior, TopSite,
};
pub use sweep::{
    gibbs_sweep, local_sweep, purpose, refresh_betas, sample_dictionaries, top_responses,
    SweepMode, SweepOptions,
};
