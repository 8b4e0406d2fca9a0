//! Stochastic Monte Carlo EM training and test-time feature inference.

mod infer;
mod objective;
mod rmsprop;
mod train;

pub use infer::{
    average_decisions, classify, decisions, infer_dataset, infer_features, inference_objective,
    initial_state, model_average, update_z, InferConfig, Inferred,
};
pub use objective::{
    accumulate_likelihood_grad, backprop_delta, grad_dictionary, qbar, qbar_gradient,
    sample_energy, SampleSet,
};
pub use rmsprop::{rmsprop_step, RmspropState};
pub use train::{
    gibbs_train, random_state, train, GibbsRun, Init, IterationMetrics, TrainConfig, Trainer,
};
