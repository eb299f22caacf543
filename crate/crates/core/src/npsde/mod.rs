//! Sparse Gaussian-process SDE fitted to irregular observations.

mod fit;
mod kernel;
mod loglik;
mod model;

pub use fit::{fit_npsde, inducing_grid, initial_model, state_bounds, FitLog, NpsdeConfig, MAX_DEFAULT_INDUCING};
pub use kernel::SqExpKernel;
pub use loglik::{
    log_posterior_gradient, mc_loglik, mc_loglik_gradient, sensitivity_step, unit_loglik, MonteCarloOptions,
    DEFAULT_RESTART_GAP_STEPS,
};
pub use model::{
    gp_interp_diffusion, gp_interp_drift, InducingSet, LocalDerivatives, NpsdeModel, NpsdeParams, ThetaLayout,
    DEFAULT_JITTER, MAX_CONDITION,
};
