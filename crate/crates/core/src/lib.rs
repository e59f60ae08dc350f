//! Fast likelihoods for probability-flow ODEs.
//!
//! The crate computes `log p(x)` for diffusion and flow-matching models by
//! integrating the state ODE `dx/dt = v_t(x)` together with the scalar
//! log-density ODE `dl/dt = div v_t(x)`. The divergence can come from
//!
//! * the exact Jacobian trace,
//! * stochastic trace estimators ([`trace`]: Hutchinson, Hutch++, XTrace),
//! * a distilled scalar head that predicts the Langevin-Stein residual on top
//!   of the cheap baseline `-<v, s>` ([`stad`]).
//!
//! Everything needed to check these against ground truth lives here too:
//! analytic Gaussian and Gaussian-mixture targets with closed-form marginal
//! scores ([`targets`], [`dynamics`]), small MLPs with analytic derivatives
//! ([`net`]), teacher training ([`train`]) and an adaptive Dormand-Prince
//! integrator ([`odelik`]).

pub mod dynamics;
pub mod error;
pub mod linalg;
pub mod net;
pub mod odelik;
pub mod par;
pub mod rng;
pub mod stad;
pub mod targets;
pub mod trace;
pub mod train;

pub use error::{Error, Result};
