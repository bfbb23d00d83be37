//! Power divergences on Q-function space and minimum-divergence estimation
//! of optimal treatment policies.
//!
//! The library has five pieces:
//!
//! - [`qcore`]: Q-functions on finite grids, trajectory data, greedy policies,
//!   policy equivalence and exact/IPW value functions.
//! - [`divergence`]: the gamma-power divergence family (which vanishes exactly
//!   on policy-equivalence classes), the beta-power/eKL/normalized-KL
//!   contrasts, and the limit identities tying the family to value gaps and
//!   to geometric and harmonic means.
//! - [`models`]: the multiplicative semiparametric model
//!   `Q(x, a) = exp{f(x) + g(x, a, psi)}` with linear policy components.
//! - [`estimators`]: minimum gamma-power and beta-power divergence fitting,
//!   the maximum-likelihood Q-learning baseline, sandwich covariances,
//!   propensity fitting and multi-stage backward induction.
//! - [`simulate`]: the replication harness for the two single-stage
//!   scenarios (correct and misspecified nuisance) with mean/RMSE reporting.

pub mod divergence;
pub mod error;
pub mod estimators;
pub mod linalg;
pub mod models;
pub mod optim;
pub mod qcore;
pub mod simulate;

pub use error::{Error, Result};
