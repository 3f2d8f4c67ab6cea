//! Distributionally robust optimization over CVaR and χ² uncertainty sets.
//!
//! The crate minimizes worst-case expected losses
//!
//! ```text
//! L(x; P0) = sup_{Q : D_phi(Q, P0) <= rho} { E_Q[loss(x; S)] - lambda * D_psi(Q, P0) }
//! ```
//!
//! for four uncertainty sets ([`RobustSpec`]): CVaR at level α, KL-regularized
//! CVaR, χ²-penalized and χ²-constrained. The building blocks are
//!
//! - [`inner`]: exact maximizers `q*` over the simplex for a batch of losses,
//!   with the dual variable `η*` and the robust value;
//! - [`estimators`]: the mini-batch gradient `Σ q*_i ∇loss_i`, the multilevel
//!   Monte Carlo (MLMC) estimator with truncated geometric levels, and the
//!   per-sample dual gradients;
//! - [`optim`]: projected SGM, Nesterov acceleration, averaging, step sizes;
//! - [`doubling`]: the λ-interval scheme for the χ²-constrained objective;
//! - [`problems`]: analytic hard instances, synthetic and CSV-backed
//!   logistic problems;
//! - [`oracle`]: exact full-batch objectives, brute-force simplex search and
//!   Monte Carlo bias/variance measurement used for verification;
//! - [`cli`] and [`verify`]: the experiment runner behind the `dro` binary.

pub mod batch;
pub mod cli;
pub mod doubling;
pub mod error;
pub mod estimators;
pub mod inner;
pub mod objective;
pub mod optim;
pub mod oracle;
pub mod problems;
pub mod rng;
pub mod stats;
pub mod verify;
pub mod weights;

pub use batch::LossBatch;
pub use error::{DroError, Result};
pub use estimators::EstimatorOutput;
pub use inner::{BisectionConfig, InnerSolution};
pub use objective::RobustSpec;
pub use problems::Problem;
pub use rng::RngStream;
pub use weights::Weights;
