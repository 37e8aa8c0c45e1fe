//! Learning from demonstration with hidden semi-Markov models.
//!
//! Demonstrations are encoded as HSMMs with Gaussian emissions (optionally
//! task-parameterized, with factor-analysis or semi-tied covariances), or
//! clustered nonparametrically. A step-wise reference is decoded from the
//! duration model and tracked with a linear quadratic controller.

pub mod error;
pub mod gaussian;
pub mod latent;
pub mod linalg;
pub mod markov;

pub use error::{Error, Result};
pub mod bnp_sva;
pub mod lqt;
pub mod task_params;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod synth;
