//! Semi-conditional normalizing flows for semi-supervised classification.
//!
//! A large unconditional flow maps inputs to a latent code, a multi-scale
//! split routes most coordinates straight to the prior, and a small
//! class-conditional flow (or a Gaussian mixture) scores the deepest
//! components per class. Joint and marginal likelihoods are exact, so the
//! semi-supervised objective (labelled joints + unlabelled marginals) is
//! optimized directly by SGD or by EM with single-gradient-step M-steps.

pub mod arch;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod graph;
pub mod layers;
pub mod net;
pub mod plot;
pub mod probe;
pub mod tensor;
pub mod threads;
pub mod train;

pub use error::{Error, Result};
pub use graph::{forward_eval, gradcheck, Ctx, Graph, Node, Param, ParamId, ParamStore};
pub use tensor::Tensor;
