//! Variational inference for state-space models with SMC samplers.
//!
//! The crate estimates a lower bound on the log evidence of a state-space
//! model by running a differentiable sequential Monte Carlo sampler with
//! parameters drawn from a variational family, and maximises that bound
//! jointly over the proposal parameters and the variational family.

pub mod autodiff;
pub mod diagnostics;
pub mod linalg;
pub mod quadrature;
pub mod rng;
pub mod smc;
pub mod variational;
pub mod models;
pub mod trainer;

#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/smc.md")]
    pub mod smc {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/models.md")]
    pub mod models {}
    #[doc = include_str!("../../../book/src/diagnostics.md")]
    pub mod diagnostics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
