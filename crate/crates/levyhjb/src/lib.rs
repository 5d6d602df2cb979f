//! Spectral Galerkin simulation and dynamic-programming feedback control of
//! the stochastic 2D Navier-Stokes equations forced by colored Gaussian and
//! finite-activity Levy noise.
//!
//! The crate is organized around the pipeline:
//!
//! - [`spectral`]: divergence-free Fourier eigenbasis of the Stokes operator
//!   on the torus, fractional calculus and the exact convective tensor;
//! - [`noise`]: colored Wiener increments and the compensated jump component;
//! - [`sde`]: exponential-Euler time stepping of the state and its first and
//!   second tangent flows, with all pathwise accumulators;
//! - [`fk`]: Monte Carlo semigroup estimators and the stochastic-integral
//!   gradient/Hessian representations;
//! - [`hjb`]: Hamiltonian, feedback law, cost functionals, the Picard
//!   iteration for the mild-form value function, and the closed-loop
//!   experiment drivers;
//! - [`config`] / [`report`] / [`validate`]: experiment configuration,
//!   machine-readable run reports, and the invariant battery.

pub mod config;
pub mod fk;
pub mod hjb;
pub mod noise;
pub mod report;
pub mod rng;
pub mod sde;
pub mod spectral;
pub mod validate;
