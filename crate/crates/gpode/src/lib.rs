//! Bayesian learning of ODE vector fields from noisy trajectory snapshots.
//!
//! The model places a sparse Gaussian-process prior on the vector field,
//! warps it with a stack of planar flows, and fits a flow-augmented
//! variational posterior over the inducing outputs. Trajectories are produced
//! by fixed-step Runge-Kutta integration and gradients flow through the
//! unrolled steps via the crate's own reverse-mode tape, so the whole
//! evidence lower bound is differentiable end to end.
//!
//! Layout: numerical foundations ([`autodiff`], [`kernels`]), model pieces
//! ([`flows`], [`sparse_gp`], [`dynamics`]), training ([`inference`]), and
//! the experiment tooling around them ([`data`], [`metrics`], [`config`],
//! [`checkpoint`], [`experiments`]).

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod flows;
pub mod inference;
pub mod kernels;
pub mod metrics;
pub mod sparse_gp;

pub use error::{Error, Result};
