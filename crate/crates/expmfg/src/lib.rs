//! Solvers and verifiers for N-player and mean-field exponential-utility
//! investment games under relative performance concerns.
//!
//! Each player manages one asset driven by an idiosyncratic Brownian motion
//! and one driven by a common shock, and maximises
//! `E[-exp(-alpha (X_T - theta * peer_average))]`. The crate provides:
//!
//! - [`market`]: model configuration, layered common/idiosyncratic path
//!   simulation, wealth dynamics and utilities;
//! - [`closed_form`]: exact equilibria for deterministic-in-(t, type)
//!   return rates, with the coupling linear system as the authoritative
//!   definition;
//! - [`bsde`]: generic least-squares Monte-Carlo backward induction with
//!   Picard iteration and empirical BMO proxies;
//! - [`nplayer`]: the constructive pipeline for the N-player game
//!   (benchmark mean-field equations, deviation fixed point, inverse
//!   transforms back to the equilibrium);
//! - [`mfg`]: mean-field solvers (common-noise conditional equations,
//!   the scalar population fixed point for independent assets, the
//!   characteristic slope equation and time marching);
//! - [`verification`]: Nash checks via the martingale optimality principle
//!   and the finite-population convergence study;
//! - [`assumptions`]: literal evaluation of every sufficient smallness
//!   condition with analytic or empirical norm proxies;
//! - [`cli`]: config parsing, orchestration and machine-readable outputs
//!   behind the `expmfg` binary.
//!
//! Runnable walkthroughs live in `examples/`.

// Grid code walks several same-shaped arrays per index; iterator zips would
// obscure the stencil.
#![allow(clippy::needless_range_loop)]

pub mod assumptions;
pub mod bsde;
pub mod cli;
pub mod closed_form;
pub mod config_io;
pub mod error;
pub mod market;
pub mod mfg;
pub mod nplayer;
pub mod verification;

pub use error::{Error, Result};
