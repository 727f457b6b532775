//! Autonomous topology control for power grids.
//!
//! The crate bundles everything needed to train and evaluate agents that keep
//! a transmission grid's lines lightly loaded by switching lines and splitting
//! substations between their two bus-bars:
//!
//! - [`grid`]: static network description and switching state.
//! - [`powerflow`]: Newton-Raphson AC and linear DC power flow.
//! - [`chronics`]: time-series scenarios (CSV layout and synthetic generator).
//! - [`config`]: TOML run configuration.
//! - [`actions`]: discrete action space, reduction and legality rules.
//! - [`env`]: the step/simulate environment with operating rules and scoring.
//! - [`nn`]: dueling Q-network with hand-written backward pass and Adam.
//! - [`replay`]: prioritized experience replay.
//! - [`imitation`]: exhaustive one-step labelling and supervised pretraining.
//! - [`training`]: guided-exploration deep Q-learning.
//! - [`evaluation`]: early-warning policy, batch evaluation and reports.

pub mod actions;
pub mod chronics;
pub mod config;
pub mod env;
pub mod error;
pub mod evaluation;
pub mod grid;
pub mod imitation;
pub mod nn;
pub mod powerflow;
pub mod replay;
pub mod training;

pub use error::{Error, Result};
