//! Simulation and analysis of over-the-air federated learning on fading
//! multiple-access channels with imperfect channel state information.
//!
//! The crate covers data ingestion and non-i.i.d. partitioning ([`data`]),
//! softmax regression with local SGD ([`model`]), the block-fading uplink
//! ([`channel`]), the round engines for CHARLES, COTAF and FedAvg
//! ([`algorithms`]), the convergence-bound evaluator ([`bounds`]) and the
//! experiment driver behind the `airfl` binary ([`config`], [`experiment`],
//! [`trace`], [`table`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod algorithms;
pub mod bounds;
pub mod channel;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod model;
pub mod rng;
pub mod table;
pub mod trace;

pub use error::{Error, Result};
