//! Spike-driven cross-view retrieval.
//!
//! The crate bundles a small reverse-mode tensor engine, LIF / NI-LIF
//! spiking neurons, the spike-driven backbone with its two auxiliary
//! training blocks (selective attention and hybrid state space), the
//! re-ranking alignment objectives, retrieval metrics, theoretical energy
//! accounting, and the plumbing used by the `spikevim` command line tool.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod embedding;
pub mod energy;
pub mod error;
pub mod hral;
pub mod model;
pub mod optim;
pub mod retrieval;
pub mod spiking;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
