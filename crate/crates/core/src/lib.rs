//! Coarse-to-fine recurrent optical flow estimation.

pub mod checkpoint;
pub mod config;
pub mod correlation;
pub mod data_io;
pub mod error;
pub mod eval;
pub mod features;
pub mod loss;
pub mod nn;
pub mod pipeline;
pub mod selftest;
pub mod train;
pub mod types;
pub mod update;

pub use error::{FlowError, Result};
