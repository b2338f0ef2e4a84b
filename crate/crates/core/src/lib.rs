//! Time-varying control of a flow-matching diffusion transformer through a
//! zero-initialized control branch, on a synthetic invertible spectrogram domain.

pub mod checkpoint;
pub mod ctrlnet;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod flow;
pub mod io;
pub mod model;
pub mod nn;
pub mod synthdata;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
