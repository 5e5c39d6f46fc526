//! Prototype-driven multi-expert segmentation of multi-modal brain MRI.

pub mod autograd;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod ctp;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod kiimi;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod pfrf;
pub mod plot;
pub mod training;
pub mod verify;
pub mod report;
pub mod tensor;

pub use error::{Error, Result};
