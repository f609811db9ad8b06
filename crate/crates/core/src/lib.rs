//! Two-stage multi-view segmentation of polarized thin-section image stacks:
//! grain-edge detection and four-class lithology segmentation.

pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod entropy;
pub mod error;
pub mod grid;
mod kernels;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
