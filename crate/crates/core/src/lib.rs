//! Relation-shape convolution (RS-Conv) for point clouds.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: reverse-mode autodiff over dense tensors.
//! * [`geometry`]: sampling, neighbourhoods, local frames and low-level
//!   relations between points.
//! * [`conv`]: the RS-Conv operator and the grid-convolution equivalence.
//! * [`networks`]: classification, segmentation and normal-estimation
//!   hierarchies.
//! * [`data`]: synthetic shapes, file formats, augmentation.
//! * [`train`]: Adam, schedules, training loop, invariance and density
//!   harnesses, configuration and checkpoints.

pub mod conv;
pub mod data;
mod error;
pub mod exec;
pub mod geometry;
pub mod gradcheck;
pub mod networks;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use exec::Exec;
