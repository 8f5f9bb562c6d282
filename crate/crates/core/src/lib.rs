//! Three-stage training of 3D volume classifiers: Barlow Twins
//! self-supervision on unlabeled data, frozen-teacher self-distillation on a
//! related labeled set, and fine-tuning on a small target set.

pub mod augment;
pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod parallel;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
