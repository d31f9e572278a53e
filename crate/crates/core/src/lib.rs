//! Progressive adversarial distillation of a shared temporal motion module
//! across several frozen per-frame base denoisers, on synthetic clips.

pub mod autodiff;
pub mod clip;
pub mod config;
pub mod cross_rank;
pub mod datagen;
pub mod distill;
pub mod error;
pub mod eval;
pub mod fsutil;
pub mod gradcheck;
pub mod nets;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod schedule;
pub mod solvers;
pub mod tensor;

pub use clip::{Clip, ClipBatch};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use nets::{Condition, NetDims};
pub use schedule::NoiseSchedule;
