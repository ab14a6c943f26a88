//! Flow-matching diffusion transformer conditioned on captions, geolocation
//! and sparse point prompts through adaptive local attention, with a
//! synthetic point-to-layout dataset that has exact oracles.

pub mod ala;
pub mod autograd;
pub mod checkpoint;
pub mod conditioning;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod flow;
pub mod gradcheck;
pub mod image;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod repa;
pub mod sampler;
pub mod tensor;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
