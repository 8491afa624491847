//! One-shot image generation with a transformer global network and a stack of
//! convolutional local networks, trained stage by stage against a patch critic.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the bottom of this file name the common instantiations.

pub mod autodiff;
pub mod critic;
pub mod error;
pub mod global_net;
pub mod imageio;
pub mod local_net;
pub mod metrics;
pub mod nn;
pub mod scalar;
pub mod schedule;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type GeneratorStack32 = local_net::GeneratorStack<f32>;
pub type GeneratorStack64 = local_net::GeneratorStack<f64>;
pub type Critic32 = critic::Critic<f32>;
pub type Critic64 = critic::Critic<f64>;
pub type Trainer32 = training::Trainer<f32>;
pub type Trainer64 = training::Trainer<f64>;
pub type Image32 = imageio::Image<f32>;
pub type Image64 = imageio::Image<f64>;
