//! Visual-force goal prediction and execution for tabletop manipulation.
//!
//! The crate is organized around a single pipeline: a synthetic RGBD world
//! ([`sim`]) produces keyframe supervision ([`dataset`]), a text-conditioned
//! RGBD transformer ([`model`]) learns to predict visual-force goals
//! ([`goals`]), and a visual-force servoing controller ([`controller`])
//! executes those goals through an action-primitive state machine. Training
//! losses, the optimizer loop, and evaluation metrics live in [`training`].
//!
//! Everything is deterministic under a fixed seed: scene generation,
//! augmentation, weight init, shuffling, and episode rollouts.

pub mod config;
pub mod controller;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod goals;
pub mod gripforce;
pub mod model;
pub mod nn;
pub mod sim;
pub mod training;
pub mod viz;

pub use error::Error;
