//! Minimal reverse-mode autodiff over dense f64 tensors.
//!
//! Sized for the desk-scale models in this crate: a tape of enum ops, a
//! flat parameter store shared across per-sample tapes, and an Adam
//! optimizer. Analytic gradients here are independently validated against
//! central finite differences in the test suites.

pub mod adam;
pub mod tape;
pub mod tensor;

pub use adam::Adam;
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
