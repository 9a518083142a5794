//! Adversarial-climbing attribution toolkit: a small f64 autodiff engine, a
//! GAP-headed convolutional classifier, class activation maps, iterative
//! anti-adversarial climbing with masking regularization, a synthetic shapes
//! benchmark, and seed-quality evaluation.

pub mod cam;
pub mod cli;
pub mod climb;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod synthdata;
pub mod tensor;
