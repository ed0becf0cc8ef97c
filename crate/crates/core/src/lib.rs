//! Training lab for small GANs on 2D Gaussian mixtures, with
//! distribution-fitting penalties and sampling-theory diagnostics.

pub mod autodiff;
pub mod config;
pub mod eval;
pub mod experiment;
pub mod fitting;
pub mod matrix;
pub mod mixture;
pub mod nn;
pub mod report;
pub mod sums;
pub mod theory;
pub mod trainer;
