//! Numerical laboratory for degree-1 sphere-valued fields on the flat torus:
//! a coupled map/metric gradient flow over an explicit one-parameter metric
//! family, concentrated-bubble test data built from the periodic Green's
//! function, and an auditor for the quantitative stability estimates that
//! relate every residual to the square root of the energy defect.

pub mod audit;
pub mod bubbles;
pub mod cli;
pub mod config;
pub mod error;
pub mod fields;
pub mod flow;
pub mod io;
pub mod metric;
pub mod numerics;
pub mod projection;
pub mod sphere;
pub mod torus;

pub use error::BubbleflowError;
