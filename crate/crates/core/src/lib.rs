//! Trajectory optimization, time-varying LQR stabilization and sampled
//! region-of-attraction ("funnel") estimation for planar free-floating
//! rigid-body systems.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod error;
pub mod funnel;
pub mod linalg;
pub mod optim;
pub mod roa;
pub mod trajectory;
pub mod scenarios;
pub mod sim;
pub mod trajopt;
pub mod tvlqr;

pub use error::{Error, Result};
