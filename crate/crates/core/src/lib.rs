//! Contact-implicit motion imitation for point-foot legged robots.

// `!(x > 0.0)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod contact;
pub mod error;
pub mod model;
pub mod mpc;
pub mod mrp;
pub mod retarget;
pub mod sim;
pub mod terrain;
pub mod trajopt;
pub mod testkit;
pub mod util;

pub use error::{Error, Result};
