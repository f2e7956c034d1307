// `!(a < b)` comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod chance;
pub mod error;
pub mod ocp;
pub mod scenario;
pub mod setops;
pub mod sim;
pub mod sysmodel;
pub mod tube;

pub use error::{Error, Result};
