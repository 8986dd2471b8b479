#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod inference;
pub mod irl;
pub mod methods;
pub mod policy;
pub mod qreg;
pub mod regime;
pub mod report;
pub mod rng;
pub mod serde_ext;
pub mod sim;
pub mod win_ratio;

pub use error::{Error, Result};
