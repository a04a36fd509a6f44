pub mod attacks;
pub mod data;
pub mod error;
pub mod eval;
pub mod harness;
pub mod model;
pub mod multiview;
pub mod rng;
pub mod trigger;
pub mod verification;
pub mod watermark;

pub use error::{Error, Result};
