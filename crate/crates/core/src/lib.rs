//! Multimodal generalized category discovery on synthetic paired features.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
