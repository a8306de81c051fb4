//! Translucent adversarial patches against a micro grid detector, a
//! counter-detector that looks for the patches, and the scoring that weighs
//! the two against each other.

pub mod bbox;
pub mod dataset;
pub mod detector;
pub mod diffcore;
pub mod error;
pub mod evaluator;
pub mod imageio;
pub mod kv;
pub mod patch_trainer;
pub mod patcher;

pub use bbox::{BoundingBox, ClassMap};
pub use error::{Error, Result};
