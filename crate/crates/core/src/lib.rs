//! Factor-representation training against shortcut learning.
//!
//! A joint source/target classifier: a synthetic, uncorrelated source domain
//! teaches per-factor representations (shape, color, lightness, texture,
//! background); a correlated target domain is classified through an
//! association of those factors to its attribute and object labels.

pub mod datagen;
pub mod error;
pub mod eval;
pub mod model;
pub mod objectives;
pub mod tensorops;
pub mod trainer;
pub mod verify;

pub use error::{LabError, Result};
pub use tensorops::{Graph, Tensor, Var};
