pub mod error;
pub mod malliavin;
pub mod model;
pub mod pricing;
mod quadrature;
pub mod rng;
pub mod sandwich;
pub mod skewlab;
pub mod volterra;

pub use error::{Error, Result};
pub use model::{AFn, BoundFunctions, DriftMode, ModelSpec, SandwichDrift, SandwichModel, TimeFn};
pub use sandwich::PathBundle;
pub use volterra::{KernelSpec, KernelTable, TimeGrid};
