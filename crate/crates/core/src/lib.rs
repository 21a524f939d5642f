pub mod datagen;
pub mod error;
pub mod eval;
pub mod losses;
pub mod models;
pub mod runner;
pub mod strategies;

pub use error::{Error, Result};
