pub mod autodiff;
pub mod config;
pub mod datagen;
pub mod distance;
pub mod error;
pub mod experiment;
pub mod inference;
pub mod measures;
pub mod models;
pub mod optim;
pub mod rng;
pub mod surrogate;
pub mod verify;

pub use error::{Error, Result};
