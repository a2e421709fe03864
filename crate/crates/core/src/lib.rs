pub mod cli;
pub mod compat_verifier;
pub mod data;
pub mod error;
pub mod eval;
pub mod files;
pub mod label_model;
pub mod losses;
pub mod network;
pub mod pairing;
pub mod plane;
pub mod trainer;

pub use error::{Error, Result};
