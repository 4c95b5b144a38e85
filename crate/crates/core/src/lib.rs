pub mod basis;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod fock;
pub mod pump;
pub mod tomography;

pub use error::{Error, Result};
