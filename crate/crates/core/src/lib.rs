pub mod entropy;
pub mod error;
pub mod fock;
pub mod gaussian;
pub mod npa;
pub mod optimizer;
pub mod protocols;

pub use error::{Error, Result};
