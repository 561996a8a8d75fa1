//! Numerical laboratory for the Hyers-Ulam-Rassias stability of generalized
//! Jordan derivations from a finite-dimensional unital algebra into a
//! unit-linked bimodule.

pub mod algebra;
pub mod config;
pub mod error;
pub mod hyers;
pub mod linalg;
pub mod linmap;
pub mod oracle;
pub mod report;
pub mod sampling;
pub mod verify;

pub use error::{Error, Result};
