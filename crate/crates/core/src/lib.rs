//! Multiple kernel learning: kernel banks, regularizer families and their
//! conjugate forms, alternating-minimization training and empirical Bayes.

pub mod bayes;
pub mod conjcheck;
pub mod error;
pub mod gram;
pub mod io;
pub mod regfam;
pub mod solver;

pub use error::{MklError, Result};
