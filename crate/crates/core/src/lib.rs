//! Sparse recurrent language models, their Lyapunov spectra, and a
//! spectrum-guided search over dynamic sparse training configurations.

pub mod cells;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod linalg;
pub mod ls_space;
pub mod lyapunov;
pub mod pipeline;
pub mod rundir;
pub mod search;
pub mod seed;
pub mod sparsity;
pub mod training;

pub use error::{Error, Result};
