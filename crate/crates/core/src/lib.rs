//! Proxy race inference, regression auditing and misclassification bias.

pub mod audit;
pub mod error;
pub mod io;
pub mod labels;
pub mod misclass;
pub mod proxy;
pub mod regress;
pub mod synth;

pub use error::{Error, Result};
pub use labels::{CategorySet, DEFAULT_LABELS};
