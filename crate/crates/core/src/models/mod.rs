//! Reference models.

pub mod gmm;
pub mod pk;
