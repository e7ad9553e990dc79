//! Spatially adaptive bandwidth estimation with a mixture of Gaussian
//! process experts gated by multinomial kernel logistic regression.

pub mod complexity;
pub mod dataset;
pub mod datagen;
pub mod error;
pub mod gpr;
pub mod kernels;
pub mod lls;
pub mod mklr;
pub mod saber;

pub use dataset::Dataset;
pub use error::{Result, SaberError};
pub use kernels::{Bandwidth, EigenPair};
