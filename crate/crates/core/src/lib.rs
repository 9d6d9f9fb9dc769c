//! Singular value thresholding (SVT) for affine rank minimization and its
//! unrolled, trainable counterpart (learned SVT).

pub mod batch;
pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod linalg;
pub mod lowrank;
pub mod measurement;
pub mod network;
pub mod seeds;
pub mod storage;
pub mod svt;
pub mod training;

pub use datagen::{Dataset, LowRankInstance, Split, SplitSizes};
pub use error::{Error, Result};
pub use measurement::MeasurementOperator;
pub use network::{Theta, ThetaGrad};
pub use svt::SvtConfig;
