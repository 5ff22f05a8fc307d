//! Semi-supervised segmentation of layered structures.
//!
//! A network predicts, for every surface and image column, a distribution
//! over rows. The [`topo`] engine turns those distributions into ordered
//! surface positions and mutually exclusive layer maps, fully
//! differentiably. The layer maps, a texture channel and a variational style
//! code reconstruct the input image, which lets unlabeled images contribute
//! to training alongside the anatomical priors in [`losses`].

#![allow(clippy::needless_range_loop)]

pub mod autograd;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod gradcheck;
mod kernels;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod topo;
pub mod train;

pub use error::{Error, Result};
pub use kernels::FlushDenormals;
pub use losses::{LossBreakdown, LossTerms, LossWeights, PriorConstants};
pub use tensor::Tensor;
pub use topo::{AnatomyFactors, CumulativeMaps, Grid3, SurfaceCurveSet, SurfaceProbabilityMap};
