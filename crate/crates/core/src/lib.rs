//! Reconstruction of partially observed functional data.
//!
//! Curves observed on fragments `O ⊂ [a, b]` through noisy point samples are
//! completed on the missing part `M = [a, b] \ O` by extending the
//! eigenfunctions of the covariance operator restricted to `O` to the full
//! domain. The crate provides the local-linear estimators the method rests
//! on, the reconstruction operators with and without boundary alignment,
//! GCV truncation, an iterative scheme for covariances that are only
//! estimable near the diagonal, and a Monte-Carlo harness for comparing
//! the estimators.

pub mod data;
pub mod eigen;
pub mod error;
pub mod grid;
pub mod iterative;
pub mod reconstruct;
pub mod scores;
pub mod simulation;
pub mod smoothing;

pub use data::{classify_complete, load_dataset, read_dataset, Curve, FunctionalDataset, ObservationPair};
pub use eigen::{eigen_on_subdomain, extrapolate_basis, EigenSystem, Subdomain};
pub use error::{Error, Result};
pub use grid::{DomainGrid, Interval};
pub use reconstruct::{Method, ModelConfig, Provenance, ReconstructedCurve, ReconstructionModel};
pub use smoothing::{Bandwidths, CovarianceEstimate, MeanEstimate, NoiseVariance};
