//! Correction of nonrandom panel attrition using refreshment samples.
//!
//! Two-wave panels lose units between waves. When dropout correlates with the
//! outcomes, estimates computed from the balanced panel alone are biased. If a
//! refreshment sample (a fresh random draw from the second-wave population) is
//! available, the joint distribution of the two waves is identified under a
//! separability assumption on the rectangle-conditional staying probability,
//! and can be estimated by a closed-form transformation of empirical CDFs.
//!
//! The pipeline implemented here:
//!
//! 1. [`dataio`] loads the first wave, the stay indicators with second-wave
//!    outcomes for stayers, and the refreshment sample.
//! 2. [`transform`] builds the corrected CDF from five empirical CDFs, the
//!    stay fraction, and a [`link`] function.
//! 3. [`measure`] extracts the signed jump measure of the corrected CDF over
//!    its discontinuity grid by inclusion-exclusion differencing.
//! 4. [`estimator`] solves moment conditions against that measure.
//! 5. [`inference`] provides nonparametric bootstrap confidence intervals.
//! 6. [`dgp`] and [`harness`] simulate calibrated data-generating processes
//!    and run Monte Carlo studies of the corrected and naive estimators.
//!
//! All randomness flows from a single `u64` seed through the splitting scheme
//! in [`seed`], so every result in the crate is reproducible.

pub mod dataio;
pub mod designs;
pub mod dgp;
pub mod ecdf;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod inference;
pub mod link;
pub mod measure;
pub mod seed;
pub mod stats;
pub mod transform;

pub use dataio::{PanelDataset, PanelRow, RefreshmentDataset, ValidatedData};
pub use dgp::{CopulaDgp, DgpSpec, DiscreteDgp, LinkName, SimulatedStudy};
pub use ecdf::Ecdf;
pub use error::Error;
pub use estimator::{EstimateOptions, EstimateResult, MomentModel, TwowayFeSpec};
pub use harness::{McConfig, McReport, ModelSpec};
pub use inference::BootstrapResult;
pub use link::LinkFunction;
pub use measure::{GridStrategy, JumpGrid, ProbabilityMeasure, SignedMeasure};
pub use transform::CorrectedCdf;
