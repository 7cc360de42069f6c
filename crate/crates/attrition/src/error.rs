//! Crate-level error type for the composed pipelines.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] crate::dataio::DataError),
    #[error(transparent)]
    Ecdf(#[from] crate::ecdf::EcdfError),
    #[error(transparent)]
    Link(#[from] crate::link::LinkError),
    #[error(transparent)]
    Transform(#[from] crate::transform::TransformError),
    #[error(transparent)]
    Measure(#[from] crate::measure::MeasureError),
    #[error(transparent)]
    Solve(#[from] crate::estimator::SolveError),
    #[error(transparent)]
    Bootstrap(#[from] crate::inference::BootstrapError),
    #[error(transparent)]
    Dgp(#[from] crate::dgp::DgpError),
    #[error("{0}")]
    InvalidArgument(String),
}
