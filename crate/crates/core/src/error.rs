// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error wrapping each module's error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Store(#[from] crate::store::StoreError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error(transparent)]
    Detect(#[from] crate::detector::DetectError),
    #[error(transparent)]
    Ablation(#[from] crate::ablation::AblationError),
    #[error(transparent)]
    Propagator(#[from] crate::ablation::PropagatorError),
    #[error(transparent)]
    Stats(#[from] crate::stats::StatsError),
    #[error(transparent)]
    Registry(#[from] crate::registry::RegistryError),
    #[error(transparent)]
    Synthetic(#[from] crate::synthetic::SyntheticError),
    #[error(transparent)]
    Pipeline(#[from] crate::pipeline::PipelineError),
    #[error(transparent)]
    Report(#[from] crate::report::ReportError),
}

impl Error {
    /// True for problems with the inputs rather than with the analysis.
    pub fn is_input_error(&self) -> bool {
        use crate::pipeline::PipelineError as P;
        match self {
            Error::Store(_) | Error::Registry(_) | Error::Report(_) | Error::Propagator(_) => true,
            Error::Pipeline(p) => matches!(p, P::MissingRoot(_) | P::EmptyIndex | P::Store(_) | P::BadOutput { .. } | P::Walk { .. }),
            Error::Ablation(crate::ablation::AblationError::PropagatorFailure(_)) => true,
            Error::Detect(crate::detector::DetectError::InvalidParameter(_)) => true,
            Error::Synthetic(crate::synthetic::SyntheticError::BadSpec(_)) => true,
            _ => false,
        }
    }
}
