//! Embedding-space analyses: PCA, stain-shift metrics, kNN graphs with
//! Moran's I, and k-medoids curation.

mod kmedoids;
mod knn;
mod pca;
mod shift;

pub use kmedoids::{kmedoids, DistanceMatrix, Kmedoids};
pub use knn::{knn_graph, morans_i, KnnGraph};
pub use pca::{pca_fit, Pca};
pub use shift::{
    projected_shift_metrics, shift_metrics, ConditionShift, ShiftReport, ShiftSummary,
};

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("invalid analysis input: {0}")]
    Config(String),
    #[error("zero variance in {0}")]
    ZeroVariance(String),
    #[error("requested {requested} components but the data rank is {rank}")]
    RankDeficient { requested: usize, rank: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;
