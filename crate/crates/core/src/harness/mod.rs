//! Label-equivalence checks, latency benchmarks and artifact sizes.

mod bench;
mod similarity;
mod storage;

use thiserror::Error;

pub use bench::{
    register_gbdt_ops, register_nn_ops, reference_ms, BenchEntry, BenchRegistry, GbdtBenchInputs,
    NnBenchInputs, OP_NOOP,
};
pub use similarity::{
    balanced_sample, gbdt_similarity, nn_similarity, similarity_test, Mismatch, SimilarityConfig,
    SimilarityReport,
};
pub use storage::{reference_bytes, storage_report, StorageArtifacts, StorageReport};

use crate::ckks::CkksError;
use crate::data::DataError;
use crate::gbdt::GbdtError;
use crate::he_gbdt::HeGbdtError;
use crate::nn::NnError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("registry error: unknown operation `{0}`")]
    Registry(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Gbdt(#[from] GbdtError),
    #[error(transparent)]
    HeGbdt(#[from] HeGbdtError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Ckks(#[from] CkksError),
}
