//! Dataset ingestion, chronological splitting, undersampling, a synthetic
//! generator and evaluation metrics.

mod load;
mod metrics;
mod synthetic;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::gbdt::FeatureMap;

pub use load::{clean, load_csv, load_reader, write_csv, CategoricalPolicy, LoadOptions};
pub use metrics::{auc_roc, average_precision, recalls, MetricsReport};
pub use synthetic::generate_synthetic;

/// Value substituted for missing or NaN cells.
pub const MISSING_VALUE: f64 = -999.0;

/// Smallest input accepted by [`split`].
pub const MIN_SPLIT_RECORDS: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("size error: {0}")]
    Size(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("io error: {0}")]
    Io(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransactionRecord {
    pub features: FeatureMap,
    /// 1 for fraud.
    pub label: u8,
    pub time_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub train: Vec<TransactionRecord>,
    pub validation: Vec<TransactionRecord>,
    pub test: Vec<TransactionRecord>,
}

/// Contiguous 65/15/20 partition; the first two sizes are floored.
pub fn split(records: &[TransactionRecord]) -> Result<SplitDataset, DataError> {
    let n = records.len();
    if n < MIN_SPLIT_RECORDS {
        return Err(DataError::Size(format!(
            "need at least {MIN_SPLIT_RECORDS} records to split, got {n}"
        )));
    }
    let n_train = n * 65 / 100;
    let n_val = n * 15 / 100;
    Ok(SplitDataset {
        train: records[..n_train].to_vec(),
        validation: records[n_train..n_train + n_val].to_vec(),
        test: records[n_train + n_val..].to_vec(),
    })
}

/// Keeps every positive and `num_negatives` uniformly drawn negatives, in the
/// original order.
pub fn undersample(
    records: &[TransactionRecord],
    num_negatives: usize,
    seed: u64,
) -> Result<Vec<TransactionRecord>, DataError> {
    let negatives: Vec<usize> = (0..records.len())
        .filter(|&i| records[i].label == 0)
        .collect();
    if num_negatives > negatives.len() {
        return Err(DataError::Parameter(format!(
            "asked for {num_negatives} negatives but only {} are available",
            negatives.len()
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut keep = vec![false; records.len()];
    for i in index::sample(&mut rng, negatives.len(), num_negatives) {
        keep[negatives[i]] = true;
    }
    Ok(records
        .iter()
        .zip(keep)
        .filter(|(r, k)| *k || r.label == 1)
        .map(|(r, _)| r.clone())
        .collect())
}

/// Column-major view of the records. Column order follows the first record.
pub fn feature_columns(
    records: &[TransactionRecord],
) -> Result<(Vec<String>, Vec<Vec<f64>>), DataError> {
    let first = records
        .first()
        .ok_or_else(|| DataError::Size("no records".into()))?;
    let names: Vec<String> = first.features.keys().cloned().collect();
    let mut columns = vec![Vec::with_capacity(records.len()); names.len()];
    for (row, r) in records.iter().enumerate() {
        if r.features.len() != names.len() {
            return Err(DataError::Schema(format!(
                "record {row} has {} features, expected {}",
                r.features.len(),
                names.len()
            )));
        }
        for (col, name) in columns.iter_mut().zip(&names) {
            let v = r
                .features
                .get(name)
                .ok_or_else(|| DataError::Schema(format!("record {row} lacks feature `{name}`")))?;
            col.push(*v);
        }
    }
    Ok((names, columns))
}

pub fn class_counts(records: &[TransactionRecord]) -> (usize, usize) {
    let pos = records.iter().filter(|r| r.label == 1).count();
    (records.len() - pos, pos)
}
