use serde::{Deserialize, Serialize};

use super::HarnessError;

/// Serialized artifacts in their wire or file formats.
#[derive(Clone, Copy, Debug, Default)]
pub struct StorageArtifacts<'a> {
    pub plaintext_tx: &'a [u8],
    pub encrypted_tx: &'a [u8],
    pub plaintext_model: &'a [u8],
    /// Absent when the model is evaluated without being encrypted.
    pub encrypted_model: Option<&'a [u8]>,
}

/// Byte sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageReport {
    pub plaintext_tx: usize,
    pub encrypted_tx: usize,
    pub plaintext_model: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encrypted_model: Option<usize>,
}

impl StorageReport {
    pub fn tx_expansion(&self) -> f64 {
        self.encrypted_tx as f64 / self.plaintext_tx as f64
    }
}

pub fn storage_report(artifacts: &StorageArtifacts<'_>) -> Result<StorageReport, HarnessError> {
    let named = [
        ("plaintext transaction", Some(artifacts.plaintext_tx)),
        ("encrypted transaction", Some(artifacts.encrypted_tx)),
        ("plaintext model", Some(artifacts.plaintext_model)),
        ("encrypted model", artifacts.encrypted_model),
    ];
    for (name, bytes) in named {
        if bytes.is_some_and(<[u8]>::is_empty) {
            return Err(HarnessError::Size(format!("{name} is empty")));
        }
    }
    Ok(StorageReport {
        plaintext_tx: artifacts.plaintext_tx.len(),
        encrypted_tx: artifacts.encrypted_tx.len(),
        plaintext_model: artifacts.plaintext_model.len(),
        encrypted_model: artifacts.encrypted_model.map(<[u8]>::len),
    })
}

/// Published sizes for comparable artifacts (30-feature transactions), for
/// side-by-side display only.
pub fn reference_bytes(model_kind: &str) -> Option<StorageReport> {
    match model_kind {
        "xgb" => Some(StorageReport {
            plaintext_tx: 1_200,
            encrypted_tx: 2_400,
            plaintext_model: 92_000,
            encrypted_model: Some(386_000),
        }),
        "nn" => Some(StorageReport {
            plaintext_tx: 387,
            encrypted_tx: 641_000,
            plaintext_model: 8_000,
            encrypted_model: None,
        }),
        _ => None,
    }
}
