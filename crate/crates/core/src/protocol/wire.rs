//! JSON message bodies. Binary fields are base64; every message carries
//! `protocol_version`.

use std::collections::BTreeMap;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use num_bigint::BigUint;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{ErrorCode, ProtocolError};
use crate::he_gbdt::{ClientKeyBundle, EncryptedTransactionOpe, FeatureTag, LeafMode};
use crate::ope::{OpeKey, OpeParams, Quantizer};
use crate::paillier::{FixedPointCodec, PaillierSecretKey};

pub const PROTOCOL_VERSION: &str = "1";

pub(crate) fn version() -> String {
    PROTOCOL_VERSION.to_string()
}

/// Implemented by every message so receivers can reject foreign versions.
pub trait Versioned {
    fn protocol_version(&self) -> &str;

    fn check_version(&self) -> Result<(), ProtocolError> {
        match self.protocol_version() {
            PROTOCOL_VERSION => Ok(()),
            other => Err(ProtocolError::new(
                ErrorCode::VersionMismatch,
                format!("protocol version {other:?}, expected {PROTOCOL_VERSION:?}"),
            )),
        }
    }
}

macro_rules! versioned {
    ($($t:ty),* $(,)?) => {
        $(impl Versioned for $t {
            fn protocol_version(&self) -> &str {
                &self.protocol_version
            }
        })*
    };
}

versioned!(
    ErrorBody,
    SetupXgbRequest,
    SetupXgbResponse,
    InferRequestXgb,
    InferRequestNn,
    InferResponse,
    EncryptModelRequest,
    EncryptModelResponse,
    KeyBundleResponse,
    ModelSpecResponse,
    RegisterKeysRequest,
    RegisterKeysResponse,
);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub protocol_version: String,
    pub code: ErrorCode,
    pub message: String,
}

impl From<&ProtocolError> for ErrorBody {
    fn from(e: &ProtocolError) -> Self {
        ErrorBody {
            protocol_version: version(),
            code: e.code,
            message: match e.step {
                Some((flow, n)) => format!("step {n} ({}): {}", flow.step_name(n), e.message),
                None => e.message.clone(),
            },
        }
    }
}

/// Client asks the Host to run the per-client model encryption with the SMS.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetupXgbRequest {
    pub protocol_version: String,
}

impl Default for SetupXgbRequest {
    fn default() -> Self {
        SetupXgbRequest {
            protocol_version: version(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetupXgbResponse {
    pub protocol_version: String,
    pub model_id: String,
}

/// OPE ciphertexts keyed by hex feature tag; each value is the base64 of the
/// big-endian `u64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferRequestXgb {
    pub protocol_version: String,
    pub model_id: String,
    pub tx: BTreeMap<String, String>,
}

impl InferRequestXgb {
    pub fn new(model_id: &str, tx: &EncryptedTransactionOpe) -> Self {
        InferRequestXgb {
            protocol_version: version(),
            model_id: model_id.to_string(),
            tx: tx
                .0
                .iter()
                .map(|(tag, ct)| (hex::encode(tag), B64.encode(ct.to_be_bytes())))
                .collect(),
        }
    }

    pub fn transaction(&self) -> Result<EncryptedTransactionOpe, ProtocolError> {
        let mut out = BTreeMap::new();
        for (tag_hex, ct_b64) in &self.tx {
            let tag: FeatureTag = hex::decode(tag_hex)
                .ok()
                .and_then(|b| b.try_into().ok())
                .ok_or_else(|| bad_encoding(format!("feature tag {tag_hex:?} is not 32 hex bytes")))?;
            let ct: [u8; 8] = decode_b64(ct_b64)?
                .try_into()
                .map_err(|_| bad_encoding("OPE ciphertext must be 8 bytes"))?;
            out.insert(tag, u64::from_be_bytes(ct));
        }
        Ok(EncryptedTransactionOpe(out))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferRequestNn {
    pub protocol_version: String,
    pub client_id: String,
    pub context_descriptor: Value,
    pub ct_b64: String,
}

/// Exactly one of the fields is set: an encrypted result, or the margin of
/// a plaintext-leaf model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferResponse {
    pub protocol_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result_b64: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plaintext_margin: Option<f64>,
}

impl InferResponse {
    pub fn encrypted(bytes: &[u8]) -> Self {
        InferResponse {
            protocol_version: version(),
            result_b64: Some(B64.encode(bytes)),
            plaintext_margin: None,
        }
    }

    pub fn plaintext(margin: f64) -> Self {
        InferResponse {
            protocol_version: version(),
            result_b64: None,
            plaintext_margin: Some(margin),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncryptModelRequest {
    pub protocol_version: String,
    pub model_id: String,
    /// Plaintext tree ensemble in the model JSON format.
    pub model_json: Value,
    /// Fitted from the thresholds when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantizer: Option<Quantizer>,
    pub mode: LeafMode,
}

impl EncryptModelRequest {
    pub fn new(model_id: &str, model_json: Value, quantizer: Option<Quantizer>, mode: LeafMode) -> Self {
        EncryptModelRequest {
            protocol_version: version(),
            model_id: model_id.to_string(),
            model_json,
            quantizer,
            mode,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncryptModelResponse {
    pub protocol_version: String,
    pub model_id: String,
    pub encrypted_model_json: Value,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecSpec {
    pub scale_bits: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyBundleResponse {
    pub protocol_version: String,
    pub model_id: String,
    pub ope_key_b64: String,
    pub prf_seed_b64: String,
    pub paillier_secret_b64: String,
    pub quantizer: Quantizer,
    pub codec: CodecSpec,
    pub ope_params: OpeParams,
}

impl KeyBundleResponse {
    pub fn new(model_id: &str, bundle: &ClientKeyBundle) -> Self {
        KeyBundleResponse {
            protocol_version: version(),
            model_id: model_id.to_string(),
            ope_key_b64: B64.encode(bundle.ope_key.as_bytes()),
            prf_seed_b64: B64.encode(bundle.prf_seed),
            paillier_secret_b64: B64.encode(bundle.paillier_secret.to_bytes()),
            quantizer: bundle.quantizer,
            codec: CodecSpec {
                scale_bits: bundle.codec.scale_bits,
            },
            ope_params: bundle.ope_params,
        }
    }

    pub fn bundle(&self) -> Result<ClientKeyBundle, ProtocolError> {
        let ope_key = OpeKey::from_slice(&decode_b64(&self.ope_key_b64)?).map_err(bad_encoding)?;
        let prf_seed = decode_b64(&self.prf_seed_b64)?
            .try_into()
            .map_err(|_| bad_encoding("PRF seed must be 16 bytes"))?;
        let paillier_secret =
            PaillierSecretKey::from_bytes(&decode_b64(&self.paillier_secret_b64)?).map_err(bad_encoding)?;
        self.quantizer.validate().map_err(bad_encoding)?;
        self.ope_params.validate().map_err(bad_encoding)?;
        let n: BigUint = paillier_secret.public_key().n().clone();
        Ok(ClientKeyBundle {
            ope_key,
            prf_seed,
            paillier_secret,
            quantizer: self.quantizer,
            codec: FixedPointCodec::new(self.codec.scale_bits, n),
            ope_params: self.ope_params,
        })
    }
}

/// What a Client needs to check its keys against one encrypted model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct XgbModelSpec {
    pub model_id: String,
    pub mode: LeafMode,
    /// Initial margin; added by the Client to Paillier results.
    pub base_score: f64,
    pub num_trees: usize,
    /// Hex tags of the features the encrypted splits reference.
    pub feature_tags: Vec<String>,
    pub quantizer_fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NnModelSpec {
    pub d: usize,
    pub h: usize,
    pub hidden_layers: usize,
    pub feature_names: Vec<String>,
    pub context_descriptor: Value,
    /// Rotations the encrypted forward pass uses, beyond the default
    /// power-of-two keys.
    pub rotation_steps: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpecResponse {
    pub protocol_version: String,
    pub xgb: Vec<XgbModelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nn: Option<NnModelSpec>,
}

/// A Client's CKKS evaluation keys, registered before NN inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegisterKeysRequest {
    pub protocol_version: String,
    pub context_descriptor: Value,
    pub eval_keys_b64: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegisterKeysResponse {
    pub protocol_version: String,
    pub client_id: String,
}

pub fn decode_b64(s: &str) -> Result<Vec<u8>, ProtocolError> {
    B64.decode(s).map_err(|e| bad_encoding(format!("bad base64: {e}")))
}

pub fn encode_b64(bytes: &[u8]) -> String {
    B64.encode(bytes)
}

fn bad_encoding(e: impl ToString) -> ProtocolError {
    ProtocolError::new(ErrorCode::BadEncoding, e.to_string())
}
