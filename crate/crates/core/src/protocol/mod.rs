//! Three-party inference: a Host serving encrypted models, a Client holding
//! the keys, and a Secure Middle Server (SMS) that encrypts tree models.
//! Transport is plain HTTP with JSON bodies; there is no authentication or
//! integrity layer.

mod client;
mod host;
mod http;
mod sms;
pub mod wire;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use client::{run_protocol_nn, run_protocol_xgb, Client, ClientConfig, TraceEntry};
pub use host::{Host, HostConfig, NnHostConfig};
pub use http::{host_router, serve_host, serve_sms, sms_router, HttpHost, HttpSms, ServerHandle, MAX_BODY_BYTES};
pub use sms::{Sms, SmsConfig};
pub use wire::PROTOCOL_VERSION;

use crate::ckks::CkksError;
use crate::he_gbdt::HeGbdtError;
use crate::nn::NnError;
use wire::*;

/// Which protocol a step belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Flow {
    Nn,
    Xgb,
}

const NN_STEPS: [&str; 6] = [
    "host trains the model",
    "client encrypts a transaction",
    "client sends the encrypted transaction to host",
    "host evaluates the encrypted network",
    "host sends the encrypted result to client",
    "client decrypts the result",
];

const XGB_STEPS: [&str; 10] = [
    "host trains the model",
    "host sends the model to the SMS",
    "SMS generates keys and encrypts the model",
    "SMS sends the encrypted model to host",
    "SMS sends keys to client",
    "client encrypts a transaction",
    "client sends the encrypted transaction to host",
    "host runs encrypted inference",
    "host sends the encrypted result to client",
    "client decrypts the result",
];

impl Flow {
    /// Description of 1-based step `n`.
    pub fn step_name(self, n: u8) -> &'static str {
        let steps: &[&str] = match self {
            Flow::Nn => &NN_STEPS,
            Flow::Xgb => &XGB_STEPS,
        };
        steps.get(n as usize - 1).copied().unwrap_or("unknown step")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorCode {
    BadEncoding,
    VersionMismatch,
    UnknownModel,
    ModelNotEncrypted,
    UnknownClient,
    NotFound,
    KeysNotDelivered,
    MissingFeature,
    MissingKey,
    Depth,
    Size,
    UnsupportedContext,
    Setup,
    Transport,
    Internal,
}

impl ErrorCode {
    pub fn http_status(self) -> u16 {
        match self {
            ErrorCode::BadEncoding | ErrorCode::VersionMismatch => 400,
            ErrorCode::UnknownModel
            | ErrorCode::ModelNotEncrypted
            | ErrorCode::UnknownClient
            | ErrorCode::NotFound => 404,
            ErrorCode::KeysNotDelivered => 409,
            ErrorCode::MissingFeature
            | ErrorCode::MissingKey
            | ErrorCode::Depth
            | ErrorCode::Size
            | ErrorCode::UnsupportedContext
            | ErrorCode::Setup => 422,
            ErrorCode::Transport => 502,
            ErrorCode::Internal => 500,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::BadEncoding => "bad-encoding",
            ErrorCode::VersionMismatch => "version-mismatch",
            ErrorCode::UnknownModel => "unknown-model",
            ErrorCode::ModelNotEncrypted => "model-not-encrypted",
            ErrorCode::UnknownClient => "unknown-client",
            ErrorCode::NotFound => "not-found",
            ErrorCode::KeysNotDelivered => "keys-not-delivered",
            ErrorCode::MissingFeature => "missing-feature",
            ErrorCode::MissingKey => "missing-key",
            ErrorCode::Depth => "depth",
            ErrorCode::Size => "size",
            ErrorCode::UnsupportedContext => "unsupported-context",
            ErrorCode::Setup => "setup",
            ErrorCode::Transport => "transport",
            ErrorCode::Internal => "internal",
        }
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Error)]
pub struct ProtocolError {
    pub code: ErrorCode,
    pub message: String,
    /// The protocol step that failed, when known.
    pub step: Option<(Flow, u8)>,
}

impl fmt::Display for ProtocolError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some((flow, n)) = self.step {
            write!(f, "step {n} ({}): ", flow.step_name(n))?;
        }
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl ProtocolError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        ProtocolError {
            code,
            message: message.into(),
            step: None,
        }
    }

    /// Attaches the failing step unless one is already recorded.
    pub fn at(mut self, flow: Flow, step: u8) -> Self {
        self.step.get_or_insert((flow, step));
        self
    }

    pub fn internal(message: impl ToString) -> Self {
        Self::new(ErrorCode::Internal, message.to_string())
    }
}

impl From<HeGbdtError> for ProtocolError {
    fn from(e: HeGbdtError) -> Self {
        let code = match &e {
            HeGbdtError::Encoding(_) | HeGbdtError::Paillier(_) => ErrorCode::BadEncoding,
            HeGbdtError::MissingFeature(_) | HeGbdtError::Plaintext(_) => ErrorCode::MissingFeature,
            HeGbdtError::Mode(_) => ErrorCode::UnsupportedContext,
            HeGbdtError::Parameter(_) | HeGbdtError::Ope(_) => ErrorCode::Internal,
        };
        ProtocolError::new(code, e.to_string())
    }
}

impl From<CkksError> for ProtocolError {
    fn from(e: CkksError) -> Self {
        let code = match &e {
            CkksError::Depth(_) | CkksError::Level(_) | CkksError::Scale(_) => ErrorCode::Depth,
            CkksError::Capacity(_) => ErrorCode::Size,
            CkksError::Encoding(_) => ErrorCode::BadEncoding,
            CkksError::Key(_) => ErrorCode::MissingKey,
            CkksError::Context(_) | CkksError::Security(_) | CkksError::Parameter(_) => {
                ErrorCode::UnsupportedContext
            }
        };
        ProtocolError::new(code, e.to_string())
    }
}

impl From<NnError> for ProtocolError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::Ckks(c) => c.into(),
            NnError::UnsupportedDepth(m) => ProtocolError::new(ErrorCode::Depth, m),
            NnError::Shape(m) => ProtocolError::new(ErrorCode::Size, m),
            NnError::MissingFeature(m) => ProtocolError::new(ErrorCode::MissingFeature, m),
            other => ProtocolError::internal(other),
        }
    }
}

impl From<ErrorBody> for ProtocolError {
    fn from(body: ErrorBody) -> Self {
        ProtocolError::new(body.code, body.message)
    }
}

/// Host endpoints, callable in-process or over HTTP.
pub trait HostApi: Send + Sync {
    /// Runs the per-client model encryption with the SMS; returns the id of
    /// the Client's encrypted model.
    fn setup_xgb(&self, req: &SetupXgbRequest) -> Result<SetupXgbResponse, ProtocolError>;
    fn model_spec(&self, model_id: Option<&str>) -> Result<ModelSpecResponse, ProtocolError>;
    fn infer_xgb(&self, req: &InferRequestXgb) -> Result<InferResponse, ProtocolError>;
    fn register_nn_keys(&self, req: &RegisterKeysRequest) -> Result<RegisterKeysResponse, ProtocolError>;
    fn infer_nn(&self, req: &InferRequestNn) -> Result<InferResponse, ProtocolError>;
}

/// Secure Middle Server endpoints.
pub trait SmsApi: Send + Sync {
    fn encrypt_model(&self, req: &EncryptModelRequest) -> Result<EncryptModelResponse, ProtocolError>;
    fn client_keys(&self, model_id: &str) -> Result<KeyBundleResponse, ProtocolError>;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_codes_serialize_as_their_names() {
        for code in [
            ErrorCode::BadEncoding,
            ErrorCode::ModelNotEncrypted,
            ErrorCode::UnsupportedContext,
            ErrorCode::KeysNotDelivered,
        ] {
            assert_eq!(serde_json::to_value(code).unwrap(), code.as_str());
        }
    }

    #[test]
    fn status_codes_follow_the_error_contract() {
        assert_eq!(ErrorCode::BadEncoding.http_status(), 400);
        assert_eq!(ErrorCode::UnknownModel.http_status(), 404);
        assert_eq!(ErrorCode::Depth.http_status(), 422);
        assert_eq!(ErrorCode::Size.http_status(), 422);
    }

    #[test]
    fn errors_name_the_failing_step() {
        let e = ProtocolError::new(ErrorCode::ModelNotEncrypted, "no model").at(Flow::Xgb, 8);
        let text = e.to_string();
        assert!(text.contains("step 8"), "{text}");
        assert!(text.contains("host runs encrypted inference"), "{text}");
        assert_eq!(e.at(Flow::Xgb, 9).step, Some((Flow::Xgb, 8)));
    }
}
