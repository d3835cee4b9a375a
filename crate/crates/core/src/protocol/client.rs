use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::wire::*;
use super::{ErrorCode, Flow, HostApi, ProtocolError, SmsApi};
use crate::ckks::{default_rotation_steps, CkksContext, CkksKeySet, CkksParams};
use crate::gbdt::FeatureMap;
use crate::he_gbdt::{decrypt_score, encrypt_transaction, ClientKeyBundle, EncryptedScore, Score};
use crate::nn::{decrypt_logit, encrypt_input};
use crate::paillier::PaillierCiphertext;

#[derive(Clone, Debug, Default)]
pub struct ClientConfig {
    /// Accepts CKKS contexts below the 128-bit security cap. For tests only.
    pub allow_insecure: bool,
    /// Seeds the encryption randomness; fresh entropy when absent.
    pub seed: Option<u64>,
}

/// One protocol step as observed by the Client.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceEntry {
    pub flow: Flow,
    pub step: u8,
}

struct XgbSession {
    model_id: String,
    spec: XgbModelSpec,
    bundle: Option<ClientKeyBundle>,
}

struct NnSession {
    ctx: CkksContext,
    keys: CkksKeySet,
    client_id: String,
    spec: NnModelSpec,
}

/// Holds the Client's keys; sends only ciphertexts.
pub struct Client {
    config: ClientConfig,
    rng: ChaCha20Rng,
    xgb: Option<XgbSession>,
    nn: Option<NnSession>,
    trace: Vec<TraceEntry>,
}

fn setup_error(message: impl Into<String>) -> ProtocolError {
    ProtocolError::new(ErrorCode::Setup, message)
}

/// Transport failures happen while sending; anything else on the far side.
fn remote_step(e: ProtocolError, flow: Flow, send: u8, remote: u8) -> ProtocolError {
    let step = if e.code == ErrorCode::Transport { send } else { remote };
    e.at(flow, step)
}

impl Client {
    pub fn new(config: ClientConfig) -> Self {
        let rng = match config.seed {
            Some(s) => ChaCha20Rng::seed_from_u64(s),
            None => ChaCha20Rng::from_entropy(),
        };
        Client {
            config,
            rng,
            xgb: None,
            nn: None,
            trace: Vec::new(),
        }
    }

    pub fn trace(&self) -> &[TraceEntry] {
        &self.trace
    }

    fn record(&mut self, flow: Flow, steps: impl IntoIterator<Item = u8>) {
        self.trace
            .extend(steps.into_iter().map(|step| TraceEntry { flow, step }));
    }

    pub fn xgb_model_id(&self) -> Option<&str> {
        self.xgb.as_ref().map(|s| s.model_id.as_str())
    }

    pub fn xgb_bundle(&self) -> Option<&ClientKeyBundle> {
        self.xgb.as_ref().and_then(|s| s.bundle.as_ref())
    }

    pub fn nn_client_id(&self) -> Option<&str> {
        self.nn.as_ref().map(|s| s.client_id.as_str())
    }

    /// The CKKS context and key set, secret key included.
    pub fn nn_keys(&self) -> Option<(&CkksContext, &CkksKeySet)> {
        self.nn.as_ref().map(|s| (&s.ctx, &s.keys))
    }

    pub fn nn_spec(&self) -> Option<&NnModelSpec> {
        self.nn.as_ref().map(|s| &s.spec)
    }

    /// Steps 2-4: the Host has its model encrypted by the SMS for this
    /// Client.
    pub fn request_xgb_model(&mut self, host: &dyn HostApi) -> Result<(), ProtocolError> {
        let resp = host.setup_xgb(&SetupXgbRequest::default())?;
        resp.check_version().map_err(|e| e.at(Flow::Xgb, 4))?;
        let spec = host
            .model_spec(Some(&resp.model_id))
            .map_err(|e| e.at(Flow::Xgb, 4))?
            .xgb
            .pop()
            .ok_or_else(|| setup_error("host returned no model spec").at(Flow::Xgb, 4))?;
        self.xgb = Some(XgbSession {
            model_id: resp.model_id,
            spec,
            bundle: None,
        });
        self.record(Flow::Xgb, 2..=4);
        Ok(())
    }

    /// Step 5: keys from the SMS, checked against the Host's model spec.
    pub fn fetch_xgb_keys(&mut self, sms: &dyn SmsApi) -> Result<(), ProtocolError> {
        let session = self.xgb.as_mut().ok_or_else(|| {
            ProtocolError::new(ErrorCode::ModelNotEncrypted, "no encrypted model to fetch keys for")
                .at(Flow::Xgb, 5)
        })?;
        let resp = sms
            .client_keys(&session.model_id)
            .map_err(|e| e.at(Flow::Xgb, 5))?;
        resp.check_version().map_err(|e| e.at(Flow::Xgb, 5))?;
        let bundle = resp.bundle().map_err(|e| e.at(Flow::Xgb, 5))?;
        if bundle.quantizer.fingerprint() != session.spec.quantizer_fingerprint {
            return Err(setup_error("delivered quantizer does not match the host model").at(Flow::Xgb, 5));
        }
        session.bundle = Some(bundle);
        self.record(Flow::Xgb, [5]);
        Ok(())
    }

    /// Adopts keys delivered out of band for a model the Host already
    /// serves, skipping the SMS.
    pub fn use_xgb_keys(
        &mut self,
        host: &dyn HostApi,
        model_id: &str,
        bundle: ClientKeyBundle,
    ) -> Result<(), ProtocolError> {
        let spec = host
            .model_spec(Some(model_id))?
            .xgb
            .pop()
            .ok_or_else(|| setup_error("host returned no model spec"))?;
        if bundle.quantizer.fingerprint() != spec.quantizer_fingerprint {
            return Err(setup_error("keys do not match the host model"));
        }
        self.xgb = Some(XgbSession {
            model_id: model_id.to_string(),
            spec,
            bundle: Some(bundle),
        });
        Ok(())
    }

    /// Steps 2-5.
    pub fn setup_xgb(&mut self, host: &dyn HostApi, sms: &dyn SmsApi) -> Result<(), ProtocolError> {
        self.request_xgb_model(host)?;
        self.fetch_xgb_keys(sms)
    }

    /// Step 6. Only features the encrypted model references are sent.
    pub fn encrypt_xgb_request(&mut self, tx: &FeatureMap) -> Result<InferRequestXgb, ProtocolError> {
        let at6 = |e: ProtocolError| e.at(Flow::Xgb, 6);
        let session = self.xgb.as_ref().ok_or_else(|| {
            at6(ProtocolError::new(
                ErrorCode::ModelNotEncrypted,
                "the model has not been encrypted for this client",
            ))
        })?;
        let bundle = session.bundle.as_ref().ok_or_else(|| {
            at6(ProtocolError::new(
                ErrorCode::KeysNotDelivered,
                "keys have not been delivered to this client",
            ))
        })?;
        let wanted: BTreeSet<&str> = session.spec.feature_tags.iter().map(String::as_str).collect();
        let used: FeatureMap = tx
            .iter()
            .filter(|(name, _)| wanted.contains(hex::encode(bundle.tag(name)).as_str()))
            .map(|(k, v)| (k.clone(), *v))
            .collect();
        let ct = encrypt_transaction(&used, bundle).map_err(|e| at6(e.into()))?;
        let req = InferRequestXgb::new(&session.model_id, &ct);
        self.record(Flow::Xgb, [6]);
        Ok(req)
    }

    /// Step 10.
    pub fn decrypt_xgb_response(&mut self, resp: &InferResponse) -> Result<Score, ProtocolError> {
        let at10 = |e: ProtocolError| e.at(Flow::Xgb, 10);
        resp.check_version().map_err(at10)?;
        let session = self.xgb.as_ref().ok_or_else(|| at10(setup_error("no session")))?;
        let bundle = session
            .bundle
            .as_ref()
            .ok_or_else(|| at10(ProtocolError::new(ErrorCode::KeysNotDelivered, "no keys")))?;
        let result = match (&resp.result_b64, resp.plaintext_margin) {
            (Some(b64), None) => {
                let ct = PaillierCiphertext::from_bytes(&decode_b64(b64).map_err(at10)?, bundle.paillier_public())
                    .map_err(|e| at10(ProtocolError::new(ErrorCode::BadEncoding, e.to_string())))?;
                EncryptedScore::Paillier(ct)
            }
            (None, Some(m)) => EncryptedScore::Plain(m),
            _ => {
                return Err(at10(ProtocolError::new(
                    ErrorCode::BadEncoding,
                    "response needs exactly one of result_b64 and plaintext_margin",
                )))
            }
        };
        let score = decrypt_score(bundle, &result, session.spec.base_score).map_err(|e| at10(e.into()))?;
        self.record(Flow::Xgb, [10]);
        Ok(score)
    }

    /// Steps 6-10.
    pub fn score_xgb(&mut self, host: &dyn HostApi, tx: &FeatureMap) -> Result<Score, ProtocolError> {
        let req = self.encrypt_xgb_request(tx)?;
        let resp = host.infer_xgb(&req).map_err(|e| remote_step(e, Flow::Xgb, 7, 8))?;
        self.record(Flow::Xgb, 7..=9);
        self.decrypt_xgb_response(&resp)
    }

    /// Generates CKKS keys for the Host's served context and registers the
    /// evaluation keys. Rejects contexts below the security cap unless
    /// configured otherwise.
    pub fn setup_nn(&mut self, host: &dyn HostApi) -> Result<(), ProtocolError> {
        let spec = host
            .model_spec(None)?
            .nn
            .ok_or_else(|| ProtocolError::new(ErrorCode::UnknownModel, "host serves no network"))?;
        let params: CkksParams = serde_json::from_value(spec.context_descriptor.clone())
            .map_err(|e| setup_error(format!("bad context descriptor: {e}")))?;
        let ctx = if self.config.allow_insecure {
            CkksContext::new_insecure(params)
        } else {
            CkksContext::new(params)
        }
        .map_err(|e| setup_error(e.to_string()))?;
        let mut steps = default_rotation_steps(&ctx);
        steps.extend(&spec.rotation_steps);
        let keys = CkksKeySet::generate_with_steps(&ctx, &steps, &mut self.rng);
        let resp = host.register_nn_keys(&RegisterKeysRequest {
            protocol_version: version(),
            context_descriptor: spec.context_descriptor.clone(),
            eval_keys_b64: encode_b64(&ctx.evaluation_keys_to_bytes(&keys.eval)),
        })?;
        self.nn = Some(NnSession {
            ctx,
            keys,
            client_id: resp.client_id,
            spec,
        });
        Ok(())
    }

    /// Step 2 on a feature vector in model order.
    pub fn encrypt_nn_request(&mut self, x: &[f64]) -> Result<InferRequestNn, ProtocolError> {
        let at2 = |e: ProtocolError| e.at(Flow::Nn, 2);
        let session = self
            .nn
            .as_ref()
            .ok_or_else(|| at2(setup_error("no CKKS keys; set up the network session first")))?;
        if x.len() != session.spec.d {
            return Err(at2(ProtocolError::new(
                ErrorCode::Size,
                format!("{} features, the network takes {}", x.len(), session.spec.d),
            )));
        }
        let ct = encrypt_input(&session.ctx, &session.keys.secret, x, &mut self.rng)
            .map_err(|e| at2(e.into()))?;
        let req = InferRequestNn {
            protocol_version: version(),
            client_id: session.client_id.clone(),
            context_descriptor: session.spec.context_descriptor.clone(),
            ct_b64: encode_b64(&session.ctx.ciphertext_to_bytes(&ct)),
        };
        self.record(Flow::Nn, [2]);
        Ok(req)
    }

    /// Step 6: decrypt, sigmoid and threshold.
    pub fn decrypt_nn_response(&mut self, resp: &InferResponse) -> Result<Score, ProtocolError> {
        let at6 = |e: ProtocolError| e.at(Flow::Nn, 6);
        resp.check_version().map_err(at6)?;
        let session = self.nn.as_ref().ok_or_else(|| at6(setup_error("no session")))?;
        let b64 = resp
            .result_b64
            .as_ref()
            .ok_or_else(|| at6(ProtocolError::new(ErrorCode::BadEncoding, "missing result_b64")))?;
        let ct = session
            .ctx
            .ciphertext_from_bytes(&decode_b64(b64).map_err(at6)?)
            .map_err(|e| at6(e.into()))?;
        let logit = decrypt_logit(&session.ctx, &session.keys.secret, &ct).map_err(|e| at6(e.into()))?;
        self.record(Flow::Nn, [6]);
        Ok(Score::from_margin(logit))
    }

    /// Steps 2-6.
    pub fn score_nn(&mut self, host: &dyn HostApi, x: &[f64]) -> Result<Score, ProtocolError> {
        let req = self.encrypt_nn_request(x)?;
        let resp = host.infer_nn(&req).map_err(|e| remote_step(e, Flow::Nn, 3, 4))?;
        self.record(Flow::Nn, 3..=5);
        self.decrypt_nn_response(&resp)
    }

    /// Orders `tx` by the network's feature names.
    pub fn nn_input(&self, tx: &FeatureMap) -> Result<Vec<f64>, ProtocolError> {
        let spec = self
            .nn_spec()
            .ok_or_else(|| setup_error("no CKKS keys; set up the network session first"))?;
        if spec.feature_names.is_empty() {
            return Err(setup_error("the network does not name its features"));
        }
        spec.feature_names
            .iter()
            .map(|n| {
                tx.get(n)
                    .copied()
                    .ok_or_else(|| ProtocolError::new(ErrorCode::MissingFeature, format!("missing feature `{n}`")))
            })
            .collect()
    }
}

fn check_order(trace: &[TraceEntry], flow: Flow, last: u8) -> Result<(), ProtocolError> {
    let steps: Vec<u8> = trace.iter().filter(|t| t.flow == flow).map(|t| t.step).collect();
    let ordered = steps.windows(2).all(|w| w[0] < w[1]);
    if !ordered || steps.last() != Some(&last) {
        return Err(ProtocolError::internal(format!("steps ran out of order: {steps:?}")));
    }
    Ok(())
}

/// Runs the tree-model protocol for one transaction, setting the Client up
/// first if needed. Returns the Client's decrypted label.
pub fn run_protocol_xgb(
    client: &mut Client,
    host: &dyn HostApi,
    sms: &dyn SmsApi,
    tx: &FeatureMap,
) -> Result<u8, ProtocolError> {
    let start = client.trace.len();
    if client.xgb_bundle().is_none() {
        if client.xgb.is_none() {
            client.request_xgb_model(host)?;
        }
        client.fetch_xgb_keys(sms)?;
    }
    let score = client.score_xgb(host, tx)?;
    check_order(&client.trace[start..], Flow::Xgb, 10)?;
    Ok(score.label)
}

/// Runs the network protocol for one transaction, generating keys first if
/// needed. Returns the Client's decrypted label.
pub fn run_protocol_nn(client: &mut Client, host: &dyn HostApi, tx: &FeatureMap) -> Result<u8, ProtocolError> {
    let start = client.trace.len();
    if client.nn.is_none() {
        client.setup_nn(host)?;
    }
    let x = client.nn_input(tx)?;
    let score = client.score_nn(host, &x)?;
    check_order(&client.trace[start..], Flow::Nn, 6)?;
    Ok(score.label)
}
