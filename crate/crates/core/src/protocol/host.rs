use std::collections::{HashMap, HashSet};
use std::sync::{Arc, Mutex, RwLock};

use rand::rngs::OsRng;
use rand::RngCore;
use serde_json::Value;

use super::wire::*;
use super::{ErrorCode, Flow, HostApi, ProtocolError, SmsApi};
use crate::ckks::{CkksContext, CkksParams, EvaluationKeys};
use crate::gbdt::{save_model, TreeEnsemble};
use crate::he_gbdt::{fit_quantizer, infer_encrypted, EncryptedEnsemble, EncryptedScore, LeafMode};
use crate::nn::{he_forward, rotation_steps, HeOptions, NnModel, PreparedNn};
use crate::ope::Quantizer;

#[derive(Clone, Debug)]
pub struct NnHostConfig {
    pub model: NnModel,
    pub params: CkksParams,
    /// Accepts rings below the 128-bit security cap. For tests only.
    pub allow_insecure: bool,
    pub options: HeOptions,
}

#[derive(Clone, Debug, Default)]
pub struct HostConfig {
    /// Plaintext tree model, sent to the SMS once per Client.
    pub xgb_model: Option<TreeEnsemble>,
    pub mode: LeafMode,
    /// Fitted from the thresholds when absent.
    pub quantizer: Option<Quantizer>,
    pub nn: Option<NnHostConfig>,
}

struct ServedModel {
    model: EncryptedEnsemble,
    /// The quantizer the model's thresholds were encrypted under.
    quantizer: Quantizer,
}

struct NnState {
    model: NnModel,
    ctx: CkksContext,
    descriptor: Value,
    options: HeOptions,
    /// Weights encoded for fresh ciphertexts.
    prepared: PreparedNn,
    rotation_steps: Vec<usize>,
}

/// Serves encrypted inference. Holds models, encrypted models and the
/// Clients' public evaluation keys; never a Client secret.
pub struct Host {
    xgb_model: Option<TreeEnsemble>,
    mode: LeafMode,
    quantizer: Option<Quantizer>,
    sms: Option<Arc<dyn SmsApi>>,
    /// Ids sent to the SMS whose encrypted model has not arrived yet.
    pending: Mutex<HashSet<String>>,
    encrypted: RwLock<HashMap<String, Arc<ServedModel>>>,
    nn: Option<NnState>,
    nn_clients: RwLock<HashMap<String, Arc<EvaluationKeys>>>,
}

fn random_id(prefix: &str) -> String {
    format!("{prefix}-{:016x}", OsRng.next_u64())
}

impl Host {
    /// `sms` is needed only for per-client tree-model setup.
    pub fn new(config: HostConfig, sms: Option<Arc<dyn SmsApi>>) -> Result<Self, ProtocolError> {
        let nn = config.nn.map(NnState::new).transpose()?;
        if let Some(m) = &config.xgb_model {
            m.validate()
                .map_err(|e| ProtocolError::new(ErrorCode::Setup, e.to_string()))?;
        }
        let quantizer = config
            .quantizer
            .or_else(|| config.xgb_model.as_ref().map(fit_quantizer));
        Ok(Host {
            xgb_model: config.xgb_model,
            mode: config.mode,
            quantizer,
            sms,
            pending: Mutex::new(HashSet::new()),
            encrypted: RwLock::new(HashMap::new()),
            nn,
            nn_clients: RwLock::new(HashMap::new()),
        })
    }

    /// Serves a model encrypted ahead of time, under keys the Client already
    /// holds.
    pub fn insert_encrypted_model(&self, model_id: &str, model: EncryptedEnsemble, quantizer: Quantizer) {
        self.encrypted
            .write()
            .unwrap()
            .insert(model_id.to_string(), Arc::new(ServedModel { model, quantizer }));
    }

    pub fn encrypted_model_ids(&self) -> Vec<String> {
        let mut ids: Vec<_> = self.encrypted.read().unwrap().keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn nn_context(&self) -> Option<&CkksContext> {
        self.nn.as_ref().map(|s| &s.ctx)
    }

    /// Everything the Host stores, length-prefixed, for auditing what it
    /// could leak.
    pub fn snapshot(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let mut put = |bytes: &[u8]| {
            out.extend_from_slice(&(bytes.len() as u64).to_be_bytes());
            out.extend_from_slice(bytes);
        };
        if let Some(m) = &self.xgb_model {
            put(&save_model(m));
        }
        for id in self.pending.lock().unwrap().iter() {
            put(id.as_bytes());
        }
        for (id, served) in self.encrypted.read().unwrap().iter() {
            put(id.as_bytes());
            put(&serde_json::to_vec(&served.model.to_json()).expect("model serializes"));
            put(&serde_json::to_vec(&served.quantizer).expect("quantizer serializes"));
        }
        if let Some(nn) = &self.nn {
            put(&serde_json::to_vec(&nn.model.to_json()).expect("model serializes"));
            put(&serde_json::to_vec(&nn.descriptor).expect("descriptor serializes"));
            for (id, keys) in self.nn_clients.read().unwrap().iter() {
                put(id.as_bytes());
                put(&nn.ctx.evaluation_keys_to_bytes(keys));
            }
        }
        out
    }

    fn nn_state(&self) -> Result<&NnState, ProtocolError> {
        self.nn
            .as_ref()
            .ok_or_else(|| ProtocolError::new(ErrorCode::UnknownModel, "host serves no network"))
    }

    fn send_to_sms(&self, model_id: &str) -> Result<ServedModel, ProtocolError> {
        let model = self
            .xgb_model
            .as_ref()
            .ok_or_else(|| ProtocolError::new(ErrorCode::UnknownModel, "host holds no tree model").at(Flow::Xgb, 1))?;
        let sms = self
            .sms
            .as_ref()
            .ok_or_else(|| ProtocolError::new(ErrorCode::Setup, "host has no SMS").at(Flow::Xgb, 2))?;
        let model_json = serde_json::from_slice(&save_model(model)).expect("model JSON parses");
        let quantizer = self.quantizer.expect("set whenever a tree model is");
        let req = EncryptModelRequest::new(model_id, model_json, Some(quantizer), self.mode);
        let resp = sms.encrypt_model(&req).map_err(|e| match e.code {
            ErrorCode::Transport => e.at(Flow::Xgb, 2),
            _ => e.at(Flow::Xgb, 3),
        })?;
        resp.check_version().map_err(|e| e.at(Flow::Xgb, 4))?;
        let encrypted = EncryptedEnsemble::from_json(&resp.encrypted_model_json)
            .map_err(|e| ProtocolError::from(e).at(Flow::Xgb, 4))?;
        if encrypted.num_trees() != model.num_trees() || encrypted.mode != self.mode {
            return Err(ProtocolError::new(
                ErrorCode::Setup,
                "encrypted model does not match the plaintext model",
            )
            .at(Flow::Xgb, 4));
        }
        Ok(ServedModel {
            model: encrypted,
            quantizer,
        })
    }

    fn xgb_spec(id: &str, served: &ServedModel) -> XgbModelSpec {
        let model = &served.model;
        XgbModelSpec {
            model_id: id.to_string(),
            mode: model.mode,
            base_score: model.base_score,
            num_trees: model.num_trees(),
            feature_tags: model.feature_tags().iter().map(hex::encode).collect(),
            quantizer_fingerprint: served.quantizer.fingerprint(),
        }
    }
}

impl NnState {
    fn new(cfg: NnHostConfig) -> Result<Self, ProtocolError> {
        let ctx = if cfg.allow_insecure {
            CkksContext::new_insecure(cfg.params)
        } else {
            CkksContext::new(cfg.params)
        }
        .map_err(|e| ProtocolError::from(e).at(Flow::Nn, 1))?;
        let prepared = PreparedNn::for_fresh_inputs(&ctx, &cfg.model, cfg.options)
            .map_err(|e| ProtocolError::from(e).at(Flow::Nn, 1))?;
        Ok(NnState {
            rotation_steps: rotation_steps(&ctx, &cfg.model),
            descriptor: ctx.params().descriptor(),
            model: cfg.model,
            ctx,
            options: cfg.options,
            prepared,
        })
    }

    fn check_descriptor(&self, descriptor: &Value) -> Result<(), ProtocolError> {
        if *descriptor != self.descriptor {
            return Err(ProtocolError::new(
                ErrorCode::UnsupportedContext,
                format!("context {descriptor} is not the served context {}", self.descriptor),
            ));
        }
        Ok(())
    }
}

impl HostApi for Host {
    fn setup_xgb(&self, req: &SetupXgbRequest) -> Result<SetupXgbResponse, ProtocolError> {
        req.check_version()?;
        let model_id = random_id("xgb");
        self.pending.lock().unwrap().insert(model_id.clone());
        let result = self.send_to_sms(&model_id);
        self.pending.lock().unwrap().remove(&model_id);
        let served = result?;
        self.encrypted
            .write()
            .unwrap()
            .insert(model_id.clone(), Arc::new(served));
        Ok(SetupXgbResponse {
            protocol_version: version(),
            model_id,
        })
    }

    fn model_spec(&self, model_id: Option<&str>) -> Result<ModelSpecResponse, ProtocolError> {
        let encrypted = self.encrypted.read().unwrap();
        let xgb = match model_id {
            Some(id) => {
                let model = encrypted.get(id).ok_or_else(|| {
                    ProtocolError::new(ErrorCode::UnknownModel, format!("no model {id:?}"))
                })?;
                vec![Self::xgb_spec(id, model)]
            }
            None => {
                let mut all: Vec<_> = encrypted.iter().map(|(id, m)| Self::xgb_spec(id, m)).collect();
                all.sort_by(|a, b| a.model_id.cmp(&b.model_id));
                all
            }
        };
        let nn = self.nn.as_ref().map(|s| NnModelSpec {
            d: s.model.input_dim(),
            h: s.model.hidden_size(),
            hidden_layers: s.model.num_hidden_layers(),
            feature_names: s.model.feature_names().to_vec(),
            context_descriptor: s.descriptor.clone(),
            rotation_steps: s.rotation_steps.clone(),
        });
        Ok(ModelSpecResponse {
            protocol_version: version(),
            xgb,
            nn,
        })
    }

    fn infer_xgb(&self, req: &InferRequestXgb) -> Result<InferResponse, ProtocolError> {
        req.check_version()?;
        let model = self.encrypted.read().unwrap().get(&req.model_id).cloned();
        let served = match model {
            Some(m) => m,
            None if self.pending.lock().unwrap().contains(&req.model_id) => {
                return Err(ProtocolError::new(
                    ErrorCode::ModelNotEncrypted,
                    format!("model {:?} is still being encrypted", req.model_id),
                ))
            }
            None => {
                return Err(ProtocolError::new(
                    ErrorCode::UnknownModel,
                    format!("no model {:?}", req.model_id),
                ))
            }
        };
        let tx = req.transaction()?;
        Ok(match infer_encrypted(&served.model, &tx)? {
            EncryptedScore::Paillier(ct) => InferResponse::encrypted(&ct.to_bytes()),
            EncryptedScore::Plain(margin) => InferResponse::plaintext(margin),
        })
    }

    fn register_nn_keys(&self, req: &RegisterKeysRequest) -> Result<RegisterKeysResponse, ProtocolError> {
        req.check_version()?;
        let nn = self.nn_state()?;
        nn.check_descriptor(&req.context_descriptor)?;
        let keys = nn
            .ctx
            .evaluation_keys_from_bytes(&decode_b64(&req.eval_keys_b64)?)
            .map_err(|e| ProtocolError::new(ErrorCode::BadEncoding, e.to_string()))?;
        let client_id = random_id("nn");
        self.nn_clients
            .write()
            .unwrap()
            .insert(client_id.clone(), Arc::new(keys));
        Ok(RegisterKeysResponse {
            protocol_version: version(),
            client_id,
        })
    }

    fn infer_nn(&self, req: &InferRequestNn) -> Result<InferResponse, ProtocolError> {
        req.check_version()?;
        let nn = self.nn_state()?;
        nn.check_descriptor(&req.context_descriptor)?;
        let keys = self
            .nn_clients
            .read()
            .unwrap()
            .get(&req.client_id)
            .cloned()
            .ok_or_else(|| {
                ProtocolError::new(ErrorCode::UnknownClient, format!("no client {:?}", req.client_id))
            })?;
        let ct = nn
            .ctx
            .ciphertext_from_bytes(&decode_b64(&req.ct_b64)?)
            .map_err(|e| ProtocolError::new(ErrorCode::BadEncoding, e.to_string()))?;
        let out = if ct.level == nn.prepared.input_level() && ct.scale == nn.ctx.default_scale() {
            nn.prepared.evaluate(&nn.ctx, &ct, &keys)?
        } else {
            he_forward(&nn.ctx, &ct, &nn.model, &keys, nn.options)?
        };
        Ok(InferResponse::encrypted(&nn.ctx.ciphertext_to_bytes(&out)))
    }
}
