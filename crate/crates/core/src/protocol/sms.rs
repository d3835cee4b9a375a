use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::rngs::OsRng;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use super::wire::*;
use super::{ErrorCode, ProtocolError, SmsApi};
use crate::gbdt::load_model;
use crate::he_gbdt::{encrypt_model_seeded, fit_quantizer, ClientKeyBundle};
use crate::paillier::DEFAULT_KEY_BITS;

#[derive(Clone, Debug)]
pub struct SmsConfig {
    pub paillier_bits: u64,
    /// Worker threads for model encryption.
    pub cores: usize,
    /// Derives all key and leaf randomness from this seed and the model id.
    /// Intended for reproducible experiments only.
    pub seed: Option<u64>,
}

impl Default for SmsConfig {
    fn default() -> Self {
        SmsConfig {
            paillier_bits: DEFAULT_KEY_BITS,
            cores: 1,
            seed: None,
        }
    }
}

/// Generates a key bundle per model id, encrypts the model under it and
/// hands the bundle to the Client. Holds no transaction data.
pub struct Sms {
    config: SmsConfig,
    bundles: Mutex<HashMap<String, ClientKeyBundle>>,
    /// One lock per model id so jobs for the same id run one at a time.
    jobs: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    interactions: AtomicUsize,
}

impl Sms {
    pub fn new(config: SmsConfig) -> Self {
        Sms {
            config,
            bundles: Mutex::new(HashMap::new()),
            jobs: Mutex::new(HashMap::new()),
            interactions: AtomicUsize::new(0),
        }
    }

    /// Requests served so far, of either kind.
    pub fn interactions(&self) -> usize {
        self.interactions.load(Ordering::SeqCst)
    }

    pub fn model_ids(&self) -> Vec<String> {
        let mut ids: Vec<_> = self.bundles.lock().unwrap().keys().cloned().collect();
        ids.sort();
        ids
    }

    fn job_lock(&self, model_id: &str) -> Arc<Mutex<()>> {
        self.jobs
            .lock()
            .unwrap()
            .entry(model_id.to_string())
            .or_default()
            .clone()
    }

    fn rng_seed(&self, model_id: &str) -> [u8; 32] {
        match self.config.seed {
            Some(seed) => {
                let mut h = Sha256::new();
                h.update(seed.to_be_bytes());
                h.update(model_id.as_bytes());
                h.finalize().into()
            }
            None => {
                let mut s = [0u8; 32];
                OsRng.fill_bytes(&mut s);
                s
            }
        }
    }
}

impl SmsApi for Sms {
    fn encrypt_model(&self, req: &EncryptModelRequest) -> Result<EncryptModelResponse, ProtocolError> {
        self.interactions.fetch_add(1, Ordering::SeqCst);
        req.check_version()?;
        if req.model_id.is_empty() {
            return Err(ProtocolError::new(ErrorCode::BadEncoding, "empty model id"));
        }
        let bytes = serde_json::to_vec(&req.model_json).map_err(ProtocolError::internal)?;
        let model =
            load_model(&bytes).map_err(|e| ProtocolError::new(ErrorCode::BadEncoding, e.to_string()))?;
        let quantizer = req.quantizer.unwrap_or_else(|| fit_quantizer(&model));

        let lock = self.job_lock(&req.model_id);
        let _job = lock.lock().unwrap();
        let mut rng = ChaCha20Rng::from_seed(self.rng_seed(&req.model_id));
        let bundle = ClientKeyBundle::generate(quantizer, self.config.paillier_bits, &mut rng)?;
        let mut leaf_seed = [0u8; 32];
        rng.fill_bytes(&mut leaf_seed);
        let encrypted = encrypt_model_seeded(&model, &bundle, req.mode, self.config.cores, leaf_seed)?;
        self.bundles.lock().unwrap().insert(req.model_id.clone(), bundle);
        log::info!(
            "encrypted model {} ({} trees, {})",
            req.model_id,
            encrypted.num_trees(),
            req.mode
        );
        Ok(EncryptModelResponse {
            protocol_version: version(),
            model_id: req.model_id.clone(),
            encrypted_model_json: encrypted.to_json(),
        })
    }

    fn client_keys(&self, model_id: &str) -> Result<KeyBundleResponse, ProtocolError> {
        self.interactions.fetch_add(1, Ordering::SeqCst);
        let bundles = self.bundles.lock().unwrap();
        let bundle = bundles.get(model_id).ok_or_else(|| {
            ProtocolError::new(ErrorCode::UnknownModel, format!("no keys for model {model_id:?}"))
        })?;
        Ok(KeyBundleResponse::new(model_id, bundle))
    }
}
