use std::collections::BTreeMap;
use std::hint::black_box;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::HarnessError;
use crate::ckks::{CkksContext, CkksKeySet};
use crate::gbdt::{FeatureMap, TreeEnsemble};
use crate::he_gbdt::{encrypt_model, encrypt_transaction, infer_encrypted, ClientKeyBundle, LeafMode};
use crate::nn::{encrypt_input, HeOptions, NnModel, PreparedNn};

pub const OP_NOOP: &str = "noop";
pub const OP_XGB_TX_ENCRYPTION: &str = "xgb-transaction-encryption";
pub const OP_XGB_MODEL_ENCRYPTION: &str = "xgb-model-encryption";
pub const OP_XGB_PLAIN_INFERENCE: &str = "xgb-plaintext-inference";
pub const OP_XGB_ENCRYPTED_INFERENCE: &str = "xgb-encrypted-inference";
pub const OP_NN_TX_ENCRYPTION: &str = "nn-transaction-encryption";
pub const OP_NN_MODEL_PREPARATION: &str = "nn-model-preparation";
pub const OP_NN_PLAIN_INFERENCE: &str = "nn-plaintext-inference";
pub const OP_NN_ENCRYPTED_INFERENCE: &str = "nn-encrypted-inference";

/// Published latencies for comparable models (a 51-tree depth-9 ensemble
/// and a 28-47-1 network), in milliseconds. Shown beside measurements only;
/// hardware differs, so they are never asserted.
pub fn reference_ms(op: &str) -> Option<f64> {
    match op {
        OP_XGB_TX_ENCRYPTION => Some(174.0),
        OP_XGB_MODEL_ENCRYPTION => Some(13_000.0),
        OP_XGB_PLAIN_INFERENCE => Some(0.7),
        OP_XGB_ENCRYPTED_INFERENCE => Some(6.0),
        OP_NN_TX_ENCRYPTION => Some(10.0),
        OP_NN_PLAIN_INFERENCE => Some(0.08),
        OP_NN_ENCRYPTED_INFERENCE => Some(296.0),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    pub op: String,
    pub runs: usize,
    /// Fastest timed run; warmup runs are excluded.
    pub best: f64,
    pub unit: String,
    /// Model and input sizes the operation ran on.
    pub config: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<f64>,
}

impl BenchEntry {
    pub fn best_duration(&self) -> Duration {
        Duration::from_secs_f64(self.best / 1e3)
    }
}

type Op = Box<dyn FnMut() -> Result<(), HarnessError> + Send>;

/// Named operations timed as the minimum over repeated runs.
pub struct BenchRegistry {
    ops: BTreeMap<String, (Value, Op)>,
    /// Untimed runs before measuring.
    pub warmup: usize,
}

impl Default for BenchRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl BenchRegistry {
    /// A registry holding only the no-op.
    pub fn new() -> Self {
        let mut reg = BenchRegistry {
            ops: BTreeMap::new(),
            warmup: 1,
        };
        reg.register(OP_NOOP, json!({}), || Ok(()));
        reg
    }

    pub fn register(
        &mut self,
        name: &str,
        config: Value,
        op: impl FnMut() -> Result<(), HarnessError> + Send + 'static,
    ) {
        self.ops.insert(name.to_string(), (config, Box::new(op)));
    }

    pub fn names(&self) -> Vec<&str> {
        self.ops.keys().map(String::as_str).collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.ops.contains_key(name)
    }

    pub fn run(&mut self, name: &str, runs: usize) -> Result<BenchEntry, HarnessError> {
        if runs == 0 {
            return Err(HarnessError::Configuration("runs must be at least 1".into()));
        }
        let warmup = self.warmup;
        let (config, op) = self
            .ops
            .get_mut(name)
            .ok_or_else(|| HarnessError::Registry(name.to_string()))?;
        for _ in 0..warmup {
            op()?;
        }
        let mut best = Duration::MAX;
        for _ in 0..runs {
            let start = Instant::now();
            op()?;
            best = best.min(start.elapsed());
        }
        Ok(BenchEntry {
            op: name.to_string(),
            runs,
            best: best.as_secs_f64() * 1e3,
            unit: "ms".into(),
            config: config.clone(),
            reference: reference_ms(name),
        })
    }
}

pub struct GbdtBenchInputs {
    pub model: TreeEnsemble,
    pub bundle: ClientKeyBundle,
    pub tx: FeatureMap,
    pub mode: LeafMode,
    pub cores: usize,
}

/// Registers transaction encryption, model encryption and both inferences
/// for a tree model.
pub fn register_gbdt_ops(reg: &mut BenchRegistry, inputs: GbdtBenchInputs) -> Result<(), HarnessError> {
    let inputs = Arc::new(inputs);
    let config = json!({
        "trees": inputs.model.num_trees(),
        "max_depth": inputs.model.max_depth(),
        "features": inputs.tx.len(),
        "mode": inputs.mode.to_string(),
        "cores": inputs.cores,
        "paillier_bits": inputs.bundle.paillier_public().bits(),
    });
    let encrypted = Arc::new(encrypt_model(&inputs.model, &inputs.bundle, inputs.mode, inputs.cores)?);
    let ct = Arc::new(encrypt_transaction(&inputs.tx, &inputs.bundle)?);

    let i = inputs.clone();
    reg.register(OP_XGB_TX_ENCRYPTION, config.clone(), move || {
        black_box(encrypt_transaction(&i.tx, &i.bundle)?);
        Ok(())
    });
    let i = inputs.clone();
    reg.register(OP_XGB_MODEL_ENCRYPTION, config.clone(), move || {
        black_box(encrypt_model(&i.model, &i.bundle, i.mode, i.cores)?);
        Ok(())
    });
    let i = inputs.clone();
    reg.register(OP_XGB_PLAIN_INFERENCE, config.clone(), move || {
        black_box(i.model.predict_margin(&i.tx)?);
        Ok(())
    });
    reg.register(OP_XGB_ENCRYPTED_INFERENCE, config, move || {
        black_box(infer_encrypted(&encrypted, &ct)?);
        Ok(())
    });
    Ok(())
}

pub struct NnBenchInputs {
    pub model: NnModel,
    pub ctx: Arc<CkksContext>,
    pub keys: Arc<CkksKeySet>,
    pub x: Vec<f64>,
    pub options: HeOptions,
}

/// Registers input encryption, weight encoding and both inferences for a
/// network.
pub fn register_nn_ops(reg: &mut BenchRegistry, inputs: NnBenchInputs) -> Result<(), HarnessError> {
    let inputs = Arc::new(inputs);
    let params = inputs.ctx.params();
    let config = json!({
        "d": inputs.model.input_dim(),
        "h": inputs.model.hidden_size(),
        "hidden_layers": inputs.model.num_hidden_layers(),
        "N": params.n,
        "moduli_bits": params.moduli_bits,
    });
    let prepared = Arc::new(PreparedNn::for_fresh_inputs(&inputs.ctx, &inputs.model, inputs.options)?);
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let ct = Arc::new(encrypt_input(&inputs.ctx, &inputs.keys.secret, &inputs.x, &mut rng)?);

    let i = inputs.clone();
    reg.register(OP_NN_TX_ENCRYPTION, config.clone(), move || {
        black_box(encrypt_input(&i.ctx, &i.keys.secret, &i.x, &mut rng)?);
        Ok(())
    });
    let i = inputs.clone();
    reg.register(OP_NN_MODEL_PREPARATION, config.clone(), move || {
        black_box(PreparedNn::for_fresh_inputs(&i.ctx, &i.model, i.options)?);
        Ok(())
    });
    let i = inputs.clone();
    reg.register(OP_NN_PLAIN_INFERENCE, config.clone(), move || {
        black_box(i.model.forward_plain(&i.x)?);
        Ok(())
    });
    let i = inputs;
    reg.register(OP_NN_ENCRYPTED_INFERENCE, config, move || {
        black_box(prepared.evaluate(&i.ctx, &ct, &i.keys.eval)?);
        Ok(())
    });
    Ok(())
}
