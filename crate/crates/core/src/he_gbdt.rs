//! Encrypted boosted trees.
//!
//! Split thresholds become OPE ciphertexts of their quantized value, feature
//! names become HMAC tags, and leaves become Paillier ciphertexts of their
//! fixed-point encoding (or stay in the clear in plaintext-leaf mode). The
//! Host routes an encrypted transaction by comparing OPE ciphertexts as plain
//! integers and sums the reached leaves homomorphically.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::rngs::OsRng;
use rand::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::gbdt::{sigmoid, FeatureMap, TreeEnsemble, TreeNode};
use crate::ope::{feature_tag, Ope, OpeError, OpeKey, OpeParams, PrfSeed, Quantizer};
use crate::paillier::{
    self, FixedPointCodec, PaillierCiphertext, PaillierError, PaillierPublicKey, PaillierSecretKey,
};

/// Trees deeper than this take impractically long to encrypt.
pub const DEPTH_WARNING: usize = 7;

pub type FeatureTag = [u8; 32];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HeGbdtError {
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("encrypted transaction is missing feature tag {0}")]
    MissingFeature(String),
    #[error("feature error: {0}")]
    Plaintext(#[from] crate::gbdt::GbdtError),
    #[error(transparent)]
    Paillier(#[from] PaillierError),
    #[error(transparent)]
    Ope(#[from] OpeError),
    #[error("encoding error: {0}")]
    Encoding(String),
    #[error("result does not match the model mode: {0}")]
    Mode(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LeafMode {
    #[default]
    PaillierLeaves,
    PlaintextLeaves,
}

impl std::str::FromStr for LeafMode {
    type Err = HeGbdtError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paillier-leaves" | "paillier" => Ok(LeafMode::PaillierLeaves),
            "plaintext-leaves" | "plaintext" => Ok(LeafMode::PlaintextLeaves),
            other => Err(HeGbdtError::Parameter(format!(
                "unknown leaf mode `{other}`"
            ))),
        }
    }
}

impl fmt::Display for LeafMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LeafMode::PaillierLeaves => "paillier-leaves",
            LeafMode::PlaintextLeaves => "plaintext-leaves",
        })
    }
}

/// Everything a Client needs to encrypt transactions and read scores.
#[derive(Clone, PartialEq)]
pub struct ClientKeyBundle {
    pub ope_key: OpeKey,
    pub prf_seed: PrfSeed,
    pub paillier_secret: PaillierSecretKey,
    pub quantizer: Quantizer,
    pub codec: FixedPointCodec,
    pub ope_params: OpeParams,
}

impl fmt::Debug for ClientKeyBundle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ClientKeyBundle")
            .field("quantizer", &self.quantizer)
            .field("ope_params", &self.ope_params)
            .finish_non_exhaustive()
    }
}

#[derive(Serialize, Deserialize)]
struct BundleWire {
    ope_key: String,
    prf_seed: String,
    paillier_secret: String,
    quantizer: Quantizer,
    scale_bits: u32,
    ope_params: OpeParams,
}

impl ClientKeyBundle {
    pub fn generate<R: RngCore + CryptoRng + ?Sized>(
        quantizer: Quantizer,
        paillier_bits: u64,
        rng: &mut R,
    ) -> Result<Self, HeGbdtError> {
        quantizer.validate()?;
        let ope_key = OpeKey::generate(rng);
        let mut prf_seed = [0u8; 16];
        rng.fill_bytes(&mut prf_seed);
        let keys = paillier::keygen(paillier_bits, rng)?;
        let codec = FixedPointCodec::for_key(&keys.public);
        let ope_params = OpeParams::default();
        if quantizer.buckets as u128 > ope_params.domain_size() {
            return Err(HeGbdtError::Parameter(
                "quantizer has more buckets than the OPE domain".into(),
            ));
        }
        Ok(ClientKeyBundle {
            ope_key,
            prf_seed,
            paillier_secret: keys.secret,
            quantizer,
            codec,
            ope_params,
        })
    }

    pub fn paillier_public(&self) -> &PaillierPublicKey {
        self.paillier_secret.public_key()
    }

    pub fn ope(&self) -> Result<Ope, HeGbdtError> {
        Ok(Ope::new(self.ope_key.clone(), self.ope_params)?)
    }

    pub fn tag(&self, name: &str) -> FeatureTag {
        feature_tag(&self.prf_seed, name)
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(BundleWire {
            ope_key: B64.encode(self.ope_key.as_bytes()),
            prf_seed: B64.encode(self.prf_seed),
            paillier_secret: B64.encode(self.paillier_secret.to_bytes()),
            quantizer: self.quantizer,
            scale_bits: self.codec.scale_bits,
            ope_params: self.ope_params,
        })
        .expect("bundle serializes")
    }

    pub fn from_json(value: &Value) -> Result<Self, HeGbdtError> {
        let wire: BundleWire = serde_json::from_value(value.clone())
            .map_err(|e| HeGbdtError::Encoding(e.to_string()))?;
        let ope_key = OpeKey::from_slice(&b64(&wire.ope_key)?)?;
        let prf_seed: PrfSeed = b64(&wire.prf_seed)?
            .try_into()
            .map_err(|_| HeGbdtError::Encoding("prf seed must be 16 bytes".into()))?;
        let paillier_secret = PaillierSecretKey::from_bytes(&b64(&wire.paillier_secret)?)?;
        wire.quantizer.validate()?;
        wire.ope_params.validate()?;
        let codec = FixedPointCodec::new(wire.scale_bits, paillier_secret.public_key().n().clone());
        Ok(ClientKeyBundle {
            ope_key,
            prf_seed,
            paillier_secret,
            quantizer: wire.quantizer,
            codec,
            ope_params: wire.ope_params,
        })
    }
}

fn b64(s: &str) -> Result<Vec<u8>, HeGbdtError> {
    B64.decode(s)
        .map_err(|e| HeGbdtError::Encoding(format!("bad base64: {e}")))
}

/// Quantizer covering every threshold of `model` with a margin on each side,
/// so a value clamped to an endpoint still routes like its plaintext.
pub fn fit_quantizer(model: &TreeEnsemble) -> Quantizer {
    let (lo, hi) = model.threshold_range().unwrap_or((-1.0, 1.0));
    let pad = ((hi - lo) * 0.1).max(1.0);
    Quantizer::with_default_buckets(lo - pad, hi + pad).expect("padded range is non-empty")
}

#[derive(Clone, Debug, PartialEq)]
pub enum EncryptedLeaf {
    Paillier(PaillierCiphertext),
    Plain(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub enum EncryptedNode {
    Split {
        tag: FeatureTag,
        threshold: u64,
        left: Box<EncryptedNode>,
        right: Box<EncryptedNode>,
    },
    Leaf(EncryptedLeaf),
}

impl EncryptedNode {
    pub fn depth(&self) -> usize {
        match self {
            EncryptedNode::Leaf(_) => 0,
            EncryptedNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    pub fn node_count(&self) -> usize {
        match self {
            EncryptedNode::Leaf(_) => 1,
            EncryptedNode::Split { left, right, .. } => 1 + left.node_count() + right.node_count(),
        }
    }

    fn route(&self, tx: &EncryptedTransactionOpe) -> Result<&EncryptedLeaf, HeGbdtError> {
        let mut node = self;
        loop {
            match node {
                EncryptedNode::Leaf(leaf) => return Ok(leaf),
                EncryptedNode::Split {
                    tag,
                    threshold,
                    left,
                    right,
                } => {
                    let v =
                        tx.0.get(tag)
                            .ok_or_else(|| HeGbdtError::MissingFeature(hex::encode(tag)))?;
                    node = if v < threshold { left } else { right };
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncryptedEnsemble {
    pub mode: LeafMode,
    pub base_score: f64,
    /// Present in Paillier-leaf mode; needed to sum leaves.
    pub public_key: Option<PaillierPublicKey>,
    pub trees: Vec<EncryptedNode>,
}

/// OPE ciphertext of every feature, keyed by feature tag.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EncryptedTransactionOpe(pub BTreeMap<FeatureTag, u64>);

#[derive(Clone, Debug, PartialEq)]
pub enum EncryptedScore {
    /// Sum of reached leaves; the base score is not included.
    Paillier(PaillierCiphertext),
    /// Full margin including the base score.
    Plain(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub margin: f64,
    pub proba: f64,
    pub label: u8,
}

impl Score {
    pub fn from_margin(margin: f64) -> Self {
        let proba = sigmoid(margin);
        Score {
            margin,
            proba,
            label: crate::gbdt::label_from_proba(proba),
        }
    }
}

struct NodeEncryptor<'a> {
    ope: Ope,
    bundle: &'a ClientKeyBundle,
    mode: LeafMode,
}

impl NodeEncryptor<'_> {
    fn encrypt_tree(
        &self,
        node: &TreeNode,
        rng: &mut ChaCha20Rng,
    ) -> Result<EncryptedNode, HeGbdtError> {
        match node {
            TreeNode::Leaf { value } => Ok(EncryptedNode::Leaf(match self.mode {
                LeafMode::PlaintextLeaves => EncryptedLeaf::Plain(*value),
                LeafMode::PaillierLeaves => {
                    let m = self.bundle.codec.encode(*value)?;
                    EncryptedLeaf::Paillier(self.bundle.paillier_public().encrypt(&m, rng)?)
                }
            })),
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                let q = &self.bundle.quantizer;
                if !q.contains(*threshold) {
                    log::warn!(
                        "threshold {threshold} on a model feature lies outside the quantizer range [{}, {}] and is clamped",
                        q.min,
                        q.max
                    );
                }
                Ok(EncryptedNode::Split {
                    tag: self.bundle.tag(feature),
                    threshold: self.ope.encrypt(q.quantize(*threshold))?,
                    left: Box::new(self.encrypt_tree(left, rng)?),
                    right: Box::new(self.encrypt_tree(right, rng)?),
                })
            }
        }
    }
}

/// Encrypts every tree, spreading the trees over `cores` worker threads.
/// Leaf randomness is drawn from the operating system.
pub fn encrypt_model(
    model: &TreeEnsemble,
    bundle: &ClientKeyBundle,
    mode: LeafMode,
    cores: usize,
) -> Result<EncryptedEnsemble, HeGbdtError> {
    let mut seed = [0u8; 32];
    OsRng.fill_bytes(&mut seed);
    encrypt_model_seeded(model, bundle, mode, cores, seed)
}

/// Like [`encrypt_model`], with each tree's leaf randomness derived from
/// `seed` and the tree index; the output does not depend on `cores`.
pub fn encrypt_model_seeded(
    model: &TreeEnsemble,
    bundle: &ClientKeyBundle,
    mode: LeafMode,
    cores: usize,
    seed: [u8; 32],
) -> Result<EncryptedEnsemble, HeGbdtError> {
    if cores < 1 {
        return Err(HeGbdtError::Parameter("cores must be at least 1".into()));
    }
    if model.trees.is_empty() {
        return Err(HeGbdtError::Parameter("model has no trees".into()));
    }
    let depth = model.max_depth();
    if depth > DEPTH_WARNING {
        log::warn!(
            "model depth {depth} exceeds {DEPTH_WARNING}; encryption time grows quickly with depth"
        );
    }
    let encryptor = NodeEncryptor {
        ope: bundle.ope()?,
        bundle,
        mode,
    };
    let tree_rng = |i: usize| {
        let mut rng = ChaCha20Rng::from_seed(seed);
        rng.set_stream(i as u64);
        rng
    };

    let workers = cores.min(model.trees.len());
    let chunk = model.trees.len().div_ceil(workers);
    let trees = std::thread::scope(|scope| {
        let handles: Vec<_> = model
            .trees
            .chunks(chunk)
            .enumerate()
            .map(|(c, trees)| {
                let encryptor = &encryptor;
                scope.spawn(move || {
                    trees
                        .iter()
                        .enumerate()
                        .map(|(k, t)| encryptor.encrypt_tree(t, &mut tree_rng(c * chunk + k)))
                        .collect::<Result<Vec<_>, _>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(model.trees.len());
        for h in handles {
            out.extend(h.join().expect("encryption worker panicked")?);
        }
        Ok::<_, HeGbdtError>(out)
    })?;

    Ok(EncryptedEnsemble {
        mode,
        base_score: model.base_score,
        public_key: match mode {
            LeafMode::PaillierLeaves => Some(bundle.paillier_public().clone()),
            LeafMode::PlaintextLeaves => None,
        },
        trees,
    })
}

pub fn encrypt_transaction(
    tx: &FeatureMap,
    bundle: &ClientKeyBundle,
) -> Result<EncryptedTransactionOpe, HeGbdtError> {
    let ope = bundle.ope()?;
    let mut out = BTreeMap::new();
    for (name, v) in tx {
        out.insert(
            bundle.tag(name),
            ope.encrypt(bundle.quantizer.quantize(*v))?,
        );
    }
    Ok(EncryptedTransactionOpe(out))
}

pub fn infer_encrypted(
    model: &EncryptedEnsemble,
    tx: &EncryptedTransactionOpe,
) -> Result<EncryptedScore, HeGbdtError> {
    match model.mode {
        LeafMode::PlaintextLeaves => {
            let mut margin = model.base_score;
            for tree in &model.trees {
                match tree.route(tx)? {
                    EncryptedLeaf::Plain(v) => margin += v,
                    EncryptedLeaf::Paillier(_) => {
                        return Err(HeGbdtError::Mode(
                            "Paillier leaf in a plaintext-leaf model".into(),
                        ))
                    }
                }
            }
            Ok(EncryptedScore::Plain(margin))
        }
        LeafMode::PaillierLeaves => {
            let pk = model.public_key.as_ref().ok_or_else(|| {
                HeGbdtError::Mode("Paillier-leaf model without a public key".into())
            })?;
            let mut acc = pk.zero_ciphertext();
            for tree in &model.trees {
                match tree.route(tx)? {
                    EncryptedLeaf::Paillier(ct) => acc = pk.add(&acc, ct)?,
                    EncryptedLeaf::Plain(_) => {
                        return Err(HeGbdtError::Mode(
                            "plaintext leaf in a Paillier-leaf model".into(),
                        ))
                    }
                }
            }
            Ok(EncryptedScore::Paillier(acc))
        }
    }
}

/// Client-side decryption. A plaintext-leaf result already carries the base
/// score, so `base_score` is only added to Paillier results.
pub fn decrypt_score(
    bundle: &ClientKeyBundle,
    result: &EncryptedScore,
    base_score: f64,
) -> Result<Score, HeGbdtError> {
    let margin = match result {
        EncryptedScore::Plain(m) => *m,
        EncryptedScore::Paillier(ct) => {
            base_score + bundle.codec.decode(&bundle.paillier_secret.decrypt(ct)?)
        }
    };
    Ok(Score::from_margin(margin))
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum NodeWire {
    Split {
        tag: String,
        ct: u64,
        l: Box<NodeWire>,
        r: Box<NodeWire>,
    },
    Leaf {
        leaf: LeafWire,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LeafWire {
    Plain(f64),
    Paillier(String),
}

#[derive(Serialize, Deserialize)]
struct EnsembleWire {
    mode: LeafMode,
    base_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    public_key: Option<String>,
    trees: Vec<NodeWire>,
}

impl EncryptedEnsemble {
    pub fn num_trees(&self) -> usize {
        self.trees.len()
    }

    /// Tags of every feature a split references.
    pub fn feature_tags(&self) -> BTreeSet<FeatureTag> {
        fn walk(node: &EncryptedNode, out: &mut BTreeSet<FeatureTag>) {
            if let EncryptedNode::Split { tag, left, right, .. } = node {
                out.insert(*tag);
                walk(left, out);
                walk(right, out);
            }
        }
        let mut out = BTreeSet::new();
        for tree in &self.trees {
            walk(tree, &mut out);
        }
        out
    }

    pub fn to_json(&self) -> Value {
        fn node(n: &EncryptedNode) -> NodeWire {
            match n {
                EncryptedNode::Leaf(EncryptedLeaf::Plain(v)) => NodeWire::Leaf {
                    leaf: LeafWire::Plain(*v),
                },
                EncryptedNode::Leaf(EncryptedLeaf::Paillier(ct)) => NodeWire::Leaf {
                    leaf: LeafWire::Paillier(B64.encode(ct.to_bytes())),
                },
                EncryptedNode::Split {
                    tag,
                    threshold,
                    left,
                    right,
                } => NodeWire::Split {
                    tag: B64.encode(tag),
                    ct: *threshold,
                    l: Box::new(node(left)),
                    r: Box::new(node(right)),
                },
            }
        }
        serde_json::to_value(EnsembleWire {
            mode: self.mode,
            base_score: self.base_score,
            public_key: self.public_key.as_ref().map(|pk| B64.encode(pk.to_bytes())),
            trees: self.trees.iter().map(node).collect(),
        })
        .expect("encrypted model serializes")
    }

    pub fn from_json(value: &Value) -> Result<Self, HeGbdtError> {
        let wire: EnsembleWire = serde_json::from_value(value.clone())
            .map_err(|e| HeGbdtError::Encoding(e.to_string()))?;
        let public_key = match &wire.public_key {
            Some(s) => Some(PaillierPublicKey::from_bytes(&b64(s)?)?),
            None => None,
        };
        fn node(w: NodeWire, pk: Option<&PaillierPublicKey>) -> Result<EncryptedNode, HeGbdtError> {
            Ok(match w {
                NodeWire::Leaf {
                    leaf: LeafWire::Plain(v),
                } => EncryptedNode::Leaf(EncryptedLeaf::Plain(v)),
                NodeWire::Leaf {
                    leaf: LeafWire::Paillier(s),
                } => {
                    let pk = pk.ok_or_else(|| {
                        HeGbdtError::Encoding("Paillier leaf without a public key".into())
                    })?;
                    EncryptedNode::Leaf(EncryptedLeaf::Paillier(PaillierCiphertext::from_bytes(
                        &b64(&s)?,
                        pk,
                    )?))
                }
                NodeWire::Split { tag, ct, l, r } => EncryptedNode::Split {
                    tag: b64(&tag)?.try_into().map_err(|_| {
                        HeGbdtError::Encoding("feature tag must be 32 bytes".into())
                    })?,
                    threshold: ct,
                    left: Box::new(node(*l, pk)?),
                    right: Box::new(node(*r, pk)?),
                },
            })
        }
        let trees = wire
            .trees
            .into_iter()
            .map(|t| node(t, public_key.as_ref()))
            .collect::<Result<Vec<_>, _>>()?;
        if trees.is_empty() {
            return Err(HeGbdtError::Encoding("encrypted model has no trees".into()));
        }
        Ok(EncryptedEnsemble {
            mode: wire.mode,
            base_score: wire.base_score,
            public_key,
            trees,
        })
    }
}

impl EncryptedTransactionOpe {
    pub fn to_json(&self) -> Value {
        Value::Object(
            self.0
                .iter()
                .map(|(tag, ct)| (B64.encode(tag), Value::from(*ct)))
                .collect(),
        )
    }

    pub fn from_json(value: &Value) -> Result<Self, HeGbdtError> {
        let obj = value.as_object().ok_or_else(|| {
            HeGbdtError::Encoding("encrypted transaction must be an object".into())
        })?;
        let mut out = BTreeMap::new();
        for (k, v) in obj {
            let tag: FeatureTag = b64(k)?
                .try_into()
                .map_err(|_| HeGbdtError::Encoding("feature tag must be 32 bytes".into()))?;
            let ct = v.as_u64().ok_or_else(|| {
                HeGbdtError::Encoding("OPE ciphertext must be an unsigned integer".into())
            })?;
            out.insert(tag, ct);
        }
        Ok(EncryptedTransactionOpe(out))
    }
}

impl EncryptedScore {
    pub fn to_json(&self) -> Value {
        match self {
            EncryptedScore::Plain(m) => serde_json::json!({ "plain": m }),
            EncryptedScore::Paillier(ct) => {
                serde_json::json!({ "paillier": B64.encode(ct.to_bytes()) })
            }
        }
    }

    pub fn from_json(value: &Value, pk: Option<&PaillierPublicKey>) -> Result<Self, HeGbdtError> {
        if let Some(m) = value.get("plain").and_then(Value::as_f64) {
            return Ok(EncryptedScore::Plain(m));
        }
        let s = value
            .get("paillier")
            .and_then(Value::as_str)
            .ok_or_else(|| HeGbdtError::Encoding("score needs `plain` or `paillier`".into()))?;
        let pk =
            pk.ok_or_else(|| HeGbdtError::Encoding("Paillier score without a public key".into()))?;
        Ok(EncryptedScore::Paillier(PaillierCiphertext::from_bytes(
            &b64(s)?,
            pk,
        )?))
    }
}

#[cfg(test)]
pub(crate) mod test_keys {
    use std::sync::OnceLock;

    use super::*;

    /// A shared 512-bit bundle over the quantizer [-10, 10].
    pub fn bundle() -> &'static ClientKeyBundle {
        static B: OnceLock<ClientKeyBundle> = OnceLock::new();
        B.get_or_init(|| {
            let mut rng = ChaCha20Rng::seed_from_u64(42);
            let q = Quantizer::with_default_buckets(-10.0, 10.0).unwrap();
            ClientKeyBundle::generate(q, 512, &mut rng).unwrap()
        })
    }
}
