use std::collections::BTreeSet;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::ckks::{CkksContext, CkksError, CkksKeySet};
use crate::data::TransactionRecord;
use crate::gbdt::{label_from_proba, sigmoid, FeatureMap, TreeEnsemble};
use crate::he_gbdt::{
    decrypt_score, encrypt_transaction, infer_encrypted, ClientKeyBundle, EncryptedEnsemble,
};
use crate::nn::{decrypt_logit, encrypt_input, HeOptions, NnError, NnModel, PreparedNn};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimilarityConfig {
    pub n_fraud: usize,
    pub n_legit: usize,
    pub seed: u64,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        SimilarityConfig {
            n_fraud: 75,
            n_legit: 75,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mismatch {
    /// Index into the test records.
    pub index: usize,
    pub plain_label: u8,
    pub he_label: u8,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub n_fraud: usize,
    pub n_legit: usize,
    pub mismatches: Vec<Mismatch>,
    /// True iff `mismatches` is empty.
    pub passed: bool,
    /// Set when a class had too few records and was sampled with
    /// replacement.
    pub resampled: bool,
    /// Sampled record indices, fraud first.
    pub sample: Vec<usize>,
}

fn draw(pool: &[usize], n: usize, rng: &mut ChaCha20Rng) -> (Vec<usize>, bool) {
    if pool.len() >= n {
        let mut picked: Vec<usize> = index::sample(rng, pool.len(), n)
            .into_iter()
            .map(|i| pool[i])
            .collect();
        picked.sort_unstable();
        (picked, false)
    } else {
        let picked = (0..n).map(|_| pool[rng.gen_range(0..pool.len())]).collect();
        (picked, true)
    }
}

/// Seeded balanced sample: `n_fraud` positives then `n_legit` negatives.
/// A class with too few records is sampled with replacement and flagged.
pub fn balanced_sample(
    records: &[TransactionRecord],
    cfg: &SimilarityConfig,
) -> Result<(Vec<usize>, bool), HarnessError> {
    let (fraud, legit): (Vec<usize>, Vec<usize>) =
        (0..records.len()).partition(|&i| records[i].label == 1);
    for (pool, n, class) in [(&fraud, cfg.n_fraud, "fraudulent"), (&legit, cfg.n_legit, "legitimate")] {
        if pool.is_empty() && n > 0 {
            return Err(HarnessError::Configuration(format!("no {class} records to sample")));
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let (mut sample, short_fraud) = draw(&fraud, cfg.n_fraud, &mut rng);
    let (legit_sample, short_legit) = draw(&legit, cfg.n_legit, &mut rng);
    sample.extend(legit_sample);
    Ok((sample, short_fraud || short_legit))
}

/// Labels a balanced sample with both labelers and records every
/// disagreement.
pub fn similarity_test(
    records: &[TransactionRecord],
    cfg: &SimilarityConfig,
    mut plain: impl FnMut(&FeatureMap) -> Result<u8, HarnessError>,
    mut he: impl FnMut(&FeatureMap) -> Result<u8, HarnessError>,
) -> Result<SimilarityReport, HarnessError> {
    let (sample, resampled) = balanced_sample(records, cfg)?;
    let mut mismatches = Vec::new();
    for &index in &sample {
        let features = &records[index].features;
        let plain_label = plain(features)?;
        let he_label = he(features)?;
        if plain_label != he_label {
            mismatches.push(Mismatch {
                index,
                plain_label,
                he_label,
            });
        }
    }
    Ok(SimilarityReport {
        n_fraud: cfg.n_fraud,
        n_legit: cfg.n_legit,
        passed: mismatches.is_empty(),
        mismatches,
        resampled,
        sample,
    })
}

/// Tree model against its encryption, decrypting with `bundle`.
pub fn gbdt_similarity(
    model: &TreeEnsemble,
    encrypted: &EncryptedEnsemble,
    bundle: &ClientKeyBundle,
    records: &[TransactionRecord],
    cfg: &SimilarityConfig,
) -> Result<SimilarityReport, HarnessError> {
    if encrypted.num_trees() != model.num_trees() {
        return Err(HarnessError::Configuration(format!(
            "encrypted model has {} trees, plaintext model {}",
            encrypted.num_trees(),
            model.num_trees()
        )));
    }
    if let Some(pk) = &encrypted.public_key {
        if pk != bundle.paillier_public() {
            return Err(HarnessError::Configuration(
                "Paillier key does not match the encrypted model".into(),
            ));
        }
    }
    let tags: BTreeSet<_> = model.feature_names.iter().map(|n| bundle.tag(n)).collect();
    if !encrypted.feature_tags().is_subset(&tags) {
        return Err(HarnessError::Configuration(
            "feature tags do not match the encrypted model".into(),
        ));
    }
    similarity_test(
        records,
        cfg,
        |f| Ok(model.predict_label(f)?),
        |f| {
            let ct = encrypt_transaction(f, bundle)?;
            let result = infer_encrypted(encrypted, &ct)?;
            Ok(decrypt_score(bundle, &result, encrypted.base_score)?.label)
        },
    )
}

fn configuration(e: NnError) -> HarnessError {
    match e {
        NnError::Ckks(CkksError::Context(m) | CkksError::Key(m)) => HarnessError::Configuration(m),
        other => other.into(),
    }
}

/// Network against its encrypted evaluation under `keys`.
pub fn nn_similarity(
    model: &NnModel,
    ctx: &CkksContext,
    keys: &CkksKeySet,
    opts: HeOptions,
    records: &[TransactionRecord],
    cfg: &SimilarityConfig,
) -> Result<SimilarityReport, HarnessError> {
    let prepared = PreparedNn::for_fresh_inputs(ctx, model, opts)?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    similarity_test(
        records,
        cfg,
        |f| Ok(label_from_proba(model.predict_proba(&model.input_vector(f)?)?)),
        |f| {
            let x = model.input_vector(f)?;
            let ct = encrypt_input(ctx, &keys.secret, &x, &mut rng)?;
            let out = prepared.evaluate(ctx, &ct, &keys.eval).map_err(configuration)?;
            let logit = decrypt_logit(ctx, &keys.secret, &out)?;
            Ok(label_from_proba(sigmoid(logit)))
        },
    )
}
