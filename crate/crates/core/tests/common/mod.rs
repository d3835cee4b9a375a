//! Shared fixtures for integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use hefraud::ckks::CkksParams;
use hefraud::data::{generate_synthetic, TransactionRecord};
use hefraud::gbdt::{train, FeatureMap, TrainConfig, TreeEnsemble};
use hefraud::nn::{train_nn, HeOptions, NnModel, NnTrainConfig};
use hefraud::protocol::{Client, ClientConfig, Host, HostConfig, NnHostConfig, Sms, SmsConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub const FEATURES: usize = 8;

pub fn records(n: usize, seed: u64) -> Vec<TransactionRecord> {
    generate_synthetic(n, 0.2, FEATURES, seed).unwrap()
}

pub fn tree_model() -> TreeEnsemble {
    let cfg = TrainConfig {
        max_depth: 3,
        num_estimators: 10,
        ..TrainConfig::default()
    };
    train(&records(600, 1), &cfg).unwrap()
}

pub fn network() -> NnModel {
    let cfg = NnTrainConfig {
        hidden_layer_size: 6,
        epochs: 60,
        ..NnTrainConfig::default()
    };
    train_nn(&records(600, 2), &cfg).unwrap()
}

/// A 2048-degree ring with the default chain shape; below the security cap.
pub fn small_ring() -> CkksParams {
    CkksParams {
        n: 2048,
        ..CkksParams::default()
    }
}

pub fn sms() -> Arc<Sms> {
    Arc::new(Sms::new(SmsConfig {
        paillier_bits: 512,
        cores: 1,
        seed: Some(9),
    }))
}

pub fn host(sms: Arc<Sms>) -> Host {
    let config = HostConfig {
        xgb_model: Some(tree_model()),
        nn: Some(NnHostConfig {
            model: network(),
            params: small_ring(),
            allow_insecure: true,
            options: HeOptions::default(),
        }),
        ..HostConfig::default()
    };
    Host::new(config, Some(sms)).unwrap()
}

pub fn client(seed: u64) -> Client {
    Client::new(ClientConfig {
        allow_insecure: true,
        seed: Some(seed),
    })
}

pub fn random_tx(rng: &mut ChaCha20Rng) -> FeatureMap {
    (1..=FEATURES)
        .map(|i| (format!("V{i}"), rng.gen_range(-4.0..4.0)))
        .collect()
}

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Whether `needle` occurs anywhere in `haystack`.
pub fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}
