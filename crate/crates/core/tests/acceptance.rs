//! Acceptance criteria, one test each. Every test prints a single
//! `criterion N: PASS|FAIL|SKIP ...` line on the real stdout, so the verdicts
//! show up even when output capture is on.

mod common;

use std::io::Write;
use std::net::SocketAddr;
use std::process::Command;
use std::sync::{Arc, Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use num_bigint::RandBigInt;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde_json::{json, Value};

use hefraud::ckks::{CkksCiphertext, CkksContext, CkksError, CkksKeySet, CkksParams};
use hefraud::data::{generate_synthetic, load_csv, split, LoadOptions, MetricsReport, SplitDataset};
use hefraud::gbdt::{save_model, train, FeatureMap, TrainConfig, TreeEnsemble};
use hefraud::harness::{gbdt_similarity, nn_similarity, SimilarityConfig};
use hefraud::he_gbdt::{
    decrypt_score, encrypt_model, encrypt_model_seeded, encrypt_transaction, fit_quantizer, infer_encrypted,
    ClientKeyBundle, EncryptedEnsemble, LeafMode,
};
use hefraud::nn::{
    decrypt_logit, encrypt_input, loss_and_gradient, rotation_steps, train_nn, Dense, HeOptions, NnModel,
    NnTrainConfig, PreparedNn,
};
use hefraud::ope::{Ope, OpeKey, OpeParams};
use hefraud::paillier::keygen;
use hefraud::protocol::wire::{encode_b64, InferRequestNn, InferRequestXgb};
use hefraud::protocol::{
    run_protocol_nn, run_protocol_xgb, serve_host, serve_sms, HttpHost, HttpSms, SmsApi, PROTOCOL_VERSION,
};

use common::{client, contains, host, random_tx, rng, sms};

/// Timing-sensitive criteria must not share the CPU with each other.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Prints the verdict line outside the test harness's capture.
fn verdict(n: u8, status: &str, detail: impl std::fmt::Display) {
    let mut out = std::io::stdout().lock();
    writeln!(out, "criterion {n}: {status} {detail}").unwrap();
    out.flush().unwrap();
}

fn report(n: u8, passed: bool, detail: impl std::fmt::Display) {
    verdict(n, if passed { "PASS" } else { "FAIL" }, detail);
}

const FEATURES: usize = 28;

/// A seeded synthetic dataset with a depth-9, 51-tree model encrypted under
/// production-size keys, and a 28-47-1 network.
struct Deep {
    data: SplitDataset,
    trees: TreeEnsemble,
    bundle: ClientKeyBundle,
    encrypted: EncryptedEnsemble,
    network: NnModel,
}

fn deep() -> &'static Deep {
    static DEEP: OnceLock<Deep> = OnceLock::new();
    DEEP.get_or_init(|| {
        let records = generate_synthetic(20_000, 0.02, FEATURES, 1).unwrap();
        let data = split(&records).unwrap();
        let trees = train(
            &data.train,
            &TrainConfig {
                max_depth: 9,
                num_estimators: 51,
                undersampling_num_negatives: Some(2_000),
                seed: 1,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let mut rng = rng(11);
        let bundle = ClientKeyBundle::generate(fit_quantizer(&trees), 3072, &mut rng).unwrap();
        let encrypted = encrypt_model_seeded(&trees, &bundle, LeafMode::PaillierLeaves, 1, [3; 32]).unwrap();
        let network = train_nn(
            &data.train,
            &NnTrainConfig {
                seed: 1,
                ..NnTrainConfig::default()
            },
        )
        .unwrap();
        Deep {
            data,
            trees,
            bundle,
            encrypted,
            network,
        }
    })
}

fn secure_ckks(model: &NnModel, seed: u64) -> (CkksContext, CkksKeySet) {
    let ctx = CkksContext::new(CkksParams::default()).unwrap();
    let keys = CkksKeySet::generate_with_steps(&ctx, &rotation_steps(&ctx, model), &mut rng(seed));
    (ctx, keys)
}

fn max_abs_error(got: &[f64], want: &[f64]) -> f64 {
    got.iter().zip(want).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max)
}

fn random_slots(n: usize, bound: f64, rng: &mut ChaCha20Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

fn ope_cross_process_matches(dir: &std::path::Path) -> bool {
    let model = common::tree_model();
    let bundle = ClientKeyBundle::generate(fit_quantizer(&model), 512, &mut rng(21)).unwrap();
    std::fs::write(dir.join("model.json"), save_model(&model)).unwrap();
    let keys = json!({ "model_id": "m", "bundle": bundle.to_json() });
    std::fs::write(dir.join("keys.json"), keys.to_string()).unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_hefraud"))
        .current_dir(dir)
        .args(["--mode", "plaintext-leaves", "encrypt-model", "--model", "model.json"])
        .args(["--keys-in", "keys.json", "--out", "enc.json"])
        .output()
        .unwrap()
        .status;
    if !status.success() {
        return false;
    }
    let file: Value = serde_json::from_slice(&std::fs::read(dir.join("enc.json")).unwrap()).unwrap();
    let local = encrypt_model(&model, &bundle, LeafMode::PlaintextLeaves, 1).unwrap();
    file["encrypted_model"] == local.to_json()
}

#[test]
fn criterion_1_primitive_suites() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = rng(1);

    let kp = keygen(1024, &mut rng).unwrap();
    let n = kp.public.n().clone();
    let paillier_ok = (0..1000).all(|_| {
        let a = rng.gen_biguint_below(&n);
        let b = rng.gen_biguint_below(&n);
        let ca = kp.public.encrypt(&a, &mut rng).unwrap();
        let cb = kp.public.encrypt(&b, &mut rng).unwrap();
        let sum = kp.public.add(&ca, &cb).unwrap();
        kp.secret.decrypt(&sum).unwrap() == (a + b) % &n
    });

    let ope = Ope::new(OpeKey::generate(&mut rng), OpeParams::default()).unwrap();
    let domain = ope.params().domain_size() as u64;
    let ope_ok = (0..10_000).all(|i| {
        // Half the pairs are neighbours, the tightest case.
        let (a, b) = if i % 2 == 0 {
            let a = rng.gen_range(0..domain - 1);
            (a, a + 1)
        } else {
            let a = rng.gen_range(0..domain);
            let b = rng.gen_range(0..domain);
            if a == b {
                return true;
            }
            (a.min(b), a.max(b))
        };
        ope.encrypt(a).unwrap() < ope.encrypt(b).unwrap()
    });
    let dir = tempfile::tempdir().unwrap();
    let ope_deterministic = ope_cross_process_matches(dir.path());

    let ctx = CkksContext::new(CkksParams::default()).unwrap();
    let keys = CkksKeySet::generate(&ctx, &mut rng);
    let slots = ctx.slots();
    let (x, y) = (random_slots(slots, 10.0, &mut rng), random_slots(slots, 10.0, &mut rng));
    // Transactions are encrypted under the Client's secret key; public-key
    // encryption adds noise and is reported alongside.
    let sym = |v: &[f64], rng: &mut ChaCha20Rng| {
        ctx.encrypt_symmetric(&keys.secret, &ctx.encode_default(v).unwrap(), rng).unwrap()
    };
    let public = |v: &[f64], rng: &mut ChaCha20Rng| {
        ctx.encrypt(&keys.public, &ctx.encode_default(v).unwrap(), rng).unwrap()
    };
    let dec = |ct: &CkksCiphertext| ctx.decrypt_values(&keys.secret, ct).unwrap();
    let sum: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
    let prod: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
    let mul_rel_err = |got: &[f64]| {
        got.iter()
            .zip(&prod)
            .map(|(g, w)| (g - w).abs() / w.abs().max(1.0))
            .fold(0.0, f64::max)
    };

    let (cx, cy) = (sym(&x, &mut rng), sym(&y, &mut rng));
    let add_err = max_abs_error(&dec(&ctx.add(&cx, &cy).unwrap()), &sum);
    let product = ctx.rescale(&ctx.mul(&cx, &cy, &keys.eval).unwrap()).unwrap();
    let mul_err = mul_rel_err(&dec(&product));
    let scale_drift = (product.scale - 2f64.powi(30)).abs() / 2f64.powi(30);
    let rescale_ok = product.level == ctx.max_level() - 1 && scale_drift <= 2f64.powi(-20);
    let rot_err = [1usize, 5, 1000]
        .iter()
        .map(|&k| {
            let want: Vec<f64> = (0..slots).map(|i| x[(i + k) % slots]).collect();
            max_abs_error(&dec(&ctx.rotate(&cx, k, &keys.eval).unwrap()), &want)
        })
        .fold(0.0, f64::max);

    let (px, py) = (public(&x, &mut rng), public(&y, &mut rng));
    let pk_add_err = max_abs_error(&dec(&ctx.add(&px, &py).unwrap()), &sum);
    let pk_mul_err = mul_rel_err(&dec(&ctx.rescale(&ctx.mul(&px, &py, &keys.eval).unwrap()).unwrap()));

    let unit = random_slots(slots, 1.0, &mut rng);
    let mut ct = sym(&unit, &mut rng);
    let mut want = unit.clone();
    for _ in 0..3 {
        ct = ctx.rescale(&ctx.mul(&ct, &ct, &keys.eval).unwrap()).unwrap();
        want.iter_mut().for_each(|v| *v *= *v);
    }
    let depth3_err = max_abs_error(&dec(&ct), &want);
    let fourth = ctx.mul(&ct, &ct, &keys.eval);
    let depth_exact = ctx.max_level() == 3 && matches!(fourth, Err(CkksError::Depth(_))) && depth3_err < 1e-2;

    let elapsed = start.elapsed();
    let passed = paillier_ok
        && ope_ok
        && ope_deterministic
        && add_err < 1e-4
        && mul_err < 1e-3
        && rescale_ok
        && rot_err < 1e-4
        && depth_exact
        && elapsed < Duration::from_secs(300);
    report(
        1,
        passed,
        format!(
            "paillier={paillier_ok} ope_monotone={ope_ok} ope_cross_process={ope_deterministic} \
             add_err={add_err:.1e} mul_rel_err={mul_err:.1e} rot_err={rot_err:.1e} scale_drift={scale_drift:.1e} \
             depth3={depth_exact} (err {depth3_err:.1e}) [public-key encryption: add_err={pk_add_err:.1e} \
             mul_rel_err={pk_mul_err:.1e}] runtime={:.0}s",
            elapsed.as_secs_f64()
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_2_similarity_test() {
    let _g = serial();
    let start = Instant::now();
    let d = deep();
    let cfg = SimilarityConfig {
        seed: 2,
        ..SimilarityConfig::default()
    };
    let xgb = gbdt_similarity(&d.trees, &d.encrypted, &d.bundle, &d.data.test, &cfg).unwrap();
    let (ctx, keys) = secure_ckks(&d.network, 2);
    let nn = nn_similarity(&d.network, &ctx, &keys, HeOptions::default(), &d.data.test, &cfg).unwrap();
    let shape_ok = d.network.input_dim() == FEATURES && d.network.hidden_size() == 47;
    let elapsed = start.elapsed();
    let agree = |r: &hefraud::harness::SimilarityReport| r.sample.len() - r.mismatches.len();
    let passed = xgb.passed && nn.passed && shape_ok && elapsed < Duration::from_secs(600);
    report(
        2,
        passed,
        format!(
            "gbdt {}/{} nn(d={}, h={}) {}/{} resampled={} runtime={:.0}s",
            agree(&xgb),
            xgb.sample.len(),
            d.network.input_dim(),
            d.network.hidden_size(),
            agree(&nn),
            nn.sample.len(),
            xgb.resampled || nn.resampled,
            elapsed.as_secs_f64()
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_3_oracle_equivalence() {
    let _g = serial();
    let d = deep();
    let inputs = generate_synthetic(500, 0.5, FEATURES, 33).unwrap();

    // The margin error comes from fixed-point leaf encoding, not the key
    // size, so a smaller key keeps the 500 decryptions quick.
    let bundle = ClientKeyBundle::generate(fit_quantizer(&d.trees), 1024, &mut rng(3)).unwrap();
    let encrypted = encrypt_model(&d.trees, &bundle, LeafMode::PaillierLeaves, 1).unwrap();
    let bound = d.trees.num_trees() as f64 * 2f64.powi(-16);
    let margin_err = inputs
        .iter()
        .map(|r| {
            let ct = encrypt_transaction(&r.features, &bundle).unwrap();
            let score = decrypt_score(&bundle, &infer_encrypted(&encrypted, &ct).unwrap(), encrypted.base_score)
                .unwrap();
            (score.margin - d.trees.predict_margin(&r.features).unwrap()).abs()
        })
        .fold(0.0, f64::max);

    let (ctx, keys) = secure_ckks(&d.network, 3);
    let prepared = PreparedNn::for_fresh_inputs(&ctx, &d.network, HeOptions::default()).unwrap();
    let mut enc_rng = rng(33);
    let logit_err = inputs[..200]
        .iter()
        .map(|r| {
            let x = d.network.input_vector(&r.features).unwrap();
            let ct = encrypt_input(&ctx, &keys.secret, &x, &mut enc_rng).unwrap();
            let out = prepared.evaluate(&ctx, &ct, &keys.eval).unwrap();
            (decrypt_logit(&ctx, &keys.secret, &out).unwrap() - d.network.forward_plain(&x).unwrap()).abs()
        })
        .fold(0.0, f64::max);

    let passed = margin_err <= bound && logit_err <= 1e-2;
    report(
        3,
        passed,
        format!("gbdt max margin error {margin_err:.2e} (bound {bound:.2e}, 500 tx); nn max logit error {logit_err:.2e} (bound 1e-2, 200 inputs)"),
    );
    assert!(passed);
}

fn local() -> SocketAddr {
    "127.0.0.1:0".parse().unwrap()
}

#[test]
fn criterion_4_protocol_conformance() {
    let _g = serial();
    let trees = common::tree_model();

    // Step ordering, then key locality on the same Host.
    let sms = sms();
    let host = host(sms.clone());
    let mut c = client(1);
    let tx = random_tx(&mut rng(4));
    run_protocol_xgb(&mut c, &host, sms.as_ref(), &tx).unwrap();
    run_protocol_xgb(&mut c, &host, sms.as_ref(), &tx).unwrap();
    run_protocol_nn(&mut c, &host, &tx).unwrap();
    let steps: Vec<u8> = c.trace().iter().map(|t| t.step).collect();
    let order_ok = steps == [2, 3, 4, 5, 6, 7, 8, 9, 10, 6, 7, 8, 9, 10, 2, 3, 4, 5, 6];

    let snapshot = host.snapshot();
    let bundle = c.xgb_bundle().unwrap();
    let (ctx, keys) = c.nn_keys().unwrap();
    let secrets = [
        bundle.paillier_secret.lambda().to_bytes_be(),
        bundle.paillier_secret.mu().to_bytes_be(),
        bundle.ope_key.as_bytes().to_vec(),
        bundle.prf_seed.to_vec(),
        ctx.secret_key_to_bytes(&keys.secret),
    ];
    let locality_ok = secrets
        .iter()
        .all(|s| !contains(&snapshot, s) && !contains(&snapshot, encode_b64(s).as_bytes()));

    // One setup, then 100 inferences that never touch the SMS.
    let mut reuse = client(2);
    reuse.setup_xgb(&host, sms.as_ref()).unwrap();
    let after_setup = sms.interactions();
    let mut r = rng(5);
    let reuse_correct = (0..100).all(|_| {
        let tx = random_tx(&mut r);
        run_protocol_xgb(&mut reuse, &host, sms.as_ref(), &tx).unwrap() == trees.predict_label(&tx).unwrap()
    });
    let reuse_ok = reuse_correct && sms.interactions() == after_setup;

    // Eight concurrent Clients over HTTP.
    let shared = common::sms();
    let sms_server = serve_sms(shared.clone(), local()).unwrap();
    let remote_sms: Arc<dyn SmsApi> = Arc::new(HttpSms::new(&sms_server.url()));
    let http_host = hefraud::protocol::Host::new(
        hefraud::protocol::HostConfig {
            xgb_model: Some(trees.clone()),
            ..Default::default()
        },
        Some(remote_sms.clone()),
    )
    .unwrap();
    let host_server = serve_host(Arc::new(http_host), local()).unwrap();
    let url = host_server.url();
    let concurrent_ok = std::thread::scope(|s| {
        let handles: Vec<_> = (0..8u64)
            .map(|i| {
                let (url, remote_sms, trees) = (url.clone(), remote_sms.clone(), &trees);
                s.spawn(move || {
                    let host = HttpHost::new(&url);
                    let mut c = client(100 + i);
                    let mut r = rng(200 + i);
                    (0..25).all(|_| {
                        let tx = random_tx(&mut r);
                        run_protocol_xgb(&mut c, &host, remote_sms.as_ref(), &tx).unwrap()
                            == trees.predict_label(&tx).unwrap()
                    })
                })
            })
            .collect();
        handles.into_iter().all(|h| h.join().unwrap())
    });

    let passed = order_ok && locality_ok && reuse_ok && concurrent_ok;
    report(
        4,
        passed,
        format!(
            "step order={order_ok} key locality={locality_ok} ({} byte host snapshot) setup once + 100 reuse={reuse_ok} \
             8 concurrent clients={concurrent_ok}",
            snapshot.len()
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_5_parallel_encryption() {
    let _g = serial();
    let records = generate_synthetic(10_000, 0.05, FEATURES, 5).unwrap();
    let trees = train(
        &records,
        &TrainConfig {
            max_depth: 7,
            num_estimators: 64,
            seed: 5,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    // Speedup is a property of the work split, so a 1024-bit key keeps each
    // timed run short.
    let bundle = ClientKeyBundle::generate(fit_quantizer(&trees), 1024, &mut rng(5)).unwrap();
    let time = |cores| {
        (0..2)
            .map(|_| {
                let start = Instant::now();
                encrypt_model_seeded(&trees, &bundle, LeafMode::PaillierLeaves, cores, [5; 32]).unwrap();
                start.elapsed()
            })
            .min()
            .unwrap()
    };
    let one = time(1);
    let four = time(4);
    let speedup = one.as_secs_f64() / four.as_secs_f64();
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    let passed = trees.num_trees() == 64 && trees.max_depth() == 7 && speedup >= 2.0;
    report(
        5,
        passed,
        format!(
            "64 trees depth {}: cores=1 {:.2}s, cores=4 {:.2}s, speedup {speedup:.2}x (need 2x; {cpus} CPU available)",
            trees.max_depth(),
            one.as_secs_f64(),
            four.as_secs_f64()
        ),
    );
    assert!(passed, "speedup {speedup:.2} with {cpus} CPU");
}

#[test]
fn criterion_6_performance_sanity() {
    let _g = serial();
    let d = deep();
    let tx: &FeatureMap = &d.data.test[0].features;
    let ct = encrypt_transaction(tx, &d.bundle).unwrap();
    let xgb_ms = (0..20)
        .map(|_| {
            let start = Instant::now();
            infer_encrypted(&d.encrypted, &ct).unwrap();
            start.elapsed()
        })
        .min()
        .unwrap()
        .as_secs_f64()
        * 1e3;
    let plain_bytes = serde_json::to_vec(tx).unwrap().len();
    let enc_bytes = serde_json::to_vec(&InferRequestXgb::new("default", &ct)).unwrap().len();
    let ratio = enc_bytes as f64 / plain_bytes as f64;

    let (ctx, keys) = secure_ckks(&d.network, 6);
    let x = d.network.input_vector(tx).unwrap();
    let nn_ct = encrypt_input(&ctx, &keys.secret, &x, &mut rng(6)).unwrap();
    let nn_bytes = serde_json::to_vec(&InferRequestNn {
        protocol_version: PROTOCOL_VERSION.into(),
        client_id: "c".into(),
        context_descriptor: ctx.params().descriptor(),
        ct_b64: encode_b64(&ctx.ciphertext_to_bytes(&nn_ct)),
    })
    .unwrap()
    .len();
    let prepared = PreparedNn::for_fresh_inputs(&ctx, &d.network, HeOptions::default()).unwrap();
    let nn_ms = (0..3)
        .map(|_| {
            let start = Instant::now();
            prepared.evaluate(&ctx, &nn_ct, &keys.eval).unwrap();
            start.elapsed()
        })
        .min()
        .unwrap()
        .as_secs_f64()
        * 1e3;

    let shape_ok = d.trees.num_trees() == 51 && d.trees.max_depth() == 9;
    let passed = shape_ok && xgb_ms < 100.0 && (2.0..=4.0).contains(&ratio) && nn_bytes > 100_000;
    report(
        6,
        passed,
        format!(
            "gbdt(51 trees, depth {}) encrypted inference {xgb_ms:.2} ms (bar 100, reference 6); \
             gbdt tx {plain_bytes} -> {enc_bytes} B = {ratio:.2}x (band 2-4, reference 1.2->2.4 kB); \
             ckks tx {nn_bytes} B (bar 100 kB, reference 641 kB); nn encrypted inference {nn_ms:.0} ms (reference 296)",
            d.trees.max_depth()
        ),
    );
    assert!(passed);
}

/// Weights uniform in `±1/sqrt(fan_in)`.
fn tiny_model(widths: &[usize], rng: &mut ChaCha20Rng) -> NnModel {
    let layers = widths
        .windows(2)
        .map(|w| {
            let bound = 1.0 / (w[0] as f64).sqrt();
            let mut gen = |k: usize| (0..k).map(|_| rng.gen_range(-bound..bound)).collect::<Vec<f64>>();
            Dense::new(w[1], w[0], gen(w[0] * w[1]), gen(w[1])).unwrap()
        })
        .collect();
    NnModel::from_layers(layers).unwrap()
}

#[test]
fn criterion_7_gradient_check() {
    let _g = serial();
    let mut rng = rng(7);
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for widths in [vec![3, 4, 1], vec![5, 2, 1], vec![4, 3, 3, 1], vec![2, 6, 1]] {
        for _ in 0..5 {
            let model = tiny_model(&widths, &mut rng);
            let inputs: Vec<Vec<f64>> =
                (0..6).map(|_| (0..widths[0]).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
            let labels: Vec<u8> = (0..6).map(|i| (i % 2) as u8).collect();
            let pos_weight = rng.gen_range(1.0..3.0);
            let (_, grad) = loss_and_gradient(&model, &inputs, &labels, pos_weight).unwrap();
            let theta = model.parameters();
            let loss_at = |params: &[f64]| {
                let mut m = model.clone();
                m.set_parameters(params).unwrap();
                loss_and_gradient(&m, &inputs, &labels, pos_weight).unwrap().0
            };
            for i in 0..theta.len() {
                let (mut up, mut down) = (theta.clone(), theta.clone());
                up[i] += h;
                down[i] -= h;
                let numeric = (loss_at(&up) - loss_at(&down)) / (2.0 * h);
                let rel = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(1e-3);
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    let passed = worst <= 1e-4;
    report(7, passed, format!("worst relative error {worst:.2e} over {checked} parameters (bound 1e-4)"));
    assert!(passed);
}

#[test]
fn criterion_8_depth_finding() {
    let _g = serial();
    let d = deep();
    let two_layers = train_nn(
        &d.data.train,
        &NnTrainConfig {
            hidden_layers: 2,
            epochs: 60,
            seed: 8,
            ..NnTrainConfig::default()
        },
    )
    .unwrap();
    let (ctx, keys) = secure_ckks(&two_layers, 8);
    let cfg = SimilarityConfig {
        seed: 8,
        ..SimilarityConfig::default()
    };
    let refused = nn_similarity(&two_layers, &ctx, &keys, HeOptions::default(), &d.data.test, &cfg).is_err();
    let unsafe_opts = HeOptions { unsafe_depth: true };
    let r = nn_similarity(&two_layers, &ctx, &keys, unsafe_opts, &d.data.test, &cfg).unwrap();
    // Observational: printed, never asserted.
    report(
        8,
        !r.mismatches.is_empty(),
        format!(
            "two hidden layers: refused without the unsafe flag={refused}; with it {} of {} labels differ (observational)",
            r.mismatches.len(),
            r.sample.len()
        ),
    );
}

#[test]
fn criterion_9_external_data() {
    let _g = serial();
    let Ok(path) = std::env::var("HEFRAUD_ULB_CSV") else {
        verdict(9, "SKIP", "set HEFRAUD_ULB_CSV to the credit-card CSV to run");
        return;
    };
    let records = load_csv(&path, &LoadOptions::default()).unwrap();
    let data = split(&records).unwrap();
    let trees = train(&data.train, &TrainConfig::default()).unwrap();
    let scores: Vec<f64> = data.test.iter().map(|r| trees.predict_proba(&r.features).unwrap()).collect();
    let labels: Vec<u8> = data.test.iter().map(|r| r.label).collect();
    let m = MetricsReport::compute(&scores, &labels).unwrap();
    let passed = m.auc_roc >= 0.95;
    report(
        9,
        passed,
        format!(
            "test AUC ROC {:.4} (bar 0.95, reference 0.986) AP {:.4}",
            m.auc_roc, m.average_precision
        ),
    );
    assert!(passed);
}
