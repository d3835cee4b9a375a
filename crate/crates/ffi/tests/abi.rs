//! Drives the exported functions the way a C caller would.

use std::ffi::{c_char, CStr, CString};
use std::ptr;
use std::sync::OnceLock;

use hefraud::data::{generate_synthetic, TransactionRecord};
use hefraud::gbdt::{save_model, train, TrainConfig};
use hefraud::nn::{train_nn, NnTrainConfig};
use hefraud_ffi::*;

fn records() -> &'static Vec<TransactionRecord> {
    static R: OnceLock<Vec<TransactionRecord>> = OnceLock::new();
    R.get_or_init(|| generate_synthetic(600, 0.2, 6, 3).unwrap())
}

fn tree_json() -> CString {
    let cfg = TrainConfig {
        max_depth: 3,
        num_estimators: 8,
        ..TrainConfig::default()
    };
    CString::new(save_model(&train(records(), &cfg).unwrap())).unwrap()
}

fn nn_json() -> CString {
    let cfg = NnTrainConfig {
        hidden_layer_size: 6,
        epochs: 30,
        ..NnTrainConfig::default()
    };
    CString::new(train_nn(records(), &cfg).unwrap().to_json().to_string()).unwrap()
}

fn last_error() -> String {
    let p = hf_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[track_caller]
fn ok(status: HfStatus) {
    assert_eq!(status, HfStatus::Ok, "{}", last_error());
}

/// Owned copy of a library string, released through the library.
fn take_string(p: *mut c_char) -> CString {
    let owned = unsafe { CStr::from_ptr(p) }.to_owned();
    unsafe { hf_string_free(p) };
    owned
}

struct Tx {
    names: Vec<CString>,
    name_ptrs: Vec<*const c_char>,
    values: Vec<f64>,
}

fn tx(record: &TransactionRecord) -> Tx {
    let names: Vec<CString> = record
        .features
        .keys()
        .map(|k| CString::new(k.as_str()).unwrap())
        .collect();
    let name_ptrs = names.iter().map(|n| n.as_ptr()).collect();
    Tx {
        names,
        name_ptrs,
        values: record.features.values().copied().collect(),
    }
}

fn load_tree() -> *mut HfTreeModel {
    let mut model = ptr::null_mut();
    ok(unsafe { hf_tree_model_load(tree_json().as_ptr(), &mut model) });
    model
}

#[test]
fn encrypted_tree_scoring_matches_plaintext() {
    let model = load_tree();
    let seed = [5u8; 32];
    let mut keys = ptr::null_mut();
    ok(unsafe { hf_client_keys_generate(model, 512, seed.as_ptr(), &mut keys) });
    let mut enc = ptr::null_mut();
    ok(unsafe {
        hf_encrypt_model(model, keys, HfLeafMode::PaillierLeaves, 2, seed.as_ptr(), &mut enc)
    });
    let mut base = 0.0;
    ok(unsafe { hf_encrypted_model_base_score(enc, &mut base) });

    for record in records().iter().take(20) {
        let t = tx(record);
        assert_eq!(t.names.len(), t.values.len());
        let mut plain = 0.0;
        ok(unsafe {
            hf_tree_model_predict(model, t.name_ptrs.as_ptr(), t.values.as_ptr(), t.values.len(), &mut plain)
        });
        let mut tx_json = ptr::null_mut();
        ok(unsafe {
            hf_encrypt_transaction(keys, t.name_ptrs.as_ptr(), t.values.as_ptr(), t.values.len(), &mut tx_json)
        });
        let tx_json = take_string(tx_json);
        let mut score_json = ptr::null_mut();
        ok(unsafe { hf_infer_encrypted(enc, tx_json.as_ptr(), &mut score_json) });
        let score_json = take_string(score_json);
        let mut proba = 0.0;
        ok(unsafe { hf_decrypt_score(keys, score_json.as_ptr(), base, &mut proba) });
        // each of the 8 leaves is rounded to 16 fractional bits
        assert!((proba - plain).abs() <= 8.0 * 2f64.powi(-17), "{proba} vs {plain}");
    }
    unsafe {
        hf_encrypted_model_free(enc);
        hf_client_keys_free(keys);
        hf_tree_model_free(model);
    }
}

#[test]
fn handles_survive_a_json_round_trip() {
    let model = load_tree();
    let seed = [9u8; 32];
    let mut keys = ptr::null_mut();
    ok(unsafe { hf_client_keys_generate(model, 512, seed.as_ptr(), &mut keys) });
    let mut enc = ptr::null_mut();
    ok(unsafe {
        hf_encrypt_model(model, keys, HfLeafMode::PlaintextLeaves, 1, seed.as_ptr(), &mut enc)
    });

    let mut s = ptr::null_mut();
    ok(unsafe { hf_client_keys_to_json(keys, &mut s) });
    let keys_json = take_string(s);
    ok(unsafe { hf_encrypted_model_to_json(enc, &mut s) });
    let enc_json = take_string(s);

    let mut keys2 = ptr::null_mut();
    ok(unsafe { hf_client_keys_from_json(keys_json.as_ptr(), &mut keys2) });
    let mut enc2 = ptr::null_mut();
    ok(unsafe { hf_encrypted_model_from_json(enc_json.as_ptr(), &mut enc2) });
    ok(unsafe { hf_encrypted_model_to_json(enc2, &mut s) });
    assert_eq!(take_string(s), enc_json);

    // a reloaded key set reads scores from the reloaded model
    let t = tx(&records()[0]);
    let mut tx_json = ptr::null_mut();
    ok(unsafe {
        hf_encrypt_transaction(keys2, t.name_ptrs.as_ptr(), t.values.as_ptr(), t.values.len(), &mut tx_json)
    });
    let tx_json = take_string(tx_json);
    let mut score_json = ptr::null_mut();
    ok(unsafe { hf_infer_encrypted(enc2, tx_json.as_ptr(), &mut score_json) });
    let score_json = take_string(score_json);
    let (mut proba, mut plain) = (0.0, 0.0);
    ok(unsafe { hf_decrypt_score(keys2, score_json.as_ptr(), 0.0, &mut proba) });
    ok(unsafe {
        hf_tree_model_predict(model, t.name_ptrs.as_ptr(), t.values.as_ptr(), t.values.len(), &mut plain)
    });
    assert!((proba - plain).abs() < 1e-12);

    unsafe {
        hf_encrypted_model_free(enc2);
        hf_client_keys_free(keys2);
        hf_encrypted_model_free(enc);
        hf_client_keys_free(keys);
        hf_tree_model_free(model);
    }
}

#[test]
fn encrypted_network_tracks_plaintext() {
    let mut model = ptr::null_mut();
    ok(unsafe { hf_nn_model_load(nn_json().as_ptr(), &mut model) });
    let mut dim = 0;
    ok(unsafe { hf_nn_model_input_dim(model, &mut dim) });
    assert_eq!(dim, 6);

    let seed = [1u8; 32];
    let mut session = ptr::null_mut();
    ok(unsafe { hf_nn_session_new(model, 2048, true, seed.as_ptr(), &mut session) });
    for record in records().iter().take(5) {
        let x: Vec<f64> = record.features.values().copied().collect();
        let (mut plain, mut he) = (0.0, 0.0);
        ok(unsafe { hf_nn_model_predict(model, x.as_ptr(), x.len(), &mut plain) });
        ok(unsafe { hf_nn_session_predict(session, x.as_ptr(), x.len(), &mut he) });
        assert!((plain - he).abs() < 1e-3, "{plain} vs {he}");
    }

    let short = [0.0f64; 3];
    let mut p = 0.0;
    let status = unsafe { hf_nn_session_predict(session, short.as_ptr(), short.len(), &mut p) };
    assert_eq!(status, HfStatus::InvalidArgument);
    assert!(last_error().contains("expects 6"));

    unsafe {
        hf_nn_session_free(session);
        hf_nn_model_free(model);
    }
}

#[test]
fn insecure_ring_needs_the_flag() {
    let mut model = ptr::null_mut();
    ok(unsafe { hf_nn_model_load(nn_json().as_ptr(), &mut model) });
    let mut session = ptr::null_mut();
    let status = unsafe { hf_nn_session_new(model, 2048, false, ptr::null(), &mut session) };
    assert_eq!(status, HfStatus::Ckks);
    assert!(session.is_null());
    unsafe { hf_nn_model_free(model) };
}

#[test]
fn errors_carry_a_status_and_a_message() {
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { hf_tree_model_load(ptr::null(), &mut model) }, HfStatus::NullPointer);
    assert!(last_error().contains("json"));

    let bad = CString::new("{not json").unwrap();
    assert_eq!(unsafe { hf_tree_model_load(bad.as_ptr(), &mut model) }, HfStatus::Gbdt);
    assert_eq!(unsafe { hf_nn_model_load(bad.as_ptr(), ptr::null_mut()) }, HfStatus::Json);
    assert!(model.is_null());

    let invalid = [0xffu8, 0];
    let status = unsafe { hf_tree_model_load(invalid.as_ptr().cast(), &mut model) };
    assert_eq!(status, HfStatus::InvalidUtf8);

    let tree = load_tree();
    let mut out = ptr::null_mut();
    let status = unsafe { hf_client_keys_generate(tree, 512, ptr::null(), ptr::null_mut()) };
    assert_eq!(status, HfStatus::NullPointer);
    assert_eq!(unsafe { hf_encrypt_model(tree, ptr::null(), HfLeafMode::PaillierLeaves, 1, ptr::null(), &mut out) }, HfStatus::NullPointer);
    assert!(last_error().contains("keys"));
    unsafe { hf_tree_model_free(tree) };
}

#[test]
fn freeing_null_is_a_no_op() {
    unsafe {
        hf_string_free(ptr::null_mut());
        hf_tree_model_free(ptr::null_mut());
        hf_client_keys_free(ptr::null_mut());
        hf_encrypted_model_free(ptr::null_mut());
        hf_nn_model_free(ptr::null_mut());
        hf_nn_session_free(ptr::null_mut());
    }
}

#[test]
fn last_error_is_per_thread() {
    let bad = CString::new("[]").unwrap();
    let mut model = ptr::null_mut();
    assert_ne!(unsafe { hf_nn_model_load(bad.as_ptr(), &mut model) }, HfStatus::Ok);
    std::thread::spawn(|| assert!(hf_last_error().is_null()))
        .join()
        .unwrap();
    assert!(!hf_last_error().is_null());
}
