//! C ABI over the `hefraud` toolkit.
//!
//! Every object crosses the boundary as an opaque handle owned by the caller
//! and released with its `_free` function. Every fallible call returns an
//! [`HfStatus`]; on failure the message is available from [`hf_last_error`]
//! on the same thread until the next failing call. Strings returned through
//! out-parameters are NUL-terminated UTF-8 and released with
//! [`hf_string_free`]. Panics never unwind across the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde_json::Value;

use hefraud::ckks::{CkksContext, CkksError, CkksKeySet, CkksParams};
use hefraud::gbdt::{load_model, sigmoid, FeatureMap, GbdtError, TreeEnsemble};
use hefraud::he_gbdt::{
    decrypt_score, encrypt_model, encrypt_model_seeded, encrypt_transaction, fit_quantizer,
    infer_encrypted, ClientKeyBundle, EncryptedEnsemble, EncryptedScore, EncryptedTransactionOpe,
    HeGbdtError, LeafMode,
};
use hefraud::nn::{
    decrypt_logit, encrypt_input, rotation_steps, HeOptions, NnError, NnModel, PreparedNn,
};

/// Result of every fallible call. `Ok` is zero.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Json = 4,
    Gbdt = 5,
    HeGbdt = 6,
    Nn = 7,
    Ckks = 8,
    Panic = 9,
}

/// How leaves of an encrypted tree ensemble are stored.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HfLeafMode {
    PaillierLeaves = 0,
    PlaintextLeaves = 1,
}

impl From<HfLeafMode> for LeafMode {
    fn from(m: HfLeafMode) -> Self {
        match m {
            HfLeafMode::PaillierLeaves => LeafMode::PaillierLeaves,
            HfLeafMode::PlaintextLeaves => LeafMode::PlaintextLeaves,
        }
    }
}

/// A plaintext boosted-tree ensemble.
pub struct HfTreeModel(TreeEnsemble);

/// A client's OPE, PRF and Paillier secrets plus the quantizer they apply.
pub struct HfClientKeys(ClientKeyBundle);

/// A tree ensemble with encrypted thresholds and, optionally, encrypted leaves.
pub struct HfEncryptedModel(EncryptedEnsemble);

/// A plaintext square-activation network.
pub struct HfNnModel(NnModel);

/// A ring context, a key set and a network prepared for encrypted inputs.
pub struct HfNnSession {
    ctx: CkksContext,
    keys: CkksKeySet,
    prepared: PreparedNn,
    input_dim: usize,
    rng: ChaCha20Rng,
}

struct Failure {
    status: HfStatus,
    message: String,
}

impl Failure {
    fn new(status: HfStatus, message: impl Into<String>) -> Self {
        Failure {
            status,
            message: message.into(),
        }
    }
}

macro_rules! failure_from {
    ($($ty:ty => $status:ident),* $(,)?) => {$(
        impl From<$ty> for Failure {
            fn from(e: $ty) -> Self {
                Failure::new(HfStatus::$status, e.to_string())
            }
        }
    )*};
}

failure_from! {
    serde_json::Error => Json,
    GbdtError => Gbdt,
    HeGbdtError => HeGbdt,
    NnError => Nn,
    CkksError => Ckks,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: &str) {
    // interior NULs would truncate the message; replace them
    let c = CString::new(message.replace('\0', " ")).expect("NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Runs `f`, translating errors and panics into a status and a last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> HfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HfStatus::Ok,
        Ok(Err(fail)) => {
            set_last_error(&fail.message);
            fail.status
        }
        Err(panic) => {
            let message = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(&format!("internal panic: {message}"));
            HfStatus::Panic
        }
    }
}

fn null(name: &str) -> Failure {
    Failure::new(HfStatus::NullPointer, format!("{name} is null"))
}

/// # Safety
/// `p` is null or points to a live `T`.
unsafe fn borrow<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(name))
}

/// # Safety
/// `p` is null or points to a live `T` not aliased elsewhere.
unsafe fn borrow_mut<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(name))
}

/// # Safety
/// `p` is null or a NUL-terminated string.
unsafe fn read_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(HfStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

/// # Safety
/// `p` is null only when `len` is zero, else points to `len` readable items.
unsafe fn read_slice<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// # Safety
/// `out` is null or writable.
unsafe fn write_out<T>(out: *mut T, value: T, name: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(name));
    }
    out.write(value);
    Ok(())
}

/// # Safety
/// `out` is null or writable.
unsafe fn write_handle<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    write_out(out, Box::into_raw(Box::new(value)), "out")
}

/// # Safety
/// `out` is null or writable.
unsafe fn write_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|_| Failure::new(HfStatus::Json, "string contains NUL"))?;
    write_out(out, c.into_raw(), "out")
}

/// # Safety
/// `p` is null or was returned by `Box::into_raw` and not freed since.
unsafe fn free_handle<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// # Safety
/// `names` and `values` each hold `len` entries; every name is a C string.
unsafe fn read_features(
    names: *const *const c_char,
    values: *const f64,
    len: usize,
) -> Result<FeatureMap, Failure> {
    let names = read_slice(names, len, "names")?;
    let values = read_slice(values, len, "values")?;
    let mut tx = FeatureMap::with_capacity(len);
    for (&name, &v) in names.iter().zip(values) {
        tx.insert(read_str(name, "feature name")?.to_string(), v);
    }
    Ok(tx)
}

/// # Safety
/// `seed` is null or points to 32 readable bytes.
unsafe fn seed_or_entropy(seed: *const u8) -> [u8; 32] {
    let mut out = [0u8; 32];
    if seed.is_null() {
        rand::rngs::OsRng.fill_bytes(&mut out);
    } else {
        out.copy_from_slice(std::slice::from_raw_parts(seed, 32));
    }
    out
}

fn parse_json(text: &str) -> Result<Value, Failure> {
    Ok(serde_json::from_str(text)?)
}

/// Message of the last failing call on this thread, or null if none. The
/// pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn hf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` is null or was returned by this library and not freed since.
#[no_mangle]
pub unsafe extern "C" fn hf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// ---- tree ensembles ----

/// Parses a boosted-tree model in its JSON dump format.
///
/// # Safety
/// `json` is a C string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn hf_tree_model_load(
    json: *const c_char,
    out: *mut *mut HfTreeModel,
) -> HfStatus {
    guard(|| {
        let model = load_model(read_str(json, "json")?.as_bytes())?;
        write_handle(out, HfTreeModel(model))
    })
}

/// Fraud probability of one transaction given as `len` named features.
///
/// # Safety
/// `model` is live; `names` and `values` hold `len` entries; `out_proba` is writable.
#[no_mangle]
pub unsafe extern "C" fn hf_tree_model_predict(
    model: *const HfTreeModel,
    names: *const *const c_char,
    values: *const f64,
    len: usize,
    out_proba: *mut f64,
) -> HfStatus {
    guard(|| {
        let model = borrow(model, "model")?;
        let tx = read_features(names, values, len)?;
        write_out(out_proba, model.0.predict_proba(&tx)?, "out_proba")
    })
}

/// # Safety
/// `model` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hf_tree_model_free(model: *mut HfTreeModel) {
    free_handle(model)
}

// ---- client keys ----

/// Generates client keys whose quantizer covers the thresholds of `model`.
/// A null `seed` draws randomness from the operating system; otherwise the
/// 32 bytes make generation deterministic.
///
/// # Safety
/// `model` is live; `seed` is null or 32 readable bytes; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn hf_client_keys_generate(
    model: *const HfTreeModel,
    paillier_bits: u64,
    seed: *const u8,
    out: *mut *mut HfClientKeys,
) -> HfStatus {
    guard(|| {
        let model = borrow(model, "model")?;
        let mut rng = ChaCha20Rng::from_seed(seed_or_entropy(seed));
        let bundle = ClientKeyBundle::generate(fit_quantizer(&model.0), paillier_bits, &mut rng)?;
        write_handle(out, HfClientKeys(bundle))
    })
}

/// # Safety
/// `json` is a C string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn hf_client_keys_from_json(
    json: *const c_char,
    out: *mut *mut HfClientKeys,
) -> HfStatus {
    guard(|| {
        let bundle = ClientKeyBundle::from_json(&parse_json(read_str(json, "json")?)?)?;
        write_handle(out, HfClientKeys(bundle))
    })
}

/// Serializes the keys, secrets included.
///
/// # Safety
/// `keys` is live; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn hf_client_keys_to_json(
    keys: *const HfClientKeys,
    out: *mut *mut c_char,
) -> HfStatus {
    guard(|| write_string(out, borrow(keys, "keys")?.0.to_json().to_string()))
}

/// # Safety
/// `keys` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hf_client_keys_free(keys: *mut HfClientKeys) {
    free_handle(keys)
}

// ---- encrypted tree ensembles ----

/// Encrypts `model` over `cores` threads. A non-null `seed` (32 bytes) makes
/// the output deterministic and independent of `cores`.
///
/// # Safety
/// `model` and `keys` are live; `seed` is null or 32 readable bytes; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn hf_encrypt_model(
    model: *const HfTreeModel,
    keys: *const HfClientKeys,
    mode: HfLeafMode,
    cores: usize,
    seed: *const u8,
    out: *mut *mut HfEncryptedModel,
) -> HfStatus {
    guard(|| {
        let model = &borrow(model, "model")?.0;
        let bundle = &borrow(keys, "keys")?.0;
        let encrypted = if seed.is_null() {
            encrypt_model(model, bundle, mode.into(), cores)?
        } else {
            encrypt_model_seeded(model, bundle, mode.into(), cores, seed_or_entropy(seed))?
        };
        write_handle(out, HfEncryptedModel(encrypted))
    })
}

/// # Safety
/// `json` is a C string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn hf_encrypted_model_from_json(
    json: *const c_char,
    out: *mut *mut HfEncryptedModel,
) -> HfStatus {
    guard(|| {
        let model = EncryptedEnsemble::from_json(&parse_json(read_str(json, "json")?)?)?;
        write_handle(out, HfEncryptedModel(model))
    })
}

/// # Safety
/// `model` is live; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn hf_encrypted_model_to_json(
    model: *const HfEncryptedModel,
    out: *mut *mut c_char,
) -> HfStatus {
    guard(|| write_string(out, borrow(model, "model")?.0.to_json().to_string()))
}

/// Base score the client adds to a decrypted Paillier margin.
///
/// # Safety
/// `model` is live; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn hf_encrypted_model_base_score(
    model: *const HfEncryptedModel,
    out: *mut f64,
) -> HfStatus {
    guard(|| write_out(out, borrow(model, "model")?.0.base_score, "out"))
}

/// # Safety
/// `model` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hf_encrypted_model_free(model: *mut HfEncryptedModel) {
    free_handle(model)
}

/// Client step: OPE-encrypts a transaction into its JSON wire form.
///
/// # Safety
/// `keys` is live; `names` and `values` hold `len` entries; `out_json` is writable.
#[no_mangle]
pub unsafe extern "C" fn hf_encrypt_transaction(
    keys: *const HfClientKeys,
    names: *const *const c_char,
    values: *const f64,
    len: usize,
    out_json: *mut *mut c_char,
) -> HfStatus {
    guard(|| {
        let bundle = &borrow(keys, "keys")?.0;
        let tx = encrypt_transaction(&read_features(names, values, len)?, bundle)?;
        write_string(out_json, tx.to_json().to_string())
    })
}

/// Host step: evaluates the encrypted model on an encrypted transaction and
/// returns the encrypted score as JSON. Needs no client secrets.
///
/// # Safety
/// `model` is live; `tx_json` is a C string; `out_json` is writable.
#[no_mangle]
pub unsafe extern "C" fn hf_infer_encrypted(
    model: *const HfEncryptedModel,
    tx_json: *const c_char,
    out_json: *mut *mut c_char,
) -> HfStatus {
    guard(|| {
        let model = &borrow(model, "model")?.0;
        let tx = EncryptedTransactionOpe::from_json(&parse_json(read_str(tx_json, "tx_json")?)?)?;
        write_string(out_json, infer_encrypted(model, &tx)?.to_json().to_string())
    })
}

/// Client step: decrypts a score produced by [`hf_infer_encrypted`].
///
/// # Safety
/// `keys` is live; `score_json` is a C string; `out_proba` is writable.
#[no_mangle]
pub unsafe extern "C" fn hf_decrypt_score(
    keys: *const HfClientKeys,
    score_json: *const c_char,
    base_score: f64,
    out_proba: *mut f64,
) -> HfStatus {
    guard(|| {
        let bundle = &borrow(keys, "keys")?.0;
        let value = parse_json(read_str(score_json, "score_json")?)?;
        let score = EncryptedScore::from_json(&value, Some(bundle.paillier_public()))?;
        write_out(out_proba, decrypt_score(bundle, &score, base_score)?.proba, "out_proba")
    })
}

// ---- networks ----

/// Parses a network in its JSON format.
///
/// # Safety
/// `json` is a C string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn hf_nn_model_load(
    json: *const c_char,
    out: *mut *mut HfNnModel,
) -> HfStatus {
    guard(|| {
        let model = NnModel::from_json(&parse_json(read_str(json, "json")?)?)?;
        write_handle(out, HfNnModel(model))
    })
}

/// Number of inputs the network expects.
///
/// # Safety
/// `model` is live; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn hf_nn_model_input_dim(
    model: *const HfNnModel,
    out: *mut usize,
) -> HfStatus {
    guard(|| write_out(out, borrow(model, "model")?.0.input_dim(), "out"))
}

/// Plaintext fraud probability of an input vector of length `len`.
///
/// # Safety
/// `model` is live; `x` holds `len` values; `out_proba` is writable.
#[no_mangle]
pub unsafe extern "C" fn hf_nn_model_predict(
    model: *const HfNnModel,
    x: *const f64,
    len: usize,
    out_proba: *mut f64,
) -> HfStatus {
    guard(|| {
        let model = &borrow(model, "model")?.0;
        write_out(out_proba, model.predict_proba(read_slice(x, len, "x")?)?, "out_proba")
    })
}

/// # Safety
/// `model` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hf_nn_model_free(model: *mut HfNnModel) {
    free_handle(model)
}

/// Builds a ring of degree `ring_degree` on the default modulus chain,
/// generates keys with the rotations `model` needs and prepares the model.
/// Rings below the 128-bit security level are refused unless
/// `allow_insecure` is set. A null `seed` draws from the operating system.
///
/// # Safety
/// `model` is live; `seed` is null or 32 readable bytes; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn hf_nn_session_new(
    model: *const HfNnModel,
    ring_degree: usize,
    allow_insecure: bool,
    seed: *const u8,
    out: *mut *mut HfNnSession,
) -> HfStatus {
    guard(|| {
        let model = &borrow(model, "model")?.0;
        let params = CkksParams {
            n: ring_degree,
            ..CkksParams::default()
        };
        let ctx = if allow_insecure {
            CkksContext::new_insecure(params)?
        } else {
            CkksContext::new(params)?
        };
        let mut rng = ChaCha20Rng::from_seed(seed_or_entropy(seed));
        let keys = CkksKeySet::generate_with_steps(&ctx, &rotation_steps(&ctx, model), &mut rng);
        let prepared = PreparedNn::for_fresh_inputs(&ctx, model, HeOptions::default())?;
        write_handle(
            out,
            HfNnSession {
                ctx,
                keys,
                prepared,
                input_dim: model.input_dim(),
                rng,
            },
        )
    })
}

/// Encrypts `x`, evaluates the network on the ciphertext, decrypts the logit
/// and returns its sigmoid.
///
/// # Safety
/// `session` is live and not used concurrently; `x` holds `len` values;
/// `out_proba` is writable.
#[no_mangle]
pub unsafe extern "C" fn hf_nn_session_predict(
    session: *mut HfNnSession,
    x: *const f64,
    len: usize,
    out_proba: *mut f64,
) -> HfStatus {
    guard(|| {
        let s = borrow_mut(session, "session")?;
        let x = read_slice(x, len, "x")?;
        if x.len() != s.input_dim {
            return Err(Failure::new(
                HfStatus::InvalidArgument,
                format!("input has {} values, the network expects {}", x.len(), s.input_dim),
            ));
        }
        let ct = encrypt_input(&s.ctx, &s.keys.secret, x, &mut s.rng)?;
        let out = s.prepared.evaluate(&s.ctx, &ct, &s.keys.eval)?;
        let logit = decrypt_logit(&s.ctx, &s.keys.secret, &out)?;
        write_out(out_proba, sigmoid(logit), "out_proba")
    })
}

/// # Safety
/// `session` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hf_nn_session_free(session: *mut HfNnSession) {
    free_handle(session)
}
