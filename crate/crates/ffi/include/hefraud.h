#ifndef HEFRAUD_H
#define HEFRAUD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call. `Ok` is zero.
typedef enum HfStatus {
  HF_STATUS_OK = 0,
  HF_STATUS_NULL_POINTER = 1,
  HF_STATUS_INVALID_UTF8 = 2,
  HF_STATUS_INVALID_ARGUMENT = 3,
  HF_STATUS_JSON = 4,
  HF_STATUS_GBDT = 5,
  HF_STATUS_HE_GBDT = 6,
  HF_STATUS_NN = 7,
  HF_STATUS_CKKS = 8,
  HF_STATUS_PANIC = 9,
} HfStatus;

// How leaves of an encrypted tree ensemble are stored.
typedef enum HfLeafMode {
  HF_LEAF_MODE_PAILLIER_LEAVES = 0,
  HF_LEAF_MODE_PLAINTEXT_LEAVES = 1,
} HfLeafMode;

// A client's OPE, PRF and Paillier secrets plus the quantizer they apply.
typedef struct HfClientKeys HfClientKeys;

// A tree ensemble with encrypted thresholds and, optionally, encrypted leaves.
typedef struct HfEncryptedModel HfEncryptedModel;

// A plaintext square-activation network.
typedef struct HfNnModel HfNnModel;

// A ring context, a key set and a network prepared for encrypted inputs.
typedef struct HfNnSession HfNnSession;

// A plaintext boosted-tree ensemble.
typedef struct HfTreeModel HfTreeModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failing call on this thread, or null if none. The
// pointer stays valid until the next failing call on this thread.
const char *hf_last_error(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` is null or was returned by this library and not freed since.
void hf_string_free(char *s);

// Parses a boosted-tree model in its JSON dump format.
//
// # Safety
// `json` is a C string; `out` is writable.
enum HfStatus hf_tree_model_load(const char *json, struct HfTreeModel **out);

// Fraud probability of one transaction given as `len` named features.
//
// # Safety
// `model` is live; `names` and `values` hold `len` entries; `out_proba` is writable.
enum HfStatus hf_tree_model_predict(const struct HfTreeModel *model,
                                    const char *const *names,
                                    const double *values,
                                    size_t len,
                                    double *out_proba);

// # Safety
// `model` is null or a live handle.
void hf_tree_model_free(struct HfTreeModel *model);

// Generates client keys whose quantizer covers the thresholds of `model`.
// A null `seed` draws randomness from the operating system; otherwise the
// 32 bytes make generation deterministic.
//
// # Safety
// `model` is live; `seed` is null or 32 readable bytes; `out` is writable.
enum HfStatus hf_client_keys_generate(const struct HfTreeModel *model,
                                      uint64_t paillier_bits,
                                      const uint8_t *seed,
                                      struct HfClientKeys **out);

// # Safety
// `json` is a C string; `out` is writable.
enum HfStatus hf_client_keys_from_json(const char *json, struct HfClientKeys **out);

// Serializes the keys, secrets included.
//
// # Safety
// `keys` is live; `out` is writable.
enum HfStatus hf_client_keys_to_json(const struct HfClientKeys *keys, char **out);

// # Safety
// `keys` is null or a live handle.
void hf_client_keys_free(struct HfClientKeys *keys);

// Encrypts `model` over `cores` threads. A non-null `seed` (32 bytes) makes
// the output deterministic and independent of `cores`.
//
// # Safety
// `model` and `keys` are live; `seed` is null or 32 readable bytes; `out` is writable.
enum HfStatus hf_encrypt_model(const struct HfTreeModel *model,
                               const struct HfClientKeys *keys,
                               enum HfLeafMode mode,
                               size_t cores,
                               const uint8_t *seed,
                               struct HfEncryptedModel **out);

// # Safety
// `json` is a C string; `out` is writable.
enum HfStatus hf_encrypted_model_from_json(const char *json, struct HfEncryptedModel **out);

// # Safety
// `model` is live; `out` is writable.
enum HfStatus hf_encrypted_model_to_json(const struct HfEncryptedModel *model, char **out);

// Base score the client adds to a decrypted Paillier margin.
//
// # Safety
// `model` is live; `out` is writable.
enum HfStatus hf_encrypted_model_base_score(const struct HfEncryptedModel *model, double *out);

// # Safety
// `model` is null or a live handle.
void hf_encrypted_model_free(struct HfEncryptedModel *model);

// Client step: OPE-encrypts a transaction into its JSON wire form.
//
// # Safety
// `keys` is live; `names` and `values` hold `len` entries; `out_json` is writable.
enum HfStatus hf_encrypt_transaction(const struct HfClientKeys *keys,
                                     const char *const *names,
                                     const double *values,
                                     size_t len,
                                     char **out_json);

// Host step: evaluates the encrypted model on an encrypted transaction and
// returns the encrypted score as JSON. Needs no client secrets.
//
// # Safety
// `model` is live; `tx_json` is a C string; `out_json` is writable.
enum HfStatus hf_infer_encrypted(const struct HfEncryptedModel *model,
                                 const char *tx_json,
                                 char **out_json);

// Client step: decrypts a score produced by [`hf_infer_encrypted`].
//
// # Safety
// `keys` is live; `score_json` is a C string; `out_proba` is writable.
enum HfStatus hf_decrypt_score(const struct HfClientKeys *keys,
                               const char *score_json,
                               double base_score,
                               double *out_proba);

// Parses a network in its JSON format.
//
// # Safety
// `json` is a C string; `out` is writable.
enum HfStatus hf_nn_model_load(const char *json, struct HfNnModel **out);

// Number of inputs the network expects.
//
// # Safety
// `model` is live; `out` is writable.
enum HfStatus hf_nn_model_input_dim(const struct HfNnModel *model, size_t *out);

// Plaintext fraud probability of an input vector of length `len`.
//
// # Safety
// `model` is live; `x` holds `len` values; `out_proba` is writable.
enum HfStatus hf_nn_model_predict(const struct HfNnModel *model,
                                  const double *x,
                                  size_t len,
                                  double *out_proba);

// # Safety
// `model` is null or a live handle.
void hf_nn_model_free(struct HfNnModel *model);

// Builds a ring of degree `ring_degree` on the default modulus chain,
// generates keys with the rotations `model` needs and prepares the model.
// Rings below the 128-bit security level are refused unless
// `allow_insecure` is set. A null `seed` draws from the operating system.
//
// # Safety
// `model` is live; `seed` is null or 32 readable bytes; `out` is writable.
enum HfStatus hf_nn_session_new(const struct HfNnModel *model,
                                size_t ring_degree,
                                bool allow_insecure,
                                const uint8_t *seed,
                                struct HfNnSession **out);

// Encrypts `x`, evaluates the network on the ciphertext, decrypts the logit
// and returns its sigmoid.
//
// # Safety
// `session` is live and not used concurrently; `x` holds `len` values;
// `out_proba` is writable.
enum HfStatus hf_nn_session_predict(struct HfNnSession *session,
                                    const double *x,
                                    size_t len,
                                    double *out_proba);

// # Safety
// `session` is null or a live handle.
void hf_nn_session_free(struct HfNnSession *session);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HEFRAUD_H */
