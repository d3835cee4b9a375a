//! Approximate leveled homomorphic encryption over `Z[X]/(X^N + 1)`.
//!
//! Polynomials are held in residue-number-system form, one row per chain
//! prime, in NTT representation. A ciphertext at level `l` lives modulo
//! `q_0 * ... * q_l`; rescaling divides by `q_l` and drops a level. The last
//! configured modulus is a special prime used only inside key switching.

mod context;
mod encoding;
mod eval;
mod keys;
pub(crate) mod modarith;
mod ntt;
mod serial;

use thiserror::Error;

pub use context::{CkksContext, CkksParams, ContextId, SECURITY_CAP_128};
pub use eval::{CkksCiphertext, Plaintext, SCALE_TOLERANCE};
pub use keys::{
    default_rotation_steps, CkksKeySet, EvaluationKeys, PublicKey, SecretKey, ERROR_STDDEV,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CkksError {
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("security error: {0}")]
    Security(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("context error: {0}")]
    Context(String),
    #[error("depth error: {0}")]
    Depth(String),
    #[error("level error: {0}")]
    Level(String),
    #[error("scale error: {0}")]
    Scale(String),
    #[error("key error: {0}")]
    Key(String),
    #[error("encoding error: {0}")]
    Encoding(String),
}

#[cfg(test)]
pub(crate) mod test_support {
    use std::sync::OnceLock;

    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    use super::*;

    /// A 2048-degree ring with the default chain shape. Too small for the
    /// security gate; used to keep unit tests fast.
    pub fn small() -> &'static (CkksContext, CkksKeySet) {
        static S: OnceLock<(CkksContext, CkksKeySet)> = OnceLock::new();
        S.get_or_init(|| {
            let ctx = CkksContext::new_insecure(CkksParams {
                n: 2048,
                ..CkksParams::default()
            })
            .unwrap();
            let keys = CkksKeySet::generate(&ctx, &mut ChaCha20Rng::seed_from_u64(5));
            (ctx, keys)
        })
    }

    pub fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::test_support::{rng, small};
    use super::*;

    fn random_vec(n: usize, bound: f64, seed: u64) -> Vec<f64> {
        let mut r = rng(seed);
        (0..n).map(|_| r.gen_range(-bound..bound)).collect()
    }

    fn max_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    fn enc(values: &[f64], seed: u64) -> CkksCiphertext {
        let (ctx, keys) = small();
        ctx.encrypt(
            &keys.public,
            &ctx.encode_default(values).unwrap(),
            &mut rng(seed),
        )
        .unwrap()
    }

    #[test]
    fn encrypt_decrypt_round_trip() {
        let (ctx, keys) = small();
        let a = enc(&[0.5], 1);
        let b = enc(&[0.5], 2);
        assert_ne!(a.polys, b.polys);
        for ct in [a, b] {
            let out = ctx.decrypt_values(&keys.secret, &ct).unwrap();
            assert!((out[0] - 0.5).abs() < 1e-4);
        }
    }

    #[test]
    fn wrong_key_gives_garbage() {
        let (ctx, _) = small();
        let other = SecretKey::generate(ctx, &mut rng(99));
        let v = random_vec(16, 1.0, 3);
        let out = ctx.decrypt_values(&other, &enc(&v, 4)).unwrap();
        assert!(max_err(&out[..16], &v) > 1.0);
    }

    #[test]
    fn add_and_mul_slotwise() {
        let (ctx, keys) = small();
        let a = random_vec(ctx.slots(), 10.0, 10);
        let b = random_vec(ctx.slots(), 10.0, 11);
        let (ca, cb) = (enc(&a, 12), enc(&b, 13));
        let sum = ctx
            .decrypt_values(&keys.secret, &ctx.add(&ca, &cb).unwrap())
            .unwrap();
        let expect: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        assert!(max_err(&sum, &expect) < 1e-4);
        let prod = ctx
            .rescale(&ctx.mul(&ca, &cb, &keys.eval).unwrap())
            .unwrap();
        let out = ctx.decrypt_values(&keys.secret, &prod).unwrap();
        for ((o, x), y) in out.iter().zip(&a).zip(&b) {
            assert!((o - x * y).abs() <= 1e-3 * (x * y).abs().max(1.0));
        }
    }

    #[test]
    fn six_times() {
        let (ctx, keys) = small();
        let prod = ctx
            .rescale(
                &ctx.mul(&enc(&[2.0], 1), &enc(&[3.0], 2), &keys.eval)
                    .unwrap(),
            )
            .unwrap();
        assert!((ctx.decrypt_values(&keys.secret, &prod).unwrap()[0] - 6.0).abs() < 1e-3);
    }

    #[test]
    fn rotation_is_left_shift() {
        let (ctx, keys) = small();
        let ct = ctx
            .rotate(&enc(&[1.0, 2.0, 3.0, 4.0], 5), 1, &keys.eval)
            .unwrap();
        let out = ctx.decrypt_values(&keys.secret, &ct).unwrap();
        assert!(max_err(&out[..4], &[2.0, 3.0, 4.0, 0.0]) < 1e-4);
        assert!((out[ctx.slots() - 1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn rotation_composes() {
        let (ctx, keys) = small();
        let v = random_vec(ctx.slots(), 1.0, 6);
        let ct = enc(&v, 7);
        let (a, b) = (5, ctx.slots() - 3);
        let twice = ctx
            .rotate(&ctx.rotate(&ct, a, &keys.eval).unwrap(), b, &keys.eval)
            .unwrap();
        let once = ctx.rotate(&ct, (a + b) % ctx.slots(), &keys.eval).unwrap();
        let x = ctx.decrypt_values(&keys.secret, &twice).unwrap();
        let y = ctx.decrypt_values(&keys.secret, &once).unwrap();
        assert!(max_err(&x, &y) < 1e-4);
        let s = ctx.slots();
        let expect: Vec<f64> = (0..s).map(|i| v[(i + 2) % s]).collect();
        assert!(max_err(&y, &expect) < 1e-4);
    }

    #[test]
    fn missing_galois_key() {
        let (ctx, _) = small();
        let keys = CkksKeySet::generate_with_steps(ctx, &[1, 2], &mut rng(8));
        let ct = ctx
            .encrypt(
                &keys.public,
                &ctx.encode_default(&[1.0]).unwrap(),
                &mut rng(9),
            )
            .unwrap();
        ctx.rotate(&ct, 3, &keys.eval).unwrap();
        assert!(matches!(
            ctx.rotate(&ct, 4, &keys.eval),
            Err(CkksError::Key(_))
        ));
    }

    #[test]
    fn depth_chain_exhausts_after_three() {
        let (ctx, keys) = small();
        let mut ct = enc(&[1.1], 1);
        let mut expect = 1.1;
        for i in 0..3 {
            let factor = enc(&[1.1], 20 + i);
            let factor = ctx.mod_drop(&factor, ct.level).unwrap();
            let factor = CkksCiphertext {
                scale: ct.scale,
                ..factor
            };
            ct = ctx
                .rescale(&ctx.mul(&ct, &factor, &keys.eval).unwrap())
                .unwrap();
            expect *= 1.1;
        }
        assert_eq!(ct.level, 0);
        let out = ctx.decrypt_values(&keys.secret, &ct).unwrap();
        assert!((out[0] - expect).abs() < 1e-2, "{} vs {expect}", out[0]);
        assert!(matches!(
            ctx.mul(&ct, &ct, &keys.eval),
            Err(CkksError::Depth(_))
        ));
        assert!(matches!(ctx.rescale(&ct), Err(CkksError::Depth(_))));
    }

    #[test]
    fn rescale_bookkeeping() {
        let (ctx, keys) = small();
        let ct = ctx
            .mul(&enc(&[1.0], 1), &enc(&[1.0], 2), &keys.eval)
            .unwrap();
        let q = ctx.chain_prime(ct.level) as f64;
        let r = ctx.rescale(&ct).unwrap();
        assert_eq!(r.scale, ctx.default_scale() * ctx.default_scale() / q);
        assert_eq!(r.level, ct.level - 1);
        // the drift from 2^30 is exactly the dropped prime's distance from 2^30
        let drift = (r.scale - ctx.default_scale()).abs() / ctx.default_scale();
        let prime_gap = (ctx.default_scale() - q).abs() / q;
        assert!((drift - prime_gap).abs() < 1e-12);
    }

    #[test]
    fn scale_and_level_mismatch() {
        let (ctx, keys) = small();
        let a = enc(&[1.0], 1);
        let b = ctx.rescale(&ctx.mul(&a, &a, &keys.eval).unwrap()).unwrap();
        assert!(matches!(ctx.add(&a, &b), Err(CkksError::Level(_))));
        let c = CkksCiphertext {
            scale: a.scale * 1.01,
            ..a.clone()
        };
        assert!(matches!(ctx.add(&a, &c), Err(CkksError::Scale(_))));
    }

    #[test]
    fn context_mismatch() {
        let (ctx, keys) = small();
        let other = CkksContext::new_insecure(CkksParams {
            n: 1024,
            moduli_bits: vec![40, 30, 40],
            scale_bits: 30,
        })
        .unwrap();
        let pt = other.encode_default(&[1.0]).unwrap();
        assert!(matches!(
            ctx.encrypt(&keys.public, &pt, &mut rng(1)),
            Err(CkksError::Context(_))
        ));
    }

    #[test]
    fn capacity_error() {
        let (ctx, _) = small();
        assert!(matches!(
            ctx.encode_default(&vec![0.0; ctx.slots() + 1]),
            Err(CkksError::Capacity(_))
        ));
    }

    #[test]
    fn plaintext_ops() {
        let (ctx, keys) = small();
        let a = random_vec(32, 5.0, 30);
        let w = random_vec(32, 1.0, 31);
        let ct = enc(&a, 32);
        let top = ctx.max_level();
        let pw = ctx.encode(&w, top, ctx.chain_prime(top) as f64).unwrap();
        let prod = ctx.rescale(&ctx.mul_plain(&ct, &pw).unwrap()).unwrap();
        assert_eq!(prod.scale, ctx.default_scale());
        let bias = ctx.encode(&w, prod.level, prod.scale).unwrap();
        let out = ctx
            .decrypt_values(&keys.secret, &ctx.add_plain(&prod, &bias).unwrap())
            .unwrap();
        let expect: Vec<f64> = a.iter().zip(&w).map(|(x, y)| x * y + y).collect();
        assert!(max_err(&out[..32], &expect) < 1e-3);
    }

    #[test]
    fn serialization_round_trips() {
        let (ctx, keys) = small();
        let ct = enc(&[1.0, -2.0], 40);
        let bytes = ctx.ciphertext_to_bytes(&ct);
        let widths: usize = ctx
            .chain_primes()
            .iter()
            .map(|q| (64 - q.leading_zeros() as usize).div_ceil(8))
            .sum();
        assert_eq!(bytes.len(), 20 + 2 * ctx.n() * widths);
        assert_eq!(ctx.ciphertext_from_bytes(&bytes).unwrap(), ct);
        let pk = ctx
            .public_key_from_bytes(&ctx.public_key_to_bytes(&keys.public))
            .unwrap();
        assert_eq!(pk, keys.public);
        let ek = ctx
            .evaluation_keys_from_bytes(&ctx.evaluation_keys_to_bytes(&keys.eval))
            .unwrap();
        assert_eq!(ek, keys.eval);
        let sk = ctx
            .secret_key_from_bytes(&ctx.secret_key_to_bytes(&keys.secret))
            .unwrap();
        assert_eq!(sk.coefficients(), keys.secret.coefficients());
        assert!(ctx
            .ciphertext_from_bytes(&bytes[..bytes.len() - 1])
            .is_err());
    }
}
