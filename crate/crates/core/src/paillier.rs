//! Paillier additive homomorphic encryption.
//!
//! Uses the `g = n + 1` simplification, so `g^m mod n^2 = 1 + m*n` and
//! decryption needs only `lambda = lcm(p-1, q-1)` and `mu = lambda^-1 mod n`.
//! Leaf values of boosted trees are carried as fixed-point integers through
//! [`FixedPointCodec`].

use std::fmt;

use num_bigint::{BigInt, BigUint, RandBigInt, Sign};
use num_integer::Integer;
use num_traits::{One, ToPrimitive, Zero};
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Default modulus size, 128-bit security.
pub const DEFAULT_KEY_BITS: u64 = 3072;
/// Smallest modulus accepted by [`keygen`].
pub const MIN_KEY_BITS: u64 = 256;
/// Miller-Rabin rounds used during prime generation.
pub const MILLER_RABIN_ROUNDS: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PaillierError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("plaintext out of range [0, n)")]
    PlaintextRange,
    #[error("value {0} does not fit the fixed-point range of the modulus")]
    FixedPointRange(f64),
    #[error("ciphertexts were produced under different keys")]
    KeyMismatch,
    #[error("malformed ciphertext or key bytes: {0}")]
    Encoding(String),
}

/// Short fingerprint of a public modulus, used to detect key mixups.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct KeyId(pub [u8; 8]);

impl KeyId {
    fn of(n: &BigUint) -> Self {
        let digest = Sha256::digest(n.to_bytes_be());
        let mut id = [0u8; 8];
        id.copy_from_slice(&digest[..8]);
        KeyId(id)
    }
}

impl fmt::Debug for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyId({})", hex::encode(self.0))
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct PaillierPublicKey {
    n: BigUint,
    n_squared: BigUint,
    key_id: KeyId,
}

impl fmt::Debug for PaillierPublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PaillierPublicKey")
            .field("bits", &self.n.bits())
            .field("key_id", &self.key_id)
            .finish()
    }
}

impl PaillierPublicKey {
    pub fn from_modulus(n: BigUint) -> Result<Self, PaillierError> {
        if n.bits() < MIN_KEY_BITS || n.is_even() {
            return Err(PaillierError::Parameter(format!(
                "modulus must be odd and at least {MIN_KEY_BITS} bits"
            )));
        }
        let n_squared = &n * &n;
        let key_id = KeyId::of(&n);
        Ok(PaillierPublicKey {
            n,
            n_squared,
            key_id,
        })
    }

    pub fn n(&self) -> &BigUint {
        &self.n
    }

    /// The generator, always `n + 1`.
    pub fn g(&self) -> BigUint {
        &self.n + 1u32
    }

    pub fn bits(&self) -> u64 {
        self.n.bits()
    }

    pub fn key_id(&self) -> KeyId {
        self.key_id
    }

    pub fn encrypt<R: RngCore + CryptoRng + ?Sized>(
        &self,
        m: &BigUint,
        rng: &mut R,
    ) -> Result<PaillierCiphertext, PaillierError> {
        if m >= &self.n {
            return Err(PaillierError::PlaintextRange);
        }
        let r = loop {
            let r = rng.gen_biguint_below(&self.n);
            if !r.is_zero() && r.gcd(&self.n).is_one() {
                break r;
            }
        };
        // g^m = 1 + m*n (mod n^2)
        let gm = (BigUint::one() + m * &self.n) % &self.n_squared;
        let rn = r.modpow(&self.n, &self.n_squared);
        Ok(PaillierCiphertext {
            value: (gm * rn) % &self.n_squared,
            key_id: self.key_id,
        })
    }

    /// Encryption of zero with randomizer 1. Used as the neutral element of
    /// [`PaillierPublicKey::add`] folds; it is not semantically secure on its own.
    pub fn zero_ciphertext(&self) -> PaillierCiphertext {
        PaillierCiphertext {
            value: BigUint::one(),
            key_id: self.key_id,
        }
    }

    /// Homomorphic addition: the result decrypts to `(m1 + m2) mod n`.
    pub fn add(
        &self,
        a: &PaillierCiphertext,
        b: &PaillierCiphertext,
    ) -> Result<PaillierCiphertext, PaillierError> {
        if a.key_id != self.key_id || b.key_id != self.key_id {
            return Err(PaillierError::KeyMismatch);
        }
        Ok(PaillierCiphertext {
            value: (&a.value * &b.value) % &self.n_squared,
            key_id: self.key_id,
        })
    }

    /// Public key bytes: the big-endian modulus.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.n.to_bytes_be()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PaillierError> {
        Self::from_modulus(BigUint::from_bytes_be(bytes))
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct PaillierSecretKey {
    public: PaillierPublicKey,
    lambda: BigUint,
    mu: BigUint,
}

impl fmt::Debug for PaillierSecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PaillierSecretKey")
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

impl PaillierSecretKey {
    pub fn public_key(&self) -> &PaillierPublicKey {
        &self.public
    }

    pub fn lambda(&self) -> &BigUint {
        &self.lambda
    }

    pub fn mu(&self) -> &BigUint {
        &self.mu
    }

    pub fn decrypt(&self, ct: &PaillierCiphertext) -> Result<BigUint, PaillierError> {
        if ct.key_id != self.public.key_id {
            return Err(PaillierError::KeyMismatch);
        }
        let n = &self.public.n;
        let u = ct.value.modpow(&self.lambda, &self.public.n_squared);
        // L(u) = (u - 1) / n
        let l = (u - 1u32) / n;
        Ok((l * &self.mu) % n)
    }

    /// Length-prefixed `n || lambda || mu`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for part in [&self.public.n, &self.lambda, &self.mu] {
            write_prefixed(&mut out, &part.to_bytes_be());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PaillierError> {
        let mut cursor = bytes;
        let n = BigUint::from_bytes_be(read_prefixed(&mut cursor)?);
        let lambda = BigUint::from_bytes_be(read_prefixed(&mut cursor)?);
        let mu = BigUint::from_bytes_be(read_prefixed(&mut cursor)?);
        if !cursor.is_empty() {
            return Err(PaillierError::Encoding(
                "trailing bytes in secret key".into(),
            ));
        }
        let public = PaillierPublicKey::from_modulus(n)?;
        Ok(PaillierSecretKey { public, lambda, mu })
    }
}

#[derive(Clone, Debug)]
pub struct PaillierKeypair {
    pub public: PaillierPublicKey,
    pub secret: PaillierSecretKey,
}

/// Generates a keypair whose modulus has exactly `bits` bits.
pub fn keygen<R: RngCore + CryptoRng + ?Sized>(
    bits: u64,
    rng: &mut R,
) -> Result<PaillierKeypair, PaillierError> {
    if bits < MIN_KEY_BITS || !bits.is_multiple_of(2) {
        return Err(PaillierError::Parameter(format!(
            "key size must be even and at least {MIN_KEY_BITS} bits, got {bits}"
        )));
    }
    let half = bits / 2;
    loop {
        let p = random_prime(half, rng);
        let q = random_prime(half, rng);
        if p == q {
            continue;
        }
        let n = &p * &q;
        if n.bits() != bits {
            continue;
        }
        let p1 = &p - 1u32;
        let q1 = &q - 1u32;
        if !n.gcd(&(&p1 * &q1)).is_one() {
            continue;
        }
        let lambda = p1.lcm(&q1);
        let mu = match mod_inverse(&lambda, &n) {
            Some(mu) => mu,
            None => continue,
        };
        let public = PaillierPublicKey::from_modulus(n)?;
        let secret = PaillierSecretKey {
            public: public.clone(),
            lambda,
            mu,
        };
        return Ok(PaillierKeypair { public, secret });
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct PaillierCiphertext {
    value: BigUint,
    key_id: KeyId,
}

impl fmt::Debug for PaillierCiphertext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "PaillierCiphertext({} bits, {:?})",
            self.value.bits(),
            self.key_id
        )
    }
}

impl PaillierCiphertext {
    pub fn value(&self) -> &BigUint {
        &self.value
    }

    pub fn key_id(&self) -> KeyId {
        self.key_id
    }

    /// 4-byte big-endian length followed by the big-endian magnitude.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_prefixed(&mut out, &self.value.to_bytes_be());
        out
    }

    pub fn from_bytes(bytes: &[u8], pk: &PaillierPublicKey) -> Result<Self, PaillierError> {
        let mut cursor = bytes;
        let value = BigUint::from_bytes_be(read_prefixed(&mut cursor)?);
        if !cursor.is_empty() {
            return Err(PaillierError::Encoding(
                "trailing bytes in ciphertext".into(),
            ));
        }
        if value.is_zero() || value >= pk.n_squared || !value.gcd(&pk.n).is_one() {
            return Err(PaillierError::Encoding(
                "ciphertext is not a unit mod n^2".into(),
            ));
        }
        Ok(PaillierCiphertext {
            value,
            key_id: pk.key_id,
        })
    }
}

/// Signed fixed-point encoding of reals into `Z_n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FixedPointCodec {
    pub scale_bits: u32,
    n: BigUint,
}

impl FixedPointCodec {
    pub const DEFAULT_SCALE_BITS: u32 = 16;

    pub fn new(scale_bits: u32, n: BigUint) -> Self {
        FixedPointCodec { scale_bits, n }
    }

    pub fn for_key(pk: &PaillierPublicKey) -> Self {
        Self::new(Self::DEFAULT_SCALE_BITS, pk.n.clone())
    }

    pub fn modulus(&self) -> &BigUint {
        &self.n
    }

    pub fn encode(&self, x: f64) -> Result<BigUint, PaillierError> {
        if !x.is_finite() {
            return Err(PaillierError::FixedPointRange(x));
        }
        let scaled = (x * (self.scale_bits as f64).exp2()).round();
        let magnitude = BigUint::from(scaled.abs() as u128);
        let half = &self.n >> 1;
        if scaled.abs() >= 2f64.powi(127) || magnitude >= half {
            return Err(PaillierError::FixedPointRange(x));
        }
        if scaled < 0.0 && !magnitude.is_zero() {
            Ok(&self.n - magnitude)
        } else {
            Ok(magnitude)
        }
    }

    pub fn decode(&self, m: &BigUint) -> f64 {
        let m = m % &self.n;
        let half = &self.n >> 1;
        let signed = if m > half {
            BigInt::from_biguint(Sign::Minus, &self.n - m)
        } else {
            BigInt::from_biguint(Sign::Plus, m)
        };
        signed.to_f64().unwrap_or(f64::NAN) / (self.scale_bits as f64).exp2()
    }
}

pub(crate) fn write_prefixed(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
    out.extend_from_slice(bytes);
}

pub(crate) fn read_prefixed<'a>(cursor: &mut &'a [u8]) -> Result<&'a [u8], PaillierError> {
    if cursor.len() < 4 {
        return Err(PaillierError::Encoding("truncated length prefix".into()));
    }
    let len = u32::from_be_bytes([cursor[0], cursor[1], cursor[2], cursor[3]]) as usize;
    let rest = &cursor[4..];
    if rest.len() < len {
        return Err(PaillierError::Encoding("truncated field".into()));
    }
    let (field, tail) = rest.split_at(len);
    *cursor = tail;
    Ok(field)
}

fn mod_inverse(a: &BigUint, m: &BigUint) -> Option<BigUint> {
    let a = BigInt::from(a.clone());
    let m = BigInt::from(m.clone());
    let egcd = a.extended_gcd(&m);
    if !egcd.gcd.is_one() {
        return None;
    }
    egcd.x.mod_floor(&m).to_biguint()
}

const SMALL_PRIMES: [u32; 54] = [
    3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97,
    101, 103, 107, 109, 113, 127, 131, 137, 139, 149, 151, 157, 163, 167, 173, 179, 181, 191, 193,
    197, 199, 211, 223, 227, 229, 233, 239, 241, 251, 257,
];

/// Random prime with exactly `bits` bits and its two top bits set, so that
/// the product of two such primes has exactly `2 * bits` bits.
fn random_prime<R: RngCore + ?Sized>(bits: u64, rng: &mut R) -> BigUint {
    loop {
        let mut candidate = rng.gen_biguint(bits);
        candidate.set_bit(bits - 1, true);
        candidate.set_bit(bits - 2, true);
        candidate.set_bit(0, true);
        if is_probable_prime(&candidate, MILLER_RABIN_ROUNDS, rng) {
            return candidate;
        }
    }
}

pub(crate) fn is_probable_prime<R: RngCore + ?Sized>(
    n: &BigUint,
    rounds: usize,
    rng: &mut R,
) -> bool {
    if n < &BigUint::from(2u32) {
        return false;
    }
    for &p in SMALL_PRIMES.iter() {
        let p = BigUint::from(p);
        if n == &p {
            return true;
        }
        if (n % &p).is_zero() {
            return false;
        }
    }
    if n.is_even() {
        return false;
    }
    let n_minus_1 = n - 1u32;
    let s = n_minus_1.trailing_zeros().unwrap_or(0);
    let d = &n_minus_1 >> s;
    let two = BigUint::from(2u32);
    'witness: for _ in 0..rounds {
        let a = rng.gen_biguint_range(&two, &n_minus_1);
        let mut x = a.modpow(&d, n);
        if x.is_one() || x == n_minus_1 {
            continue;
        }
        for _ in 1..s {
            x = x.modpow(&two, n);
            if x == n_minus_1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn test_key() -> PaillierKeypair {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        keygen(512, &mut rng).unwrap()
    }

    #[test]
    fn keygen_sizes() {
        let kp = test_key();
        assert_eq!(kp.public.bits(), 512);
        assert_eq!(kp.public.g(), kp.public.n() + 1u32);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        assert!(matches!(
            keygen(100, &mut rng),
            Err(PaillierError::Parameter(_))
        ));
        assert!(matches!(
            keygen(513, &mut rng),
            Err(PaillierError::Parameter(_))
        ));
    }

    #[test]
    fn encrypt_decrypt_edges() {
        let kp = test_key();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let zero = kp.public.encrypt(&BigUint::zero(), &mut rng).unwrap();
        assert_eq!(kp.secret.decrypt(&zero).unwrap(), BigUint::zero());
        let top = kp.public.n() - 1u32;
        let ct = kp.public.encrypt(&top, &mut rng).unwrap();
        assert_eq!(kp.secret.decrypt(&ct).unwrap(), top);
        assert_eq!(
            kp.public.encrypt(kp.public.n(), &mut rng),
            Err(PaillierError::PlaintextRange)
        );
    }

    #[test]
    fn probabilistic_encryption() {
        let kp = test_key();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let five = BigUint::from(5u32);
        let a = kp.public.encrypt(&five, &mut rng).unwrap();
        let b = kp.public.encrypt(&five, &mut rng).unwrap();
        assert_ne!(a, b);
        assert_eq!(kp.secret.decrypt(&a).unwrap(), five);
        assert_eq!(kp.secret.decrypt(&b).unwrap(), five);
    }

    #[test]
    fn additive_examples() {
        let kp = test_key();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let enc =
            |v: u32, rng: &mut ChaCha20Rng| kp.public.encrypt(&BigUint::from(v), rng).unwrap();
        let sum = kp.public.add(&enc(2, &mut rng), &enc(3, &mut rng)).unwrap();
        assert_eq!(kp.secret.decrypt(&sum).unwrap(), BigUint::from(5u32));
        let m = enc(77, &mut rng);
        let same = kp.public.add(&m, &enc(0, &mut rng)).unwrap();
        assert_eq!(kp.secret.decrypt(&same).unwrap(), BigUint::from(77u32));

        let values = [1u32, 2, 3, 4];
        let oracle: u32 = values.iter().sum();
        let folded = values
            .iter()
            .map(|&v| enc(v, &mut rng))
            .try_fold(kp.public.zero_ciphertext(), |acc, ct| {
                kp.public.add(&acc, &ct)
            })
            .unwrap();
        assert_eq!(kp.secret.decrypt(&folded).unwrap(), BigUint::from(oracle));
    }

    #[test]
    fn key_mismatch_rejected() {
        let kp = test_key();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let other = keygen(512, &mut rng).unwrap();
        let a = kp.public.encrypt(&BigUint::one(), &mut rng).unwrap();
        let b = other.public.encrypt(&BigUint::one(), &mut rng).unwrap();
        assert_eq!(kp.public.add(&a, &b), Err(PaillierError::KeyMismatch));
        assert_eq!(other.secret.decrypt(&a), Err(PaillierError::KeyMismatch));
    }

    #[test]
    fn fixed_point_examples() {
        let kp = test_key();
        let codec = FixedPointCodec::for_key(&kp.public);
        assert_eq!(codec.encode(0.5).unwrap(), BigUint::from(32768u32));
        assert_eq!(codec.encode(-0.5).unwrap(), kp.public.n() - 32768u32);
        assert_eq!(codec.decode(&codec.encode(-1.25).unwrap()), -1.25);
        assert!(codec.encode(f64::INFINITY).is_err());
        assert!(codec.encode(1e200).is_err());
    }

    #[test]
    fn serialization_round_trip() {
        let kp = test_key();
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let ct = kp.public.encrypt(&BigUint::from(42u32), &mut rng).unwrap();
        let bytes = ct.to_bytes();
        assert_eq!(
            u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize,
            bytes.len() - 4
        );
        let back = PaillierCiphertext::from_bytes(&bytes, &kp.public).unwrap();
        assert_eq!(back, ct);
        let sk = PaillierSecretKey::from_bytes(&kp.secret.to_bytes()).unwrap();
        assert_eq!(sk, kp.secret);
        let pk = PaillierPublicKey::from_bytes(&kp.public.to_bytes()).unwrap();
        assert_eq!(pk, kp.public);
        assert!(PaillierCiphertext::from_bytes(&bytes[..bytes.len() - 1], &kp.public).is_err());
    }

    #[test]
    fn primality_on_known_values() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let mersenne = (BigUint::one() << 127u32) - 1u32;
        assert!(is_probable_prime(&mersenne, 32, &mut rng));
        let composite = BigUint::from(561u32); // Carmichael
        assert!(!is_probable_prime(&composite, 32, &mut rng));
    }
}
