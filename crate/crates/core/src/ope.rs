//! Stateless order-preserving encryption over integer domains.
//!
//! The encryption map is the lazily sampled random order-preserving function
//! of Boldyreva et al.: the range is bisected, and the number of domain points
//! falling into the lower half is drawn from a hypergeometric distribution
//! whose coins come from a keyed PRF over the current interval. Recursing
//! into the half that contains the plaintext until the domain interval has a
//! single point yields the ciphertext.
//!
//! Also hosts the affine [`Quantizer`] that maps real feature values into the
//! integer domain and the HMAC [`feature_tag`] used to hide feature names.

use hmac::{Hmac, Mac};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

type HmacSha256 = Hmac<Sha256>;

/// Above this many draws (of the smaller of the two symmetric parameters) the
/// hypergeometric is sampled through its normal approximation.
pub const EXACT_HGD_LIMIT: u128 = 1 << 20;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OpeError {
    #[error("plaintext {value} outside domain [0, 2^{bits})")]
    Domain { value: u64, bits: u32 },
    #[error("value {0} is not an order-preserving ciphertext under this key")]
    NotACiphertext(u64),
    #[error("invalid OPE parameters: {0}")]
    Params(String),
    #[error("OPE key must be exactly 16 bytes, got {0}")]
    KeyLength(usize),
}

/// 128-bit symmetric OPE key.
#[derive(Clone, PartialEq, Eq)]
pub struct OpeKey([u8; 16]);

impl std::fmt::Debug for OpeKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("OpeKey(..)")
    }
}

impl OpeKey {
    pub fn new(bytes: [u8; 16]) -> Self {
        OpeKey(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, OpeError> {
        let arr: [u8; 16] = bytes
            .try_into()
            .map_err(|_| OpeError::KeyLength(bytes.len()))?;
        Ok(OpeKey(arr))
    }

    pub fn generate<R: rand::RngCore + rand::CryptoRng + ?Sized>(rng: &mut R) -> Self {
        let mut key = [0u8; 16];
        rng.fill_bytes(&mut key);
        OpeKey(key)
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpeParams {
    pub in_bits: u32,
    pub out_bits: u32,
}

impl Default for OpeParams {
    fn default() -> Self {
        OpeParams {
            in_bits: 32,
            out_bits: 64,
        }
    }
}

impl OpeParams {
    pub fn validate(&self) -> Result<(), OpeError> {
        if self.in_bits == 0 || self.out_bits <= self.in_bits || self.out_bits > 64 {
            return Err(OpeError::Params(format!(
                "need 0 < in_bits < out_bits <= 64, got in_bits={} out_bits={}",
                self.in_bits, self.out_bits
            )));
        }
        Ok(())
    }

    pub fn domain_size(&self) -> u128 {
        1u128 << self.in_bits
    }

    pub fn range_size(&self) -> u128 {
        1u128 << self.out_bits
    }
}

/// Inclusive integer interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Interval {
    lo: u128,
    hi: u128,
}

impl Interval {
    fn size(&self) -> u128 {
        self.hi + 1 - self.lo
    }
}

/// Order-preserving cipher bound to one key and parameter set.
#[derive(Clone, Debug)]
pub struct Ope {
    key: OpeKey,
    params: OpeParams,
}

impl Ope {
    pub fn new(key: OpeKey, params: OpeParams) -> Result<Self, OpeError> {
        params.validate()?;
        Ok(Ope { key, params })
    }

    pub fn params(&self) -> OpeParams {
        self.params
    }

    pub fn encrypt(&self, plaintext: u64) -> Result<u64, OpeError> {
        let x = plaintext as u128;
        if x >= self.params.domain_size() {
            return Err(OpeError::Domain {
                value: plaintext,
                bits: self.params.in_bits,
            });
        }
        let mut domain = Interval {
            lo: 0,
            hi: self.params.domain_size() - 1,
        };
        let mut range = Interval {
            lo: 0,
            hi: self.params.range_size() - 1,
        };
        loop {
            if domain.size() == 1 {
                return Ok(self.leaf_value(domain.lo, range) as u64);
            }
            let (lower, mid) = self.split(domain, range);
            if x < domain.lo + lower {
                domain.hi = domain.lo + lower - 1;
                range.hi = mid;
            } else {
                domain.lo += lower;
                range.lo = mid + 1;
            }
        }
    }

    pub fn decrypt(&self, ciphertext: u64) -> Result<u64, OpeError> {
        let y = ciphertext as u128;
        if y >= self.params.range_size() {
            return Err(OpeError::NotACiphertext(ciphertext));
        }
        let mut domain = Interval {
            lo: 0,
            hi: self.params.domain_size() - 1,
        };
        let mut range = Interval {
            lo: 0,
            hi: self.params.range_size() - 1,
        };
        loop {
            if domain.size() == 1 {
                return if self.leaf_value(domain.lo, range) == y {
                    Ok(domain.lo as u64)
                } else {
                    Err(OpeError::NotACiphertext(ciphertext))
                };
            }
            let (lower, mid) = self.split(domain, range);
            if y <= mid {
                if lower == 0 {
                    return Err(OpeError::NotACiphertext(ciphertext));
                }
                domain.hi = domain.lo + lower - 1;
                range.hi = mid;
            } else {
                if lower == domain.size() {
                    return Err(OpeError::NotACiphertext(ciphertext));
                }
                domain.lo += lower;
                range.lo = mid + 1;
            }
        }
    }

    /// Bisects `range` at `mid` and returns how many of the lowest domain
    /// points map into `[range.lo, mid]`.
    fn split(&self, domain: Interval, range: Interval) -> (u128, u128) {
        let m = domain.size();
        let n = range.size();
        let half = n.div_ceil(2);
        let mid = range.lo + half - 1;
        let lower = if m == n {
            half
        } else {
            let mut rng = self.coins(b"cut", &[domain.lo, domain.hi, range.lo, range.hi]);
            sample_hypergeometric(n, m, half, &mut rng)
        };
        (lower, mid)
    }

    fn leaf_value(&self, plaintext: u128, range: Interval) -> u128 {
        let mut rng = self.coins(b"leaf", &[plaintext, range.lo, range.hi]);
        rng.gen_range(range.lo..=range.hi)
    }

    fn coins(&self, label: &[u8], words: &[u128]) -> ChaCha20Rng {
        let mut mac = HmacSha256::new_from_slice(&self.key.0).expect("hmac accepts any key length");
        mac.update(label);
        mac.update(&self.params.in_bits.to_be_bytes());
        mac.update(&self.params.out_bits.to_be_bytes());
        for w in words {
            mac.update(&w.to_be_bytes());
        }
        let seed: [u8; 32] = mac.finalize().into_bytes().into();
        ChaCha20Rng::from_seed(seed)
    }
}

/// Draws the number of "marked" items among `draws` items taken without
/// replacement from a population of `population` items of which `marked`
/// are marked.
pub(crate) fn sample_hypergeometric<R: Rng + ?Sized>(
    population: u128,
    marked: u128,
    draws: u128,
    rng: &mut R,
) -> u128 {
    debug_assert!(marked <= population && draws <= population);
    let unmarked = population - marked;
    let lo = draws.saturating_sub(unmarked);
    let hi = marked.min(draws);
    if lo == hi {
        return lo;
    }
    if marked.min(draws) <= EXACT_HGD_LIMIT {
        hypergeometric_inverse_cdf(population, marked, draws, lo, hi, rng)
    } else {
        hypergeometric_normal(population, marked, draws, lo, hi, rng)
    }
}

fn hypergeometric_normal<R: Rng + ?Sized>(
    population: u128,
    marked: u128,
    draws: u128,
    lo: u128,
    hi: u128,
    rng: &mut R,
) -> u128 {
    let nt = population as f64;
    let k = marked as f64;
    let n = draws as f64;
    let mean = n * k / nt;
    let var = n * (k / nt) * (1.0 - k / nt) * ((nt - n) / (nt - 1.0));
    let z = standard_normal(rng);
    let x = (mean + var.sqrt() * z).round();
    if x <= lo as f64 {
        lo
    } else if x >= hi as f64 {
        hi
    } else {
        x as u128
    }
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // Box-Muller; u1 in (0, 1] so the log is finite.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Exact sampling by inverse CDF. Probabilities are computed relative to the
/// mode with the pmf ratio recurrence, so no factorials are evaluated.
fn hypergeometric_inverse_cdf<R: Rng + ?Sized>(
    population: u128,
    marked: u128,
    draws: u128,
    lo: u128,
    hi: u128,
    rng: &mut R,
) -> u128 {
    let unmarked = population - marked;
    let mode = ((draws + 1) * (marked + 1) / (population + 2)).clamp(lo, hi);
    // p(x+1)/p(x)
    let up = |x: u128| -> f64 {
        ((marked - x) as f64 * (draws - x) as f64)
            / ((x + 1) as f64 * (unmarked + x + 1 - draws) as f64)
    };
    const NEGLIGIBLE: f64 = 1e-300;
    let mut below = Vec::new();
    let mut w = 1.0f64;
    let mut x = mode;
    while x > lo {
        w /= up(x - 1);
        if w < NEGLIGIBLE {
            break;
        }
        below.push(w);
        x -= 1;
    }
    let start = mode - below.len() as u128;
    let mut weights: Vec<f64> = below.into_iter().rev().collect();
    weights.push(1.0);
    let mut w = 1.0f64;
    let mut x = mode;
    while x < hi {
        w *= up(x);
        if w < NEGLIGIBLE {
            break;
        }
        weights.push(w);
        x += 1;
    }
    let total: f64 = weights.iter().sum();
    let target = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if target < acc {
            return start + i as u128;
        }
    }
    start + weights.len() as u128 - 1
}

/// Affine map from a real interval onto `[0, buckets)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quantizer {
    pub min: f64,
    pub max: f64,
    pub buckets: u64,
}

impl Quantizer {
    pub const DEFAULT_BUCKETS: u64 = 1 << 31;

    pub fn new(min: f64, max: f64, buckets: u64) -> Result<Self, OpeError> {
        let q = Quantizer { min, max, buckets };
        q.validate()?;
        Ok(q)
    }

    pub fn with_default_buckets(min: f64, max: f64) -> Result<Self, OpeError> {
        Self::new(min, max, Self::DEFAULT_BUCKETS)
    }

    pub fn validate(&self) -> Result<(), OpeError> {
        if !(self.min.is_finite() && self.max.is_finite() && self.min < self.max) {
            return Err(OpeError::Params(format!(
                "quantizer needs finite min < max, got [{}, {}]",
                self.min, self.max
            )));
        }
        if self.buckets < 2 {
            return Err(OpeError::Params(
                "quantizer needs at least 2 buckets".into(),
            ));
        }
        Ok(())
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }

    /// Values outside `[min, max]` are clamped; NaN maps to bucket 0.
    pub fn quantize(&self, v: f64) -> u64 {
        let clamped = v.clamp(self.min, self.max);
        let t = (clamped - self.min) / (self.max - self.min);
        let q = (t * (self.buckets - 1) as f64).round();
        (q as u64).min(self.buckets - 1)
    }

    /// SHA-256 over the canonical JSON form, so peers can confirm they share
    /// the same quantizer without exchanging it.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("quantizer serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// 128-bit seed keying the feature-name PRF.
pub type PrfSeed = [u8; 16];

/// Keyed tag hiding a feature name: HMAC-SHA256(seed, name).
pub fn feature_tag(seed: &PrfSeed, name: &str) -> [u8; 32] {
    let mut mac = HmacSha256::new_from_slice(seed).expect("hmac accepts any key length");
    mac.update(name.as_bytes());
    mac.finalize().into_bytes().into()
}
