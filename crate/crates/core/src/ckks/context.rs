use num_bigint::BigUint;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::encoding::SlotEncoder;
use super::modarith::{ntt_primes, Modulus};
use super::ntt::NttTable;
use super::CkksError;

/// Largest total modulus size (bits) with 128-bit security for a ternary
/// secret, by ring degree.
pub const SECURITY_CAP_128: [(usize, u32); 6] = [
    (1024, 27),
    (2048, 54),
    (4096, 109),
    (8192, 218),
    (16384, 438),
    (32768, 881),
];

/// Ring degree, modulus chain and scale. The last modulus is the special
/// key-switching prime; the others form the rescaling chain.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CkksParams {
    #[serde(rename = "N")]
    pub n: usize,
    pub moduli_bits: Vec<u32>,
    pub scale_bits: u32,
}

impl Default for CkksParams {
    fn default() -> Self {
        CkksParams {
            n: 16384,
            moduli_bits: vec![40, 30, 30, 30, 40],
            scale_bits: 30,
        }
    }
}

impl CkksParams {
    pub fn total_bits(&self) -> u32 {
        self.moduli_bits.iter().sum()
    }

    pub fn security_cap(&self) -> Option<u32> {
        SECURITY_CAP_128
            .iter()
            .find(|(n, _)| *n == self.n)
            .map(|(_, b)| *b)
    }

    fn check_shape(&self) -> Result<(), CkksError> {
        if !self.n.is_power_of_two() || self.n < 8 {
            return Err(CkksError::Parameter(format!(
                "ring degree {} is not a power of two >= 8",
                self.n
            )));
        }
        if self.moduli_bits.len() < 2 {
            return Err(CkksError::Parameter(
                "need at least one chain prime and the special prime".into(),
            ));
        }
        if self.scale_bits == 0 || self.scale_bits >= self.moduli_bits[0] {
            return Err(CkksError::Parameter(format!(
                "scale of {} bits must be below the {}-bit base prime",
                self.scale_bits, self.moduli_bits[0]
            )));
        }
        Ok(())
    }

    pub fn check_security(&self) -> Result<(), CkksError> {
        match self.security_cap() {
            Some(cap) if self.total_bits() <= cap => Ok(()),
            Some(cap) => Err(CkksError::Security(format!(
                "{} modulus bits exceed the 128-bit cap of {cap} for N = {}",
                self.total_bits(),
                self.n
            ))),
            None => Err(CkksError::Security(format!(
                "no 128-bit security bound is tabulated for N = {}",
                self.n
            ))),
        }
    }

    pub fn descriptor(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("params serialize")
    }
}

pub type ContextId = [u8; 8];

/// Precomputed ring data shared by keys, encoders and ciphertexts.
#[derive(Debug)]
pub struct CkksContext {
    params: CkksParams,
    /// Chain primes q_0..q_L followed by the special prime P.
    moduli: Vec<Modulus>,
    ntt: Vec<NttTable>,
    id: ContextId,
    pub(crate) encoder: SlotEncoder,
    /// `rescale_inv[l][j]` = q_l^-1 mod q_j for j < l.
    rescale_inv: Vec<Vec<u64>>,
    /// P^-1 mod q_j.
    special_inv: Vec<u64>,
    /// P mod q_j.
    special_mod: Vec<u64>,
}

impl CkksContext {
    /// Builds a context after enforcing the 128-bit security cap.
    pub fn new(params: CkksParams) -> Result<Self, CkksError> {
        params.check_security()?;
        Self::build(params)
    }

    /// Builds a context without the security gate, for small test rings.
    pub fn new_insecure(params: CkksParams) -> Result<Self, CkksError> {
        Self::build(params)
    }

    fn build(params: CkksParams) -> Result<Self, CkksError> {
        params.check_shape()?;
        let n = params.n;
        let primes = ntt_primes(&params.moduli_bits, n).map_err(CkksError::Parameter)?;
        let moduli: Vec<Modulus> = primes.iter().map(|&p| Modulus::new(p)).collect();
        let ntt = moduli.iter().map(|m| NttTable::new(*m, n)).collect();
        let chain = moduli.len() - 1;
        let rescale_inv = (0..chain)
            .map(|l| {
                (0..l)
                    .map(|j| moduli[j].inv(moduli[l].value() % moduli[j].value()))
                    .collect()
            })
            .collect();
        let p = moduli[chain].value();
        let special_inv = (0..chain)
            .map(|j| moduli[j].inv(p % moduli[j].value()))
            .collect();
        let special_mod = (0..chain).map(|j| p % moduli[j].value()).collect();
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&params).expect("params serialize"));
        for p in &primes {
            h.update(p.to_be_bytes());
        }
        let id: ContextId = h.finalize()[..8].try_into().expect("8 bytes");
        Ok(CkksContext {
            encoder: SlotEncoder::new(n),
            params,
            moduli,
            ntt,
            id,
            rescale_inv,
            special_inv,
            special_mod,
        })
    }

    pub fn params(&self) -> &CkksParams {
        &self.params
    }

    pub fn id(&self) -> ContextId {
        self.id
    }

    pub fn n(&self) -> usize {
        self.params.n
    }

    pub fn slots(&self) -> usize {
        self.params.n / 2
    }

    /// Highest ciphertext level; a fresh ciphertext can be rescaled this many times.
    pub fn max_level(&self) -> usize {
        self.moduli.len() - 2
    }

    pub fn default_scale(&self) -> f64 {
        (self.params.scale_bits as f64).exp2()
    }

    /// Chain prime dropped when rescaling from `level`.
    pub fn chain_prime(&self, level: usize) -> u64 {
        self.moduli[level].value()
    }

    pub fn chain_primes(&self) -> Vec<u64> {
        self.moduli[..self.moduli.len() - 1]
            .iter()
            .map(Modulus::value)
            .collect()
    }

    pub fn special_prime(&self) -> u64 {
        self.moduli[self.moduli.len() - 1].value()
    }

    pub(crate) fn modulus(&self, i: usize) -> &Modulus {
        &self.moduli[i]
    }

    pub(crate) fn ntt(&self, i: usize) -> &NttTable {
        &self.ntt[i]
    }

    pub(crate) fn special_index(&self) -> usize {
        self.moduli.len() - 1
    }

    pub(crate) fn rescale_inv(&self, level: usize, j: usize) -> u64 {
        self.rescale_inv[level][j]
    }

    pub(crate) fn special_inv(&self, j: usize) -> u64 {
        self.special_inv[j]
    }

    pub(crate) fn special_mod(&self, j: usize) -> u64 {
        self.special_mod[j]
    }

    /// Product of the chain primes up to `level`.
    pub fn chain_modulus(&self, level: usize) -> BigUint {
        self.moduli[..=level]
            .iter()
            .map(|m| BigUint::from(m.value()))
            .product()
    }

    /// Galois element that rotates slots left by `steps`.
    pub fn galois_element(&self, steps: usize) -> u64 {
        let two_n = 2 * self.params.n as u64;
        let mut g = 1u64;
        let mut base = 5u64;
        let mut e = (steps % self.slots()) as u64;
        while e > 0 {
            if e & 1 == 1 {
                g = g * base % two_n;
            }
            base = base * base % two_n;
            e >>= 1;
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn security_gate() {
        let ok = CkksParams {
            n: 16384,
            moduli_bits: vec![40, 30, 30, 30, 40],
            scale_bits: 30,
        };
        assert_eq!(ok.total_bits(), 170);
        ok.check_security().unwrap();
        let too_big = CkksParams {
            n: 16384,
            moduli_bits: vec![60; 8].into_iter().chain([20]).collect(),
            scale_bits: 30,
        };
        assert_eq!(too_big.total_bits(), 500);
        assert!(matches!(
            too_big.check_security(),
            Err(CkksError::Security(_))
        ));
        assert!(matches!(
            CkksContext::new(too_big),
            Err(CkksError::Security(_))
        ));
    }

    #[test]
    fn default_chain_shape() {
        let ctx = CkksContext::new(CkksParams::default()).unwrap();
        assert_eq!(ctx.max_level(), 3);
        assert_eq!(ctx.slots(), 8192);
        assert_eq!(ctx.default_scale(), 2f64.powi(30));
        assert_eq!(ctx.chain_primes().len(), 4);
        assert_eq!(64 - ctx.special_prime().leading_zeros(), 40);
    }

    #[test]
    fn descriptor_json() {
        let d = CkksParams::default().descriptor();
        assert_eq!(
            d,
            serde_json::json!({"N": 16384, "moduli_bits": [40, 30, 30, 30, 40], "scale_bits": 30})
        );
    }
}
