//! Secret, public and key-switching keys.
//!
//! Key switching is hybrid: the input is decomposed into one digit per chain
//! prime, each digit multiplies a key component carrying `P * g_i * s'`
//! (with `g_i ≡ [i = j] mod q_j`), and the accumulated result is divided by
//! the special prime `P`. Residues of primes wider than `MAX_DIGIT_BITS` are
//! further split into balanced base-`2^w` pieces so that no digit is large
//! next to `P`; piece `t` of prime `i` carries `P * 2^(w t) * g_i * s'`.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::index;
use rand::{CryptoRng, Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use super::context::{CkksContext, ContextId};
use super::CkksError;

/// Standard deviation of the error distribution.
pub const ERROR_STDDEV: f64 = 3.2;
/// Errors are cut off at this many standard deviations.
const ERROR_BOUND: f64 = 6.0;

/// Widest residue used as a single key-switching digit.
const MAX_DIGIT_BITS: u32 = 30;

/// Rows indexed by modulus position; all in NTT form unless stated.
pub(crate) type Rows = Vec<Vec<u64>>;

pub(crate) fn sample_gaussian<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<i64> {
    let normal = Normal::new(0.0, ERROR_STDDEV).expect("positive stddev");
    let bound = ERROR_BOUND * ERROR_STDDEV;
    (0..n)
        .map(|_| normal.sample(rng).clamp(-bound, bound).round() as i64)
        .collect()
}

/// Ternary secret with exactly `n / 2` non-zero coefficients.
pub(crate) fn sample_ternary_hw<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<i64> {
    let mut s = vec![0i64; n];
    for i in index::sample(rng, n, n / 2) {
        s[i] = if rng.gen::<bool>() { 1 } else { -1 };
    }
    s
}

/// Ternary with P(0) = 1/2 and P(±1) = 1/4.
pub(crate) fn sample_zero_one<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<i64> {
    (0..n)
        .map(|_| match rng.gen_range(0..4) {
            0 => 1,
            1 => -1,
            _ => 0,
        })
        .collect()
}

impl CkksContext {
    /// NTT rows of a small signed polynomial for the given modulus indices.
    pub(crate) fn small_to_ntt(
        &self,
        coeffs: &[i64],
        indices: impl IntoIterator<Item = usize>,
    ) -> Rows {
        indices
            .into_iter()
            .map(|i| {
                let m = self.modulus(i);
                let mut row: Vec<u64> = coeffs.iter().map(|&c| m.reduce_i64(c)).collect();
                self.ntt(i).forward(&mut row);
                row
            })
            .collect()
    }

    pub(crate) fn uniform_rows<R: Rng + ?Sized>(
        &self,
        indices: impl IntoIterator<Item = usize>,
        rng: &mut R,
    ) -> Rows {
        indices
            .into_iter()
            .map(|i| {
                let q = self.modulus(i).value();
                (0..self.n()).map(|_| rng.gen_range(0..q)).collect()
            })
            .collect()
    }

    /// Key-switching digits in key order: `(prime, shift, width)`, with the
    /// pieces of each chain prime consecutive and `width == 0` when unsplit.
    pub(crate) fn gadget_digits(&self) -> Vec<(usize, u32, u32)> {
        let mut out = Vec::new();
        for i in 0..self.special_index() {
            let bits = 64 - self.modulus(i).value().leading_zeros();
            if bits <= MAX_DIGIT_BITS {
                out.push((i, 0, 0));
                continue;
            }
            let pieces = bits.div_ceil(MAX_DIGIT_BITS);
            let width = bits.div_ceil(pieces);
            out.extend((0..pieces).map(|t| (i, t * width, width)));
        }
        out
    }

    /// All chain indices followed by the special index.
    pub(crate) fn key_indices(&self) -> impl Iterator<Item = usize> {
        0..=self.special_index()
    }
}

pub struct SecretKey {
    pub(crate) coeffs: Vec<i64>,
    /// NTT rows over every modulus including the special prime.
    pub(crate) ntt: Rows,
    pub(crate) ctx_id: ContextId,
}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretKey(..)")
    }
}

impl SecretKey {
    pub fn generate<R: RngCore + CryptoRng + ?Sized>(ctx: &CkksContext, rng: &mut R) -> Self {
        let coeffs = sample_ternary_hw(ctx.n(), rng);
        let ntt = ctx.small_to_ntt(&coeffs, ctx.key_indices());
        SecretKey {
            coeffs,
            ntt,
            ctx_id: ctx.id(),
        }
    }

    pub fn coefficients(&self) -> &[i64] {
        &self.coeffs
    }

    pub fn from_coefficients(ctx: &CkksContext, coeffs: Vec<i64>) -> Result<Self, CkksError> {
        if coeffs.len() != ctx.n() || coeffs.iter().any(|c| !(-1..=1).contains(c)) {
            return Err(CkksError::Encoding(
                "secret key must have N ternary coefficients".into(),
            ));
        }
        let ntt = ctx.small_to_ntt(&coeffs, ctx.key_indices());
        Ok(SecretKey {
            coeffs,
            ntt,
            ctx_id: ctx.id(),
        })
    }
}

/// RLWE pair `(b, a)` with `b = -a s + e` over the chain primes.
#[derive(Clone, PartialEq, Eq)]
pub struct PublicKey {
    pub(crate) b: Rows,
    pub(crate) a: Rows,
    pub(crate) ctx_id: ContextId,
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("PublicKey(..)")
    }
}

impl PublicKey {
    pub fn generate<R: RngCore + CryptoRng + ?Sized>(
        ctx: &CkksContext,
        sk: &SecretKey,
        rng: &mut R,
    ) -> Self {
        let chain = 0..ctx.special_index();
        let a = ctx.uniform_rows(chain.clone(), rng);
        let e = ctx.small_to_ntt(&sample_gaussian(ctx.n(), rng), chain.clone());
        let b = chain
            .map(|j| {
                let m = ctx.modulus(j);
                (0..ctx.n())
                    .map(|k| m.sub(e[j][k], m.mul(a[j][k], sk.ntt[j][k])))
                    .collect()
            })
            .collect();
        PublicKey {
            b,
            a,
            ctx_id: ctx.id(),
        }
    }
}

/// One `(b_i, a_i)` pair per gadget digit, each over every modulus including
/// the special prime. The `a_i` are expanded from `seed`.
#[derive(Clone, PartialEq, Eq)]
pub struct SwitchingKey {
    pub(crate) b: Vec<Rows>,
    pub(crate) a: Vec<Rows>,
    pub(crate) seed: [u8; 32],
}

impl fmt::Debug for SwitchingKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SwitchingKey({} digits)", self.b.len())
    }
}

impl SwitchingKey {
    pub(crate) fn expand_a(ctx: &CkksContext, seed: [u8; 32], digit: usize) -> Rows {
        let mut rng = ChaCha20Rng::from_seed(seed);
        rng.set_stream(digit as u64);
        ctx.uniform_rows(ctx.key_indices(), &mut rng)
    }

    /// Key switching from `target` (NTT rows over every modulus) to `sk`.
    pub(crate) fn generate<R: RngCore + CryptoRng + ?Sized>(
        ctx: &CkksContext,
        sk: &SecretKey,
        target: &Rows,
        rng: &mut R,
    ) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        let digits = ctx.gadget_digits();
        let mut bs = Vec::with_capacity(digits.len());
        let mut as_ = Vec::with_capacity(digits.len());
        for (k, &(i, shift, _)) in digits.iter().enumerate() {
            let a = Self::expand_a(ctx, seed, k);
            let e = ctx.small_to_ntt(&sample_gaussian(ctx.n(), rng), ctx.key_indices());
            let b: Rows = ctx
                .key_indices()
                .map(|j| {
                    let m = ctx.modulus(j);
                    let gadget = if j == i {
                        m.mul(ctx.special_mod(i), m.reduce(1u64 << shift))
                    } else {
                        0
                    };
                    (0..ctx.n())
                        .map(|k| {
                            let mut v = m.sub(e[j][k], m.mul(a[j][k], sk.ntt[j][k]));
                            if gadget != 0 {
                                v = m.add(v, m.mul(gadget, target[j][k]));
                            }
                            v
                        })
                        .collect()
                })
                .collect();
            bs.push(b);
            as_.push(a);
        }
        SwitchingKey {
            b: bs,
            a: as_,
            seed,
        }
    }

    pub(crate) fn from_parts(ctx: &CkksContext, b: Vec<Rows>, seed: [u8; 32]) -> Self {
        let a = (0..b.len()).map(|i| Self::expand_a(ctx, seed, i)).collect();
        SwitchingKey { b, a, seed }
    }

    /// Switches `d`, given in both coefficient and NTT form over chain primes
    /// `0..=level`, and returns the pair `(k0, k1)` in NTT form over the same
    /// primes.
    pub(crate) fn switch(&self, ctx: &CkksContext, d: &Rows, d_ntt: &Rows) -> (Rows, Rows) {
        let level = d.len() - 1;
        let n = ctx.n();
        let sp = ctx.special_index();
        let targets: Vec<usize> = (0..=level).chain(std::iter::once(sp)).collect();
        let mut acc0 = vec![vec![0u64; n]; targets.len()];
        let mut acc1 = vec![vec![0u64; n]; targets.len()];
        let mut row = vec![0u64; n];
        let mut piece = vec![0i64; n];
        for (key, &(i, shift, width)) in ctx.gadget_digits().iter().enumerate() {
            if i > level {
                break;
            }
            let src = ctx.modulus(i);
            if width > 0 {
                // balanced base-2^width piece of the centered residue
                let half = 1i64 << (width - 1);
                let mask = (1i64 << width) - 1;
                let last = shift + width >= 64 - src.value().leading_zeros();
                for (p, &v) in piece.iter_mut().zip(&d[i]) {
                    let mut x = src.center(v);
                    let mut lo = 0;
                    for _ in 0..=shift / width {
                        lo = ((x & mask) ^ half) - half;
                        x = (x - lo) >> width;
                    }
                    *p = if last { lo + (x << width) } else { lo };
                }
            } else {
                for (p, &v) in piece.iter_mut().zip(&d[i]) {
                    *p = src.center(v);
                }
            }
            for (t, &j) in targets.iter().enumerate() {
                let m = ctx.modulus(j);
                let row: &[u64] = if j == i && width == 0 {
                    // the centered digit is congruent to the input mod q_i
                    &d_ntt[i]
                } else {
                    for (r, &v) in row.iter_mut().zip(&piece) {
                        *r = m.reduce_i64(v);
                    }
                    ctx.ntt(j).forward(&mut row);
                    &row
                };
                let (kb, ka) = (&self.b[key][j], &self.a[key][j]);
                for k in 0..n {
                    acc0[t][k] = m.add(acc0[t][k], m.mul(row[k], kb[k]));
                    acc1[t][k] = m.add(acc1[t][k], m.mul(row[k], ka[k]));
                }
            }
        }
        (mod_down(ctx, acc0), mod_down(ctx, acc1))
    }
}

/// Divides rows over `q_0..q_l, P` by `P` with rounding, dropping the special row.
fn mod_down(ctx: &CkksContext, mut acc: Rows) -> Rows {
    let sp = ctx.special_index();
    let p = ctx.modulus(sp);
    let mut special = acc.pop().expect("special row present");
    ctx.ntt(sp).inverse(&mut special);
    let centered: Vec<i64> = special.iter().map(|&v| p.center(v)).collect();
    let mut tmp = vec![0u64; ctx.n()];
    for (j, row) in acc.iter_mut().enumerate() {
        let m = ctx.modulus(j);
        for (t, &c) in tmp.iter_mut().zip(&centered) {
            *t = m.reduce_i64(c);
        }
        ctx.ntt(j).forward(&mut tmp);
        let inv = ctx.special_inv(j);
        let inv_s = m.shoup(inv);
        for (x, &t) in row.iter_mut().zip(&tmp) {
            *x = m.mul_shoup(m.sub(*x, t), inv, inv_s);
        }
    }
    acc
}

/// Relinearization key plus rotation keys indexed by Galois element.
#[derive(Clone, PartialEq, Eq)]
pub struct EvaluationKeys {
    pub(crate) relin: SwitchingKey,
    pub(crate) galois: BTreeMap<u64, SwitchingKey>,
    pub(crate) ctx_id: ContextId,
}

impl fmt::Debug for EvaluationKeys {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EvaluationKeys")
            .field("galois_elements", &self.galois.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl EvaluationKeys {
    pub fn galois_elements(&self) -> impl Iterator<Item = &u64> {
        self.galois.keys()
    }

    pub fn has_rotation(&self, ctx: &CkksContext, steps: usize) -> bool {
        self.galois.contains_key(&ctx.galois_element(steps))
    }
}

/// Rotation steps with Galois keys by default: powers of two up to `N/4`.
pub fn default_rotation_steps(ctx: &CkksContext) -> Vec<usize> {
    std::iter::successors(Some(1usize), |s| Some(s * 2))
        .take_while(|&s| s <= ctx.n() / 4)
        .collect()
}

pub struct CkksKeySet {
    pub secret: SecretKey,
    pub public: PublicKey,
    pub eval: EvaluationKeys,
}

impl fmt::Debug for CkksKeySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CkksKeySet")
            .field("eval", &self.eval)
            .finish_non_exhaustive()
    }
}

impl CkksKeySet {
    /// Keys with Galois keys for the default power-of-two steps.
    pub fn generate<R: RngCore + CryptoRng + ?Sized>(ctx: &CkksContext, rng: &mut R) -> Self {
        Self::generate_with_steps(ctx, &default_rotation_steps(ctx), rng)
    }

    pub fn generate_with_steps<R: RngCore + CryptoRng + ?Sized>(
        ctx: &CkksContext,
        steps: &[usize],
        rng: &mut R,
    ) -> Self {
        let secret = SecretKey::generate(ctx, rng);
        let public = PublicKey::generate(ctx, &secret, rng);
        let eval = EvaluationKeys::generate(ctx, &secret, steps, rng);
        CkksKeySet {
            secret,
            public,
            eval,
        }
    }
}

impl EvaluationKeys {
    pub fn generate<R: RngCore + CryptoRng + ?Sized>(
        ctx: &CkksContext,
        sk: &SecretKey,
        steps: &[usize],
        rng: &mut R,
    ) -> Self {
        let s2: Rows = ctx
            .key_indices()
            .map(|j| {
                let m = ctx.modulus(j);
                sk.ntt[j].iter().map(|&x| m.mul(x, x)).collect()
            })
            .collect();
        let relin = SwitchingKey::generate(ctx, sk, &s2, rng);
        let mut galois = BTreeMap::new();
        for &s in steps {
            let g = ctx.galois_element(s);
            if g == 1 || galois.contains_key(&g) {
                continue;
            }
            let permuted = ctx.automorphism_small(&sk.coeffs, g);
            let target = ctx.small_to_ntt(&permuted, ctx.key_indices());
            galois.insert(g, SwitchingKey::generate(ctx, sk, &target, rng));
        }
        EvaluationKeys {
            relin,
            galois,
            ctx_id: ctx.id(),
        }
    }
}

impl CkksContext {
    /// `a(X) -> a(X^g)` on signed coefficients.
    pub(crate) fn automorphism_small(&self, a: &[i64], g: u64) -> Vec<i64> {
        let n = self.n();
        let two_n = 2 * n as u64;
        let mut out = vec![0i64; n];
        for (i, &c) in a.iter().enumerate() {
            let idx = ((i as u64 * g) & (two_n - 1)) as usize;
            if idx < n {
                out[idx] = c;
            } else {
                out[idx - n] = -c;
            }
        }
        out
    }
}
