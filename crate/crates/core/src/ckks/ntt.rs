//! Negacyclic number-theoretic transform over `Z_q[X]/(X^n + 1)`.
//!
//! The forward transform takes coefficients in natural order to evaluations
//! in bit-reversed order; the inverse undoes it. Pointwise products of
//! transformed vectors are negacyclic convolutions.

use super::modarith::{primitive_root_of_unity, Modulus};

#[derive(Clone, Debug)]
pub struct NttTable {
    pub modulus: Modulus,
    n: usize,
    /// psi^bitrev(i) and its Shoup companion.
    roots: Vec<(u64, u64)>,
    /// psi^-bitrev(i) and its Shoup companion.
    inv_roots: Vec<(u64, u64)>,
    n_inv: (u64, u64),
}

fn bit_reverse(x: usize, bits: u32) -> usize {
    x.reverse_bits() >> (usize::BITS - bits)
}

impl NttTable {
    pub fn new(modulus: Modulus, n: usize) -> Self {
        assert!(n.is_power_of_two() && n >= 2);
        let psi = primitive_root_of_unity(&modulus, 2 * n as u64);
        let psi_inv = modulus.inv(psi);
        let bits = n.trailing_zeros();
        let mut roots = vec![(0, 0); n];
        let mut inv_roots = vec![(0, 0); n];
        let (mut p, mut pi) = (1u64, 1u64);
        for i in 0..n {
            let r = bit_reverse(i, bits);
            roots[r] = (p, modulus.shoup(p));
            inv_roots[r] = (pi, modulus.shoup(pi));
            p = modulus.mul(p, psi);
            pi = modulus.mul(pi, psi_inv);
        }
        let ni = modulus.inv(n as u64);
        NttTable {
            modulus,
            n,
            roots,
            inv_roots,
            n_inv: (ni, modulus.shoup(ni)),
        }
    }

    pub fn forward(&self, a: &mut [u64]) {
        debug_assert_eq!(a.len(), self.n);
        let m = &self.modulus;
        let mut t = self.n;
        let mut groups = 1;
        while groups < self.n {
            t >>= 1;
            for i in 0..groups {
                let (w, ws) = self.roots[groups + i];
                let start = 2 * i * t;
                let (lo, hi) = a[start..start + 2 * t].split_at_mut(t);
                for (x, y) in lo.iter_mut().zip(hi.iter_mut()) {
                    let u = *x;
                    let v = m.mul_shoup(*y, w, ws);
                    *x = m.add(u, v);
                    *y = m.sub(u, v);
                }
            }
            groups <<= 1;
        }
    }

    pub fn inverse(&self, a: &mut [u64]) {
        debug_assert_eq!(a.len(), self.n);
        let m = &self.modulus;
        let mut t = 1;
        let mut groups = self.n;
        while groups > 1 {
            let half = groups >> 1;
            for i in 0..half {
                let (w, ws) = self.inv_roots[half + i];
                let start = 2 * i * t;
                let (lo, hi) = a[start..start + 2 * t].split_at_mut(t);
                for (x, y) in lo.iter_mut().zip(hi.iter_mut()) {
                    let u = *x;
                    let v = *y;
                    *x = m.add(u, v);
                    *y = m.mul_shoup(m.sub(u, v), w, ws);
                }
            }
            t <<= 1;
            groups = half;
        }
        let (ni, nis) = self.n_inv;
        for x in a.iter_mut() {
            *x = m.mul_shoup(*x, ni, nis);
        }
    }
}

/// Index map realising `a(X) -> a(X^g)` on transformed vectors:
/// `out[i] = in[map[i]]`. Slot `i` holds the evaluation at
/// `psi^(2 bitrev(i) + 1)`, so it takes the slot whose exponent is `g` times
/// larger.
pub fn galois_permutation(n: usize, g: u64) -> Vec<usize> {
    let bits = n.trailing_zeros();
    let mask = 2 * n as u64 - 1;
    (0..n)
        .map(|i| {
            let e = 2 * bit_reverse(i, bits) as u64 + 1;
            let target = (e * g) & mask;
            bit_reverse(((target - 1) / 2) as usize, bits)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::modarith::ntt_primes;
    use super::*;
    use proptest::prelude::*;

    fn schoolbook_negacyclic(a: &[u64], b: &[u64], m: &Modulus) -> Vec<u64> {
        let n = a.len();
        let mut out = vec![0u64; n];
        for (i, &x) in a.iter().enumerate() {
            for (j, &y) in b.iter().enumerate() {
                let p = m.mul(x, y);
                let k = i + j;
                if k < n {
                    out[k] = m.add(out[k], p);
                } else {
                    out[k - n] = m.sub(out[k - n], p);
                }
            }
        }
        out
    }

    fn table(n: usize) -> NttTable {
        NttTable::new(Modulus::new(ntt_primes(&[40], n).unwrap()[0]), n)
    }

    #[test]
    fn x_times_x_pow_n_minus_1_is_minus_one() {
        let n = 16;
        let t = table(n);
        let q = t.modulus.value();
        let mut a = vec![0u64; n];
        a[1] = 1;
        let mut b = vec![0u64; n];
        b[n - 1] = 1;
        t.forward(&mut a);
        t.forward(&mut b);
        let mut c: Vec<u64> = a
            .iter()
            .zip(&b)
            .map(|(x, y)| t.modulus.mul(*x, *y))
            .collect();
        t.inverse(&mut c);
        let mut expect = vec![0u64; n];
        expect[0] = q - 1;
        assert_eq!(c, expect);
    }

    #[test]
    fn galois_permutation_matches_coefficient_automorphism() {
        let n = 32;
        let t = table(n);
        let m = t.modulus;
        let a: Vec<u64> = (0..n as u64).map(|i| i * i + 3).collect();
        for g in [3u64, 5, 25, 2 * n as u64 - 1] {
            let mut expect = vec![0u64; n];
            for (i, &c) in a.iter().enumerate() {
                let idx = (i as u64 * g % (2 * n as u64)) as usize;
                if idx < n {
                    expect[idx] = c;
                } else {
                    expect[idx - n] = m.neg(c);
                }
            }
            t.forward(&mut expect);
            let mut fa = a.clone();
            t.forward(&mut fa);
            let permuted: Vec<u64> = galois_permutation(n, g).iter().map(|&j| fa[j]).collect();
            assert_eq!(permuted, expect, "g = {g}");
        }
    }

    proptest! {
        #[test]
        fn product_matches_schoolbook(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let n = 64;
            let t = table(n);
            let q = t.modulus.value();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<u64> = (0..n).map(|_| rng.gen_range(0..q)).collect();
            let b: Vec<u64> = (0..n).map(|_| rng.gen_range(0..q)).collect();
            let expect = schoolbook_negacyclic(&a, &b, &t.modulus);
            let (mut fa, mut fb) = (a.clone(), b.clone());
            t.forward(&mut fa);
            t.forward(&mut fb);
            let mut c: Vec<u64> = fa.iter().zip(&fb).map(|(x, y)| t.modulus.mul(*x, *y)).collect();
            t.inverse(&mut c);
            prop_assert_eq!(c, expect);
            t.inverse(&mut fa);
            prop_assert_eq!(fa, a);
        }
    }
}
