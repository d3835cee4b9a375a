//! Word-size modular arithmetic for primes below 2^62.

/// A prime modulus with precomputed Barrett constants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Modulus {
    q: u64,
    /// floor(2^128 / q) as (low, high) words.
    ratio: (u64, u64),
}

impl Modulus {
    pub fn new(q: u64) -> Self {
        assert!(q > 1 && q < 1 << 62, "modulus must be in (1, 2^62)");
        let r = u128::MAX / q as u128;
        // u128::MAX / q equals floor(2^128 / q) unless q divides 2^128, which no odd q > 1 does
        Modulus {
            q,
            ratio: (r as u64, (r >> 64) as u64),
        }
    }

    #[inline]
    pub fn value(&self) -> u64 {
        self.q
    }

    /// Maps `[0, 2q)` to `[0, q)` without a data-dependent branch.
    #[inline(always)]
    fn fold(&self, x: u64) -> u64 {
        // x - q wraps to a huge value exactly when x < q
        x.min(x.wrapping_sub(self.q))
    }

    #[inline(always)]
    pub fn add(&self, a: u64, b: u64) -> u64 {
        self.fold(a + b)
    }

    #[inline(always)]
    pub fn sub(&self, a: u64, b: u64) -> u64 {
        self.fold(a + self.q - b)
    }

    #[inline]
    pub fn neg(&self, a: u64) -> u64 {
        if a == 0 {
            0
        } else {
            self.q - a
        }
    }

    /// Barrett reduction of a 128-bit value.
    #[inline(always)]
    pub fn reduce_u128(&self, x: u128) -> u64 {
        let x0 = x as u64;
        let x1 = (x >> 64) as u64;
        let (r0, r1) = self.ratio;
        let carry = ((x0 as u128 * r0 as u128) >> 64) as u64;
        let t = x0 as u128 * r1 as u128;
        let (t_lo, c) = (t as u64).overflowing_add(carry);
        let t_hi = (t >> 64) as u64 + c as u64;
        let t2 = x1 as u128 * r0 as u128;
        let (_, c2) = t_lo.overflowing_add(t2 as u64);
        let carry2 = (t2 >> 64) as u64 + c2 as u64;
        let quotient = x1.wrapping_mul(r1).wrapping_add(t_hi).wrapping_add(carry2);
        self.fold(x0.wrapping_sub(quotient.wrapping_mul(self.q)))
    }

    #[inline]
    pub fn reduce(&self, x: u64) -> u64 {
        if x >= self.q {
            self.reduce_u128(x as u128)
        } else {
            x
        }
    }

    /// Reduces a signed value into `[0, q)`.
    #[inline]
    pub fn reduce_i64(&self, x: i64) -> u64 {
        if x >= 0 {
            self.reduce(x as u64)
        } else {
            self.neg(self.reduce(x.unsigned_abs()))
        }
    }

    #[inline(always)]
    pub fn mul(&self, a: u64, b: u64) -> u64 {
        self.reduce_u128(a as u128 * b as u128)
    }

    /// Precomputation for [`Modulus::mul_shoup`]: floor(w * 2^64 / q).
    #[inline]
    pub fn shoup(&self, w: u64) -> u64 {
        (((w as u128) << 64) / self.q as u128) as u64
    }

    /// `a * w mod q` given `w_shoup = shoup(w)`; `a` may be any value below 2^64.
    #[inline(always)]
    pub fn mul_shoup(&self, a: u64, w: u64, w_shoup: u64) -> u64 {
        let hi = ((a as u128 * w_shoup as u128) >> 64) as u64;
        self.fold(a.wrapping_mul(w).wrapping_sub(hi.wrapping_mul(self.q)))
    }

    pub fn pow(&self, mut base: u64, mut exp: u64) -> u64 {
        let mut acc = 1u64;
        base = self.reduce(base);
        while exp > 0 {
            if exp & 1 == 1 {
                acc = self.mul(acc, base);
            }
            base = self.mul(base, base);
            exp >>= 1;
        }
        acc
    }

    /// Inverse by Fermat; `q` is prime.
    pub fn inv(&self, a: u64) -> u64 {
        let a = self.reduce(a);
        assert!(a != 0, "zero has no inverse");
        self.pow(a, self.q - 2)
    }

    /// Maps `[0, q)` to the centered representative in `(-q/2, q/2]`.
    #[inline]
    pub fn center(&self, a: u64) -> i64 {
        if a > self.q / 2 {
            a as i64 - self.q as i64
        } else {
            a as i64
        }
    }
}

/// Deterministic Miller-Rabin for 64-bit integers.
pub fn is_prime_u64(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    for p in [2u64, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        if n.is_multiple_of(p) {
            return n == p;
        }
    }
    let mulmod = |a: u64, b: u64| ((a as u128 * b as u128) % n as u128) as u64;
    let powmod = |mut b: u64, mut e: u64| {
        let mut acc = 1u64;
        while e > 0 {
            if e & 1 == 1 {
                acc = mulmod(acc, b);
            }
            b = mulmod(b, b);
            e >>= 1;
        }
        acc
    };
    let mut d = n - 1;
    let mut s = 0;
    while d.is_multiple_of(2) {
        d /= 2;
        s += 1;
    }
    'witness: for a in [2u64, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        let mut x = powmod(a, d);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..s {
            x = mulmod(x, x);
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// For each requested size, the largest unused prime `p < 2^bits` with
/// `p ≡ 1 (mod 2n)`.
pub fn ntt_primes(bits: &[u32], n: usize) -> Result<Vec<u64>, String> {
    let step = 2 * n as u64;
    let mut chosen: Vec<u64> = Vec::with_capacity(bits.len());
    for &b in bits {
        if !(2..=61).contains(&b) {
            return Err(format!("modulus size {b} bits is outside [2, 61]"));
        }
        let top = 1u64 << b;
        if top <= step {
            return Err(format!("{b}-bit modulus cannot be 1 mod {step}"));
        }
        let mut p = (top - 1) / step * step + 1;
        let floor = 1u64 << (b - 1);
        loop {
            if p >= top {
                p -= step;
                continue;
            }
            if p < floor {
                return Err(format!(
                    "ran out of {b}-bit primes congruent to 1 mod {step}"
                ));
            }
            if !chosen.contains(&p) && is_prime_u64(p) {
                chosen.push(p);
                break;
            }
            p -= step;
        }
    }
    Ok(chosen)
}

/// A primitive `order`-th root of unity mod prime `q` (`order` a power of two
/// dividing `q - 1`).
pub fn primitive_root_of_unity(m: &Modulus, order: u64) -> u64 {
    let q = m.value();
    assert_eq!((q - 1) % order, 0);
    let cofactor = (q - 1) / order;
    for g in 2..q {
        let w = m.pow(g, cofactor);
        // primitive iff w^(order/2) = -1
        if m.pow(w, order / 2) == q - 1 {
            return w;
        }
    }
    unreachable!("a prime field has a generator")
}
