//! Plaintexts, ciphertexts and homomorphic evaluation.

use num_bigint::BigUint;
use num_traits::{ToPrimitive, Zero};
use rand::{CryptoRng, RngCore};

use super::context::{CkksContext, ContextId};
use super::keys::{
    sample_gaussian, sample_zero_one, EvaluationKeys, PublicKey, Rows, SecretKey, SwitchingKey,
};
use super::ntt::galois_permutation;
use super::CkksError;

/// Relative difference tolerated between operand scales.
pub const SCALE_TOLERANCE: f64 = 1e-6;

/// Encoded message: NTT rows over chain primes `0..=level`.
#[derive(Clone, Debug, PartialEq)]
pub struct Plaintext {
    pub(crate) rows: Rows,
    pub level: usize,
    pub scale: f64,
    pub(crate) ctx_id: ContextId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CkksCiphertext {
    /// Two polynomials, or three before relinearization; NTT form.
    pub(crate) polys: Vec<Rows>,
    pub level: usize,
    pub scale: f64,
    pub(crate) ctx_id: ContextId,
}

impl CkksCiphertext {
    pub fn size(&self) -> usize {
        self.polys.len()
    }
}

fn same_scale(a: f64, b: f64) -> bool {
    (a - b).abs() <= SCALE_TOLERANCE * a.abs().max(b.abs())
}

impl CkksContext {
    fn check_ctx(&self, id: ContextId) -> Result<(), CkksError> {
        if id == self.id() {
            Ok(())
        } else {
            Err(CkksError::Context(
                "object was created under a different context".into(),
            ))
        }
    }

    fn check_level(&self, level: usize) -> Result<(), CkksError> {
        if level > self.max_level() {
            return Err(CkksError::Level(format!(
                "level {level} exceeds the maximum {}",
                self.max_level()
            )));
        }
        Ok(())
    }

    /// Encodes up to `N/2` reals at `scale` for use at `level`.
    pub fn encode(&self, values: &[f64], level: usize, scale: f64) -> Result<Plaintext, CkksError> {
        self.encode_checked(values, level, scale, true)
    }

    /// Encoding that lets coefficients wrap modulo the chain instead of
    /// failing; the result is meaningless once they do.
    pub(crate) fn encode_wrapping(
        &self,
        values: &[f64],
        level: usize,
        scale: f64,
    ) -> Result<Plaintext, CkksError> {
        self.encode_checked(values, level, scale, false)
    }

    fn encode_checked(
        &self,
        values: &[f64],
        level: usize,
        scale: f64,
        bounded: bool,
    ) -> Result<Plaintext, CkksError> {
        if values.len() > self.slots() {
            return Err(CkksError::Capacity(format!(
                "{} values exceed {} slots",
                values.len(),
                self.slots()
            )));
        }
        self.check_level(level)?;
        if !(scale > 0.0 && scale.is_finite()) || values.iter().any(|v| !v.is_finite()) {
            return Err(CkksError::Parameter(
                "scale and values must be finite, scale positive".into(),
            ));
        }
        let coeffs = self.encoder.encode(values, scale);
        let bound = self.chain_modulus(level).to_f64().unwrap_or(f64::INFINITY) / 2.0;
        if bounded && coeffs.iter().any(|c| c.abs() >= bound) {
            return Err(CkksError::Capacity(
                "encoded values overflow the ciphertext modulus".into(),
            ));
        }
        let rows = (0..=level)
            .map(|j| {
                let q = self.modulus(j).value() as f64;
                let mut row: Vec<u64> = coeffs
                    .iter()
                    .map(|c| {
                        if c.is_finite() {
                            (c.rem_euclid(q) as u64).min(q as u64 - 1)
                        } else {
                            0
                        }
                    })
                    .collect();
                self.ntt(j).forward(&mut row);
                row
            })
            .collect();
        Ok(Plaintext {
            rows,
            level,
            scale,
            ctx_id: self.id(),
        })
    }

    /// Encodes at the default scale and top level.
    pub fn encode_default(&self, values: &[f64]) -> Result<Plaintext, CkksError> {
        self.encode(values, self.max_level(), self.default_scale())
    }

    pub fn decode(&self, pt: &Plaintext) -> Result<Vec<f64>, CkksError> {
        self.check_ctx(pt.ctx_id)?;
        let coeffs = self.centered_coefficients(&pt.rows);
        Ok(self.encoder.decode(&coeffs, pt.scale))
    }

    /// CRT-composes coefficient residues into centered reals.
    fn centered_coefficients(&self, rows: &Rows) -> Vec<f64> {
        let mut coeff_rows = rows.clone();
        for (j, row) in coeff_rows.iter_mut().enumerate() {
            self.ntt(j).inverse(row);
        }
        if coeff_rows.len() == 1 {
            let m = self.modulus(0);
            return coeff_rows[0].iter().map(|&v| m.center(v) as f64).collect();
        }
        let level = coeff_rows.len() - 1;
        let q = self.chain_modulus(level);
        let half = &q >> 1;
        let basis: Vec<BigUint> = (0..=level)
            .map(|j| {
                let qj = self.modulus(j).value();
                let rest = &q / qj;
                let rest_mod = (&rest % qj).to_u64().expect("fits");
                rest * self.modulus(j).inv(rest_mod)
            })
            .collect();
        (0..self.n())
            .map(|k| {
                let mut x = BigUint::zero();
                for (row, b) in coeff_rows.iter().zip(&basis) {
                    x += b * row[k];
                }
                x %= &q;
                if x > half {
                    -(&q - x).to_f64().unwrap_or(f64::INFINITY)
                } else {
                    x.to_f64().unwrap_or(f64::INFINITY)
                }
            })
            .collect()
    }

    pub fn encrypt<R: RngCore + CryptoRng + ?Sized>(
        &self,
        pk: &PublicKey,
        pt: &Plaintext,
        rng: &mut R,
    ) -> Result<CkksCiphertext, CkksError> {
        self.check_ctx(pk.ctx_id)?;
        self.check_ctx(pt.ctx_id)?;
        let levels = 0..=pt.level;
        let v = self.small_to_ntt(&sample_zero_one(self.n(), rng), levels.clone());
        let e0 = self.small_to_ntt(&sample_gaussian(self.n(), rng), levels.clone());
        let e1 = self.small_to_ntt(&sample_gaussian(self.n(), rng), levels.clone());
        let mut c0 = Vec::with_capacity(pt.level + 1);
        let mut c1 = Vec::with_capacity(pt.level + 1);
        for j in levels {
            let m = self.modulus(j);
            c0.push(
                (0..self.n())
                    .map(|k| m.add(m.add(m.mul(v[j][k], pk.b[j][k]), e0[j][k]), pt.rows[j][k]))
                    .collect(),
            );
            c1.push(
                (0..self.n())
                    .map(|k| m.add(m.mul(v[j][k], pk.a[j][k]), e1[j][k]))
                    .collect(),
            );
        }
        Ok(CkksCiphertext {
            polys: vec![c0, c1],
            level: pt.level,
            scale: pt.scale,
            ctx_id: self.id(),
        })
    }

    /// Secret-key encryption `(-a s + e + m, a)`. Its noise is a single
    /// error term, far below that of public-key encryption.
    pub fn encrypt_symmetric<R: RngCore + CryptoRng + ?Sized>(
        &self,
        sk: &SecretKey,
        pt: &Plaintext,
        rng: &mut R,
    ) -> Result<CkksCiphertext, CkksError> {
        self.check_ctx(sk.ctx_id)?;
        self.check_ctx(pt.ctx_id)?;
        let levels = 0..=pt.level;
        let a = self.uniform_rows(levels.clone(), rng);
        let e = self.small_to_ntt(&sample_gaussian(self.n(), rng), levels.clone());
        let c0 = levels
            .map(|j| {
                let m = self.modulus(j);
                (0..self.n())
                    .map(|k| m.add(m.sub(e[j][k], m.mul(a[j][k], sk.ntt[j][k])), pt.rows[j][k]))
                    .collect()
            })
            .collect();
        Ok(CkksCiphertext {
            polys: vec![c0, a],
            level: pt.level,
            scale: pt.scale,
            ctx_id: self.id(),
        })
    }

    pub fn decrypt(&self, sk: &SecretKey, ct: &CkksCiphertext) -> Result<Plaintext, CkksError> {
        self.check_ctx(sk.ctx_id)?;
        self.check_ctx(ct.ctx_id)?;
        let rows = (0..=ct.level)
            .map(|j| {
                let m = self.modulus(j);
                let s = &sk.ntt[j];
                (0..self.n())
                    .map(|k| {
                        // Horner in s: c0 + s (c1 + s c2)
                        let mut acc = 0u64;
                        for poly in ct.polys.iter().rev() {
                            acc = m.add(m.mul(acc, s[k]), poly[j][k]);
                        }
                        acc
                    })
                    .collect()
            })
            .collect();
        Ok(Plaintext {
            rows,
            level: ct.level,
            scale: ct.scale,
            ctx_id: self.id(),
        })
    }

    /// Decrypts and decodes.
    pub fn decrypt_values(
        &self,
        sk: &SecretKey,
        ct: &CkksCiphertext,
    ) -> Result<Vec<f64>, CkksError> {
        self.decode(&self.decrypt(sk, ct)?)
    }

    fn check_pair(
        &self,
        a: &CkksCiphertext,
        level: usize,
        scale: f64,
        id: ContextId,
    ) -> Result<(), CkksError> {
        self.check_ctx(a.ctx_id)?;
        self.check_ctx(id)?;
        if a.level != level {
            return Err(CkksError::Level(format!(
                "operand levels differ: {} vs {level}",
                a.level
            )));
        }
        if !same_scale(a.scale, scale) {
            return Err(CkksError::Scale(format!(
                "operand scales differ: {} vs {scale}",
                a.scale
            )));
        }
        Ok(())
    }

    fn combine(
        &self,
        a: &Rows,
        b: &Rows,
        op: impl Fn(&super::modarith::Modulus, u64, u64) -> u64,
    ) -> Rows {
        a.iter()
            .zip(b)
            .enumerate()
            .map(|(j, (x, y))| {
                let m = self.modulus(j);
                x.iter().zip(y).map(|(&u, &v)| op(m, u, v)).collect()
            })
            .collect()
    }

    pub fn add(&self, a: &CkksCiphertext, b: &CkksCiphertext) -> Result<CkksCiphertext, CkksError> {
        self.check_pair(a, b.level, b.scale, b.ctx_id)?;
        let size = a.polys.len().max(b.polys.len());
        let polys = (0..size)
            .map(|i| match (a.polys.get(i), b.polys.get(i)) {
                (Some(x), Some(y)) => self.combine(x, y, |m, u, v| m.add(u, v)),
                (Some(x), None) | (None, Some(x)) => x.clone(),
                (None, None) => unreachable!(),
            })
            .collect();
        Ok(CkksCiphertext {
            polys,
            level: a.level,
            scale: a.scale,
            ctx_id: a.ctx_id,
        })
    }

    pub fn sub(&self, a: &CkksCiphertext, b: &CkksCiphertext) -> Result<CkksCiphertext, CkksError> {
        let mut neg = b.clone();
        for poly in &mut neg.polys {
            for (j, row) in poly.iter_mut().enumerate() {
                let m = self.modulus(j);
                row.iter_mut().for_each(|x| *x = m.neg(*x));
            }
        }
        self.add(a, &neg)
    }

    pub fn add_plain(
        &self,
        a: &CkksCiphertext,
        pt: &Plaintext,
    ) -> Result<CkksCiphertext, CkksError> {
        self.check_pair(a, pt.level, pt.scale, pt.ctx_id)?;
        let mut out = a.clone();
        out.polys[0] = self.combine(&a.polys[0], &pt.rows, |m, u, v| m.add(u, v));
        Ok(out)
    }

    /// Multiplies by a plaintext; the output scale is the product of scales.
    pub fn mul_plain(
        &self,
        a: &CkksCiphertext,
        pt: &Plaintext,
    ) -> Result<CkksCiphertext, CkksError> {
        self.check_depth(a.level)?;
        self.mul_plain_unbounded(a, pt)
    }

    /// [`CkksContext::mul_plain`] without the check that a level remains for
    /// rescaling.
    pub(crate) fn mul_plain_unbounded(
        &self,
        a: &CkksCiphertext,
        pt: &Plaintext,
    ) -> Result<CkksCiphertext, CkksError> {
        self.check_ctx(a.ctx_id)?;
        self.check_ctx(pt.ctx_id)?;
        if a.level != pt.level {
            return Err(CkksError::Level(format!(
                "operand levels differ: {} vs {}",
                a.level, pt.level
            )));
        }
        let polys = a
            .polys
            .iter()
            .map(|p| self.combine(p, &pt.rows, |m, u, v| m.mul(u, v)))
            .collect();
        Ok(CkksCiphertext {
            polys,
            level: a.level,
            scale: a.scale * pt.scale,
            ctx_id: a.ctx_id,
        })
    }

    fn check_depth(&self, level: usize) -> Result<(), CkksError> {
        if level == 0 {
            return Err(CkksError::Depth(
                "no level left to rescale a product".into(),
            ));
        }
        Ok(())
    }

    /// Ciphertext product followed by relinearization.
    pub fn mul(
        &self,
        a: &CkksCiphertext,
        b: &CkksCiphertext,
        keys: &EvaluationKeys,
    ) -> Result<CkksCiphertext, CkksError> {
        let raw = self.mul_no_relin(a, b)?;
        self.relinearize(&raw, keys)
    }

    pub fn mul_no_relin(
        &self,
        a: &CkksCiphertext,
        b: &CkksCiphertext,
    ) -> Result<CkksCiphertext, CkksError> {
        self.check_depth(a.level)?;
        self.mul_no_relin_unbounded(a, b)
    }

    /// [`CkksContext::mul`] without the check that a level remains for
    /// rescaling.
    pub(crate) fn mul_unbounded(
        &self,
        a: &CkksCiphertext,
        b: &CkksCiphertext,
        keys: &EvaluationKeys,
    ) -> Result<CkksCiphertext, CkksError> {
        let raw = self.mul_no_relin_unbounded(a, b)?;
        self.relinearize(&raw, keys)
    }

    fn mul_no_relin_unbounded(
        &self,
        a: &CkksCiphertext,
        b: &CkksCiphertext,
    ) -> Result<CkksCiphertext, CkksError> {
        self.check_ctx(a.ctx_id)?;
        self.check_ctx(b.ctx_id)?;
        if a.level != b.level {
            return Err(CkksError::Level(format!(
                "operand levels differ: {} vs {}",
                a.level, b.level
            )));
        }
        if a.polys.len() != 2 || b.polys.len() != 2 {
            return Err(CkksError::Parameter(
                "multiply relinearized ciphertexts only".into(),
            ));
        }
        let mul = |x: &Rows, y: &Rows| self.combine(x, y, |m, u, v| m.mul(u, v));
        let add = |x: &Rows, y: &Rows| self.combine(x, y, |m, u, v| m.add(u, v));
        let d0 = mul(&a.polys[0], &b.polys[0]);
        let d1 = add(
            &mul(&a.polys[0], &b.polys[1]),
            &mul(&a.polys[1], &b.polys[0]),
        );
        let d2 = mul(&a.polys[1], &b.polys[1]);
        Ok(CkksCiphertext {
            polys: vec![d0, d1, d2],
            level: a.level,
            scale: a.scale * b.scale,
            ctx_id: a.ctx_id,
        })
    }

    pub fn relinearize(
        &self,
        ct: &CkksCiphertext,
        keys: &EvaluationKeys,
    ) -> Result<CkksCiphertext, CkksError> {
        self.check_ctx(ct.ctx_id)?;
        self.check_ctx(keys.ctx_id)?;
        if ct.polys.len() == 2 {
            return Ok(ct.clone());
        }
        let mut d2 = ct.polys[2].clone();
        self.to_coeff(&mut d2);
        let (k0, k1) = keys.relin.switch(self, &d2, &ct.polys[2]);
        let c0 = self.combine(&ct.polys[0], &k0, |m, u, v| m.add(u, v));
        let c1 = self.combine(&ct.polys[1], &k1, |m, u, v| m.add(u, v));
        Ok(CkksCiphertext {
            polys: vec![c0, c1],
            level: ct.level,
            scale: ct.scale,
            ctx_id: ct.ctx_id,
        })
    }

    fn to_coeff(&self, rows: &mut Rows) {
        for (j, row) in rows.iter_mut().enumerate() {
            self.ntt(j).inverse(row);
        }
    }

    /// Divides by the top chain prime, dropping one level.
    pub fn rescale(&self, ct: &CkksCiphertext) -> Result<CkksCiphertext, CkksError> {
        self.check_ctx(ct.ctx_id)?;
        let level = ct.level;
        if level == 0 {
            return Err(CkksError::Depth("cannot rescale at level 0".into()));
        }
        let top = self.modulus(level);
        let polys = ct
            .polys
            .iter()
            .map(|poly| {
                let mut last = poly[level].clone();
                self.ntt(level).inverse(&mut last);
                let centered: Vec<i64> = last.iter().map(|&v| top.center(v)).collect();
                let mut tmp = vec![0u64; self.n()];
                (0..level)
                    .map(|j| {
                        let m = self.modulus(j);
                        for (t, &c) in tmp.iter_mut().zip(&centered) {
                            *t = m.reduce_i64(c);
                        }
                        self.ntt(j).forward(&mut tmp);
                        let inv = self.rescale_inv(level, j);
                        let inv_s = m.shoup(inv);
                        poly[j]
                            .iter()
                            .zip(&tmp)
                            .map(|(&x, &t)| m.mul_shoup(m.sub(x, t), inv, inv_s))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Ok(CkksCiphertext {
            polys,
            level: level - 1,
            scale: ct.scale / top.value() as f64,
            ctx_id: ct.ctx_id,
        })
    }

    /// Drops chain primes down to `level` without changing the scale.
    pub fn mod_drop(&self, ct: &CkksCiphertext, level: usize) -> Result<CkksCiphertext, CkksError> {
        if level > ct.level {
            return Err(CkksError::Level(format!(
                "cannot raise level {} to {level}",
                ct.level
            )));
        }
        let mut out = ct.clone();
        for poly in &mut out.polys {
            poly.truncate(level + 1);
        }
        out.level = level;
        Ok(out)
    }

    /// Rotates slots left by `steps` (cyclically over `N/2` slots). Uses the
    /// key for the exact step when present, otherwise composes power-of-two
    /// rotations.
    pub fn rotate(
        &self,
        ct: &CkksCiphertext,
        steps: usize,
        keys: &EvaluationKeys,
    ) -> Result<CkksCiphertext, CkksError> {
        self.check_ctx(ct.ctx_id)?;
        self.check_ctx(keys.ctx_id)?;
        let steps = steps % self.slots();
        if steps == 0 {
            return Ok(ct.clone());
        }
        if let Some(key) = keys.galois.get(&self.galois_element(steps)) {
            return self.apply_galois(ct, self.galois_element(steps), key);
        }
        let mut out = ct.clone();
        let mut bit = 1usize;
        while bit <= steps {
            if steps & bit != 0 {
                let g = self.galois_element(bit);
                let key = keys.galois.get(&g).ok_or_else(|| {
                    CkksError::Key(format!(
                        "no Galois key for rotation by {bit} (needed for {steps})"
                    ))
                })?;
                out = self.apply_galois(&out, g, key)?;
            }
            bit <<= 1;
        }
        Ok(out)
    }

    fn apply_galois(
        &self,
        ct: &CkksCiphertext,
        g: u64,
        key: &SwitchingKey,
    ) -> Result<CkksCiphertext, CkksError> {
        if ct.polys.len() != 2 {
            return Err(CkksError::Parameter(
                "rotate relinearized ciphertexts only".into(),
            ));
        }
        let perm = galois_permutation(self.n(), g);
        let permute = |poly: &Rows| -> Rows {
            poly.iter()
                .map(|row| perm.iter().map(|&i| row[i]).collect())
                .collect()
        };
        let c0 = permute(&ct.polys[0]);
        let c1 = permute(&ct.polys[1]);
        let mut c1_coeff = c1.clone();
        self.to_coeff(&mut c1_coeff);
        let (k0, k1) = key.switch(self, &c1_coeff, &c1);
        let c0 = self.combine(&c0, &k0, |m, u, v| m.add(u, v));
        Ok(CkksCiphertext {
            polys: vec![c0, k1],
            level: ct.level,
            scale: ct.scale,
            ctx_id: ct.ctx_id,
        })
    }
}
