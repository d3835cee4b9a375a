//! Binary formats.
//!
//! Ciphertext: big-endian header `N: u32, level: u32, scale: f64 bits,
//! polys: u32`, then for each polynomial and each chain prime up to the
//! level, the `N` coefficient-form residues, each in `ceil(bits(q)/8)` bytes.
//!
//! Keys reuse the residue layout (NTT form); switching keys carry the seed of
//! their uniform components instead of the components themselves.

use std::collections::BTreeMap;

use super::context::CkksContext;
use super::eval::CkksCiphertext;
use super::keys::{EvaluationKeys, PublicKey, Rows, SecretKey, SwitchingKey};
use super::CkksError;

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CkksError> {
        if self.buf.len() < n {
            return Err(CkksError::Encoding("truncated input".into()));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, CkksError> {
        Ok(u32::from_be_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, CkksError> {
        Ok(u64::from_be_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn finish(&self) -> Result<(), CkksError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(CkksError::Encoding("trailing bytes".into()))
        }
    }
}

fn width(q: u64) -> usize {
    (64 - q.leading_zeros() as usize).div_ceil(8)
}

impl CkksContext {
    fn write_row(&self, out: &mut Vec<u8>, row: &[u64], j: usize) {
        let w = width(self.modulus(j).value());
        for &v in row {
            out.extend_from_slice(&v.to_be_bytes()[8 - w..]);
        }
    }

    fn read_row(&self, r: &mut Reader<'_>, j: usize) -> Result<Vec<u64>, CkksError> {
        let q = self.modulus(j).value();
        let w = width(q);
        let bytes = r.take(w * self.n())?;
        bytes
            .chunks_exact(w)
            .map(|c| {
                let mut buf = [0u8; 8];
                buf[8 - w..].copy_from_slice(c);
                let v = u64::from_be_bytes(buf);
                if v < q {
                    Ok(v)
                } else {
                    Err(CkksError::Encoding("residue out of range".into()))
                }
            })
            .collect()
    }

    fn write_rows(&self, out: &mut Vec<u8>, rows: &Rows, indices: impl IntoIterator<Item = usize>) {
        for (row, j) in rows.iter().zip(indices) {
            self.write_row(out, row, j);
        }
    }

    fn read_rows(
        &self,
        r: &mut Reader<'_>,
        indices: impl IntoIterator<Item = usize>,
    ) -> Result<Rows, CkksError> {
        indices.into_iter().map(|j| self.read_row(r, j)).collect()
    }

    pub fn ciphertext_to_bytes(&self, ct: &CkksCiphertext) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.n() as u32).to_be_bytes());
        out.extend_from_slice(&(ct.level as u32).to_be_bytes());
        out.extend_from_slice(&ct.scale.to_bits().to_be_bytes());
        out.extend_from_slice(&(ct.polys.len() as u32).to_be_bytes());
        for poly in &ct.polys {
            for (j, row) in poly.iter().enumerate() {
                let mut coeff = row.clone();
                self.ntt(j).inverse(&mut coeff);
                self.write_row(&mut out, &coeff, j);
            }
        }
        out
    }

    pub fn ciphertext_from_bytes(&self, bytes: &[u8]) -> Result<CkksCiphertext, CkksError> {
        let mut r = Reader { buf: bytes };
        let n = r.u32()? as usize;
        if n != self.n() {
            return Err(CkksError::Context(format!(
                "ciphertext ring degree {n} does not match {}",
                self.n()
            )));
        }
        let level = r.u32()? as usize;
        if level > self.max_level() {
            return Err(CkksError::Encoding(format!(
                "level {level} exceeds the chain"
            )));
        }
        let scale = f64::from_bits(r.u64()?);
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(CkksError::Encoding(
                "scale must be positive and finite".into(),
            ));
        }
        let count = r.u32()? as usize;
        if !(2..=3).contains(&count) {
            return Err(CkksError::Encoding(format!(
                "{count} polynomials in a ciphertext"
            )));
        }
        let mut polys = Vec::with_capacity(count);
        for _ in 0..count {
            let mut rows = self.read_rows(&mut r, 0..=level)?;
            for (j, row) in rows.iter_mut().enumerate() {
                self.ntt(j).forward(row);
            }
            polys.push(rows);
        }
        r.finish()?;
        Ok(CkksCiphertext {
            polys,
            level,
            scale,
            ctx_id: self.id(),
        })
    }

    pub fn public_key_to_bytes(&self, pk: &PublicKey) -> Vec<u8> {
        let mut out = Vec::new();
        let chain = || 0..self.special_index();
        self.write_rows(&mut out, &pk.b, chain());
        self.write_rows(&mut out, &pk.a, chain());
        out
    }

    pub fn public_key_from_bytes(&self, bytes: &[u8]) -> Result<PublicKey, CkksError> {
        let mut r = Reader { buf: bytes };
        let b = self.read_rows(&mut r, 0..self.special_index())?;
        let a = self.read_rows(&mut r, 0..self.special_index())?;
        r.finish()?;
        Ok(PublicKey {
            b,
            a,
            ctx_id: self.id(),
        })
    }

    fn write_switching_key(&self, out: &mut Vec<u8>, key: &SwitchingKey) {
        out.extend_from_slice(&key.seed);
        for b in &key.b {
            self.write_rows(out, b, self.key_indices());
        }
    }

    fn read_switching_key(&self, r: &mut Reader<'_>) -> Result<SwitchingKey, CkksError> {
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let b = (0..self.gadget_digits().len())
            .map(|_| self.read_rows(r, self.key_indices()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(SwitchingKey::from_parts(self, b, seed))
    }

    /// Relinearization key, then `count: u32` Galois keys each prefixed by
    /// its element as `u64`.
    pub fn evaluation_keys_to_bytes(&self, keys: &EvaluationKeys) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_switching_key(&mut out, &keys.relin);
        out.extend_from_slice(&(keys.galois.len() as u32).to_be_bytes());
        for (g, key) in &keys.galois {
            out.extend_from_slice(&g.to_be_bytes());
            self.write_switching_key(&mut out, key);
        }
        out
    }

    pub fn evaluation_keys_from_bytes(&self, bytes: &[u8]) -> Result<EvaluationKeys, CkksError> {
        let mut r = Reader { buf: bytes };
        let relin = self.read_switching_key(&mut r)?;
        let count = r.u32()?;
        let mut galois = BTreeMap::new();
        for _ in 0..count {
            let g = r.u64()?;
            if g % 2 == 0 || g >= 2 * self.n() as u64 {
                return Err(CkksError::Encoding(format!("invalid Galois element {g}")));
            }
            galois.insert(g, self.read_switching_key(&mut r)?);
        }
        r.finish()?;
        Ok(EvaluationKeys {
            relin,
            galois,
            ctx_id: self.id(),
        })
    }

    /// One signed byte per coefficient.
    pub fn secret_key_to_bytes(&self, sk: &SecretKey) -> Vec<u8> {
        sk.coeffs.iter().map(|&c| c as i8 as u8).collect()
    }

    pub fn secret_key_from_bytes(&self, bytes: &[u8]) -> Result<SecretKey, CkksError> {
        SecretKey::from_coefficients(self, bytes.iter().map(|&b| b as i8 as i64).collect())
    }
}
