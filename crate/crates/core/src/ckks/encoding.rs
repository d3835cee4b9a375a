//! Canonical-embedding slot encoding.
//!
//! Slot `j` holds the evaluation of the message polynomial at `ζ^(5^j)`,
//! where `ζ = exp(iπ/N)`. The special FFT below evaluates and interpolates
//! over exactly those points in `O(N log N)`.

use num_complex::Complex64;

#[derive(Debug)]
pub(crate) struct SlotEncoder {
    n: usize,
    /// ζ^k for k in 0..=2N.
    ksi: Vec<Complex64>,
    /// 5^j mod 2N for j in 0..N/2.
    rot_group: Vec<usize>,
}

fn bit_reverse_permute<T>(v: &mut [T]) {
    let n = v.len();
    let mut j = 0;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            v.swap(i, j);
        }
    }
}

impl SlotEncoder {
    pub fn new(n: usize) -> Self {
        let m = 2 * n;
        let ksi = (0..=m)
            .map(|k| Complex64::from_polar(1.0, std::f64::consts::TAU * k as f64 / m as f64))
            .collect();
        let mut rot_group = Vec::with_capacity(n / 2);
        let mut g = 1usize;
        for _ in 0..n / 2 {
            rot_group.push(g);
            g = g * 5 % m;
        }
        SlotEncoder { n, ksi, rot_group }
    }

    fn fft_special(&self, vals: &mut [Complex64]) {
        let size = vals.len();
        let m = 2 * self.n;
        bit_reverse_permute(vals);
        let mut len = 2;
        while len <= size {
            let half = len / 2;
            let quad = len * 4;
            let gap = m / quad;
            for i in (0..size).step_by(len) {
                for j in 0..half {
                    let idx = (self.rot_group[j] % quad) * gap;
                    let u = vals[i + j];
                    let v = vals[i + j + half] * self.ksi[idx];
                    vals[i + j] = u + v;
                    vals[i + j + half] = u - v;
                }
            }
            len <<= 1;
        }
    }

    fn fft_special_inv(&self, vals: &mut [Complex64]) {
        let size = vals.len();
        let m = 2 * self.n;
        let mut len = size;
        while len >= 2 {
            let half = len / 2;
            let quad = len * 4;
            let gap = m / quad;
            for i in (0..size).step_by(len) {
                for j in 0..half {
                    let idx = (quad - self.rot_group[j] % quad) * gap;
                    let u = vals[i + j] + vals[i + j + half];
                    let v = (vals[i + j] - vals[i + j + half]) * self.ksi[idx];
                    vals[i + j] = u;
                    vals[i + j + half] = v;
                }
            }
            len >>= 1;
        }
        bit_reverse_permute(vals);
        let inv = 1.0 / size as f64;
        for v in vals.iter_mut() {
            *v *= inv;
        }
    }

    /// Rounded integer coefficients (as `f64`) of the polynomial whose slots
    /// hold `values * scale`; unused slots are zero.
    pub fn encode(&self, values: &[f64], scale: f64) -> Vec<f64> {
        let slots = self.n / 2;
        debug_assert!(values.len() <= slots);
        let mut vals = vec![Complex64::new(0.0, 0.0); slots];
        for (v, x) in vals.iter_mut().zip(values) {
            *v = Complex64::new(*x, 0.0);
        }
        self.fft_special_inv(&mut vals);
        let mut coeffs = vec![0.0; self.n];
        for (i, v) in vals.iter().enumerate() {
            coeffs[i] = (v.re * scale).round();
            coeffs[i + slots] = (v.im * scale).round();
        }
        coeffs
    }

    /// Real parts of the slots of a polynomial given by centered coefficients.
    pub fn decode(&self, coeffs: &[f64], scale: f64) -> Vec<f64> {
        let slots = self.n / 2;
        let mut vals: Vec<Complex64> = (0..slots)
            .map(|i| Complex64::new(coeffs[i] / scale, coeffs[i + slots] / scale))
            .collect();
        self.fft_special(&mut vals);
        vals.into_iter().map(|v| v.re).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct evaluation of the coefficient polynomial at ζ^(5^j).
    fn evaluate_at_slots(coeffs: &[f64], n: usize) -> Vec<Complex64> {
        let m = 2 * n;
        (0..n / 2)
            .map(|j| {
                let mut e = 1usize;
                for _ in 0..j {
                    e = e * 5 % m;
                }
                coeffs
                    .iter()
                    .enumerate()
                    .map(|(k, c)| {
                        Complex64::from_polar(
                            *c,
                            std::f64::consts::TAU * ((e * k) % m) as f64 / m as f64,
                        )
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn matches_direct_evaluation() {
        let n = 32;
        let enc = SlotEncoder::new(n);
        let values: Vec<f64> = (0..n / 2).map(|i| (i as f64 * 0.37).sin() * 5.0).collect();
        let scale = 2f64.powi(20);
        let coeffs = enc.encode(&values, scale);
        let direct = evaluate_at_slots(&coeffs, n);
        for (z, v) in direct.iter().zip(&values) {
            assert!((z.re / scale - v).abs() < 1e-4, "{z} vs {v}");
            assert!(z.im.abs() / scale < 1e-4);
        }
        let decoded = enc.decode(&coeffs, scale);
        for (d, z) in decoded.iter().zip(&direct) {
            assert!((d - z.re / scale).abs() < 1e-9);
        }
    }

    #[test]
    fn round_trip_small_vector() {
        let enc = SlotEncoder::new(1 << 14);
        let scale = 2f64.powi(30);
        let out = enc.decode(&enc.encode(&[1.0, 2.0, 3.0], scale), scale);
        for (o, v) in out.iter().zip([1.0, 2.0, 3.0]) {
            assert!((o - v).abs() < 1e-6);
        }
        assert!(out[3..].iter().all(|x| x.abs() < 1e-6));
        let zero = enc.decode(&enc.encode(&[0.0; 10], scale), scale);
        assert!(zero.iter().all(|x| x.abs() < 1e-9));
    }
}
