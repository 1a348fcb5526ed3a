//! Square QAM constellations, Gray bit mapping, and the scalar MMSE
//! denoiser over the real component set.
//!
//! Bit convention (fixed here because cross-implementation bit-exactness
//! depends on it): each symbol consumes `bits_per_symbol` bits, MSB first;
//! the first half of the group selects the in-phase rail and the second
//! half the quadrature rail. On each rail the bit group is a Gray code
//! `g`; it is decoded to a binary index `k` and mapped to the amplitude
//! `real_set[side - 1 - k]`, so the all-zeros group sits at the most
//! positive amplitude. Points are indexed by their full bit label
//! `(g_i << half_bits) | g_q`.

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Square QAM constellation with unit average symbol energy.
#[derive(Debug, Clone)]
pub struct Constellation {
    order: usize,
    bits_per_symbol: usize,
    /// Amplitudes of one rail, strictly increasing and symmetric about 0.
    real_set: Vec<f64>,
    /// Points indexed by bit label.
    points: Vec<Complex64>,
}

fn gray_to_binary(g: usize) -> usize {
    let mut b = g;
    b ^= b >> 1;
    b ^= b >> 2;
    b ^= b >> 4;
    b
}

impl Constellation {
    /// Builds a Gray-coded square QAM constellation of the given order,
    /// normalized to unit average symbol energy.
    pub fn new(order: usize) -> Result<Self> {
        if !matches!(order, 4 | 16 | 64) {
            return Err(Error::UnsupportedOrder(order));
        }
        let side = (order as f64).sqrt() as usize;
        let bits_per_symbol = order.trailing_zeros() as usize;
        // Rail levels ±1, ±3, ...; average symbol energy 2(order-1)/3.
        let norm = (2.0 * (order as f64 - 1.0) / 3.0).sqrt();
        let real_set: Vec<f64> = (0..side)
            .map(|k| (2.0 * k as f64 - (side as f64 - 1.0)) / norm)
            .collect();
        let half = bits_per_symbol / 2;
        let amp = |g: usize| real_set[side - 1 - gray_to_binary(g)];
        let points: Vec<Complex64> = (0..order)
            .map(|label| Complex64::new(amp(label >> half), amp(label & (side - 1))))
            .collect();
        let c = Self { order, bits_per_symbol, real_set, points };
        debug_assert!((c.mean_energy() - 1.0).abs() < 1e-12);
        Ok(c)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn bits_per_symbol(&self) -> usize {
        self.bits_per_symbol
    }

    /// Amplitudes of the real component set, ascending.
    pub fn real_set(&self) -> &[f64] {
        &self.real_set
    }

    /// Points indexed by bit label.
    pub fn points(&self) -> &[Complex64] {
        &self.points
    }

    fn mean_energy(&self) -> f64 {
        self.points.iter().map(|p| p.norm_sqr()).sum::<f64>() / self.order as f64
    }

    fn rail_amp(&self, g: usize) -> f64 {
        self.real_set[self.real_set.len() - 1 - gray_to_binary(g)]
    }

    /// Nearest rail amplitude; ties resolve to the smaller Gray group,
    /// which keeps the full-symbol tie-break at the smaller point label.
    fn rail_demap(&self, x: f64) -> usize {
        let side = self.real_set.len();
        let mut best_g = 0usize;
        let mut best_d = f64::INFINITY;
        for g in 0..side {
            let d = (x - self.rail_amp(g)).powi(2);
            if d < best_d {
                best_d = d;
                best_g = g;
            }
        }
        best_g
    }

    /// Maps a bit sequence to complex symbols. The length must be a
    /// multiple of `bits_per_symbol`.
    pub fn map_bits(&self, bits: &[u8]) -> Result<Vec<Complex64>> {
        if bits.len() % self.bits_per_symbol != 0 {
            return Err(Error::InvalidInput(format!(
                "bit count {} is not a multiple of bits_per_symbol {}",
                bits.len(),
                self.bits_per_symbol
            )));
        }
        Ok(bits
            .chunks_exact(self.bits_per_symbol)
            .map(|group| {
                let label = group.iter().fold(0usize, |acc, &b| (acc << 1) | (b & 1) as usize);
                self.points[label]
            })
            .collect())
    }

    /// Hard decision: nearest constellation point in Euclidean distance,
    /// ties toward the smaller point label, then inverse Gray mapping.
    pub fn demap_hard(&self, symbols: &[Complex64]) -> Vec<u8> {
        let half = self.bits_per_symbol / 2;
        let mut bits = Vec::with_capacity(symbols.len() * self.bits_per_symbol);
        for s in symbols {
            let label = (self.rail_demap(s.re) << half) | self.rail_demap(s.im);
            for k in (0..self.bits_per_symbol).rev() {
                bits.push(((label >> k) & 1) as u8);
            }
        }
        bits
    }

    /// Posterior mean and second moment of one real component under a
    /// Gaussian observation `r` with variance `tau2`, prior uniform over
    /// the real component set. Weights are computed with max-subtraction
    /// so small `tau2` cannot overflow.
    pub fn mmse_denoise(&self, r: f64, tau2: f64) -> Result<(f64, f64)> {
        if !(tau2 > 0.0) {
            return Err(Error::InvalidInput(format!("tau2 must be positive, got {tau2}")));
        }
        Ok(self.posterior_moments(r, tau2))
    }

    /// Hot-path version of [`mmse_denoise`](Self::mmse_denoise); the caller
    /// guarantees `tau2 > 0`.
    pub(crate) fn posterior_moments(&self, r: f64, tau2: f64) -> (f64, f64) {
        let inv = 1.0 / (2.0 * tau2);
        let mut max_e = f64::NEG_INFINITY;
        for &a in &self.real_set {
            let e = -(a - r) * (a - r) * inv;
            if e > max_e {
                max_e = e;
            }
        }
        let (mut w_sum, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for &a in &self.real_set {
            let w = (-(a - r) * (a - r) * inv - max_e).exp();
            w_sum += w;
            m1 += w * a;
            m2 += w * a * a;
        }
        (m1 / w_sum, m2 / w_sum)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn qpsk_real_set() {
        let c = Constellation::new(4).unwrap();
        let a = 1.0 / 2.0f64.sqrt();
        assert!((c.real_set()[0] + a).abs() < 1e-15);
        assert!((c.real_set()[1] - a).abs() < 1e-15);
    }

    #[test]
    fn qam16_real_set() {
        let c = Constellation::new(16).unwrap();
        let norm = 10.0f64.sqrt();
        for (got, want) in c.real_set().iter().zip([-3.0, -1.0, 1.0, 3.0]) {
            assert!((got - want / norm).abs() < 1e-15);
        }
    }

    #[test]
    fn unit_energy_and_symmetry() {
        for order in [4, 16, 64] {
            let c = Constellation::new(order).unwrap();
            assert!((c.mean_energy() - 1.0).abs() < 1e-12);
            let set = c.real_set();
            for k in 0..set.len() {
                assert!((set[k] + set[set.len() - 1 - k]).abs() < 1e-15);
                if k > 0 {
                    assert!(set[k] > set[k - 1]);
                }
            }
            // Points are exactly the product set of the rails.
            for p in c.points() {
                assert!(set.iter().any(|&a| a == p.re));
                assert!(set.iter().any(|&a| a == p.im));
            }
        }
    }

    #[test]
    fn unsupported_order_names_supported_set() {
        let err = Constellation::new(8).unwrap_err().to_string();
        assert!(err.contains("4, 16, 64"), "{err}");
    }

    #[test]
    fn qpsk_mapping_convention() {
        let c = Constellation::new(4).unwrap();
        let a = 1.0 / 2.0f64.sqrt();
        let syms = c.map_bits(&[0, 0, 1, 1]).unwrap();
        assert!((syms[0] - Complex64::new(a, a)).norm() < 1e-15);
        assert!((syms[1] - Complex64::new(-a, -a)).norm() < 1e-15);
    }

    #[test]
    fn map_length_mismatch() {
        let c = Constellation::new(16).unwrap();
        assert!(c.map_bits(&[0, 1, 0]).is_err());
    }

    #[test]
    fn map_demap_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for order in [4usize, 16, 64] {
            let c = Constellation::new(order).unwrap();
            let n = 10_000 - (10_000 % c.bits_per_symbol());
            let bits: Vec<u8> = (0..n).map(|_| rng.random_range(0..2u8)).collect();
            let syms = c.map_bits(&bits).unwrap();
            assert_eq!(c.demap_hard(&syms), bits);
        }
    }

    #[test]
    fn demap_origin_tie_breaks_to_point_zero() {
        let c = Constellation::new(4).unwrap();
        let bits = c.demap_hard(&[Complex64::new(0.0, 0.0)]);
        assert_eq!(bits, vec![0, 0]);
    }

    #[test]
    fn demap_tolerates_small_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for order in [4usize, 16, 64] {
            let c = Constellation::new(order).unwrap();
            let min_dist = c.real_set()[1] - c.real_set()[0];
            for label in 0..order {
                let p = c.points()[label];
                let dx: f64 = rng.random_range(-0.49..0.49) * min_dist;
                let dy: f64 = rng.random_range(-0.49..0.49) * min_dist;
                let got = c.demap_hard(&[p + Complex64::new(dx, dy)]);
                let want = c.demap_hard(&[p]);
                assert_eq!(got, want);
            }
        }
    }

    #[test]
    fn denoiser_two_point_closed_form() {
        let c = Constellation::new(4).unwrap();
        let a = 1.0 / 2.0f64.sqrt();
        let (r, tau2) = (1.0, 1.0);
        let (mean, _) = c.mmse_denoise(r, tau2).unwrap();
        assert!((mean - a * (a * r / tau2).tanh()).abs() < 1e-12);
        // Cross-check against the direct weighted sum.
        let w_p = (-(a - r) * (a - r) / (2.0 * tau2)).exp();
        let w_m = (-(-a - r) * (-a - r) / (2.0 * tau2)).exp();
        assert!((mean - (a * w_p - a * w_m) / (w_p + w_m)).abs() < 1e-12);
    }

    #[test]
    fn denoiser_symmetry_and_concentration() {
        for order in [4usize, 16, 64] {
            let c = Constellation::new(order).unwrap();
            let (mean, _) = c.mmse_denoise(0.0, 0.37).unwrap();
            assert!(mean.abs() < 1e-12);
            // tau2 -> 0+: posterior concentrates on the nearest amplitude.
            let set = c.real_set().to_vec();
            let r = 0.5 * (set[0] + set[1]) + 0.1 * (set[1] - set[0]);
            let (mean, _) = c.mmse_denoise(r, 1e-8).unwrap();
            assert!((mean - set[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn denoiser_rejects_nonpositive_tau2() {
        let c = Constellation::new(4).unwrap();
        assert!(c.mmse_denoise(0.1, 0.0).is_err());
        assert!(c.mmse_denoise(0.1, -1.0).is_err());
    }

    /// Oracle: direct weighted sum while the largest weight is a normal
    /// float. Once even the nearest amplitude's weight sinks below
    /// exp(-600), the posterior provably sits on the nearest amplitude up
    /// to exp(-gap), so the concentration limit is exact at the tested
    /// tolerance whenever the exponent gap to the runner-up exceeds 60.
    /// The few deep-underflow near-midpoint points in between admit no
    /// honest f64 brute force and are skipped (None).
    fn oracle_mean(set: &[f64], r: f64, tau2: f64) -> Option<f64> {
        let mut d: Vec<f64> = set.iter().map(|&a| (a - r) * (a - r)).collect();
        d.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let max_exponent = -d[0] / (2.0 * tau2);
        if max_exponent > -600.0 {
            let mut w_sum = 0.0;
            let mut m1 = 0.0;
            for &a in set {
                let w = (-(a - r) * (a - r) / (2.0 * tau2)).exp();
                w_sum += w;
                m1 += w * a;
            }
            return Some(m1 / w_sum);
        }
        let gap = (d[1] - d[0]) / (2.0 * tau2);
        if gap >= 60.0 {
            return Some(
                *set.iter()
                    .min_by(|x, y| (*x - r).abs().partial_cmp(&(*y - r).abs()).unwrap())
                    .unwrap(),
            );
        }
        None
    }

    #[test]
    fn denoiser_matches_brute_force_and_is_bounded_monotone() {
        for order in [4usize, 16, 64] {
            let c = Constellation::new(order).unwrap();
            let set = c.real_set().to_vec();
            let (lo, hi) = (set[0], set[set.len() - 1]);
            for &tau2 in &[1e-6, 1e-4, 1e-2, 1.0, 1e3] {
                let mut prev = f64::NEG_INFINITY;
                for k in 0..=400 {
                    let r = -20.0 + 40.0 * k as f64 / 400.0;
                    let (mean, m2) = c.mmse_denoise(r, tau2).unwrap();
                    if let Some(want) = oracle_mean(&set, r, tau2) {
                        assert!((mean - want).abs() < 1e-10, "r={r} tau2={tau2}");
                    }
                    assert!(mean >= lo - 1e-12 && mean <= hi + 1e-12);
                    assert!(m2 >= 0.0);
                    assert!(mean >= prev - 1e-12, "not monotone at r={r}, tau2={tau2}");
                    prev = mean;
                }
            }
        }
    }
}
