//! Counter-based, splittable random streams.
//!
//! A stream is identified by a 64-bit key derived from the master seed and the
//! sequence of split indices that led to it. Output `n` of a stream is a pure
//! function of `(key, n)`, so a substream such as `root.split(r).split(i)` yields
//! the same numbers no matter which thread creates it or in what order.
//!
//! Samplers for the normal, gamma and Poisson laws live here as well. The
//! Poisson sampler uses sequential inversion below `mu = 10` and the PTRS
//! transformed-rejection method of Hörmann (1993) above it.

use rand::RngCore;
use rand_distr::{Distribution, Gamma, StandardNormal};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    key: u64,
    depth: u32,
    counter: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            key: mix64(seed ^ 0x6a09_e667_f3bc_c909),
            depth: 0,
            counter: 0,
        }
    }

    /// Child stream for `index`. Pure in `(self.key, index)`; the parent's
    /// counter is neither read nor advanced.
    pub fn split(&self, index: u64) -> Self {
        let key = mix64(
            self.key
                ^ mix64(
                    index
                        .wrapping_add(GOLDEN)
                        .wrapping_mul(0xd1b5_4a32_d192_ed03),
                ),
        );
        Self {
            seed: self.seed,
            key: mix64(key.wrapping_add(self.depth as u64 + 1)),
            depth: self.depth + 1,
            counter: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of splits between the master seed and this stream.
    pub fn depth(&self) -> u32 {
        self.depth
    }

    #[inline]
    pub fn next_raw(&mut self) -> u64 {
        let c = self.counter;
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key ^ mix64(c.wrapping_mul(GOLDEN).wrapping_add(0x3c6e_f372_fe94_f82b)))
    }

    /// Uniform on the open interval (0, 1).
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        ((self.next_raw() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    #[inline]
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(self)
    }

    pub fn normal_vec(&mut self, d: usize) -> Vec<f64> {
        (0..d).map(|_| self.normal()).collect()
    }

    pub fn gamma(&mut self, shape: f64, scale: f64) -> Result<f64> {
        if !(shape > 0.0 && scale > 0.0 && shape.is_finite() && scale.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "gamma draw needs positive shape and scale, got ({shape}, {scale})"
            )));
        }
        let g = Gamma::new(shape, scale).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        Ok(g.sample(self))
    }

    pub fn poisson(&mut self, mu: f64) -> Result<u64> {
        if !(mu >= 0.0) || !mu.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "poisson mean must be finite and >= 0, got {mu}"
            )));
        }
        if mu == 0.0 {
            return Ok(0);
        }
        if mu < 10.0 {
            Ok(self.poisson_inversion(mu))
        } else {
            Ok(self.poisson_ptrs(mu))
        }
    }

    fn poisson_inversion(&mut self, mu: f64) -> u64 {
        let u = self.uniform();
        let mut k = 0u64;
        let mut p = (-mu).exp();
        let mut cdf = p;
        // the cap only matters when rounding leaves the cdf a hair below u
        while u > cdf && k < 1000 {
            k += 1;
            p *= mu / k as f64;
            cdf += p;
        }
        k
    }

    fn poisson_ptrs(&mut self, mu: f64) -> u64 {
        let slam = mu.sqrt();
        let loglam = mu.ln();
        let b = 0.931 + 2.53 * slam;
        let a = -0.059 + 0.02483 * b;
        let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
        let vr = 0.9277 - 3.6224 / (b - 2.0);
        loop {
            let u = self.uniform() - 0.5;
            let v = self.uniform();
            let us = 0.5 - u.abs();
            let k = ((2.0 * a / us + b) * u + mu + 0.43).floor();
            if us >= 0.07 && v <= vr {
                return k as u64;
            }
            if k < 0.0 || (us < 0.013 && v > us) {
                continue;
            }
            let lhs = v.ln() + inv_alpha.ln() - (a / (us * us) + b).ln();
            let rhs = -mu + k * loglam - ln_gamma(k + 1.0);
            if lhs <= rhs {
                return k as u64;
            }
        }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        (self.next_raw() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.next_raw()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let bytes = self.next_raw().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn moments(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    #[test]
    fn same_seed_same_sequence() {
        let mut a = RngStream::new(42);
        let mut b = RngStream::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_raw(), b.next_raw());
        }
        let mut c = RngStream::new(43);
        assert_ne!(RngStream::new(42).next_raw(), c.next_raw());
    }

    #[test]
    fn split_is_order_independent() {
        let root = RngStream::new(7);
        let forward: Vec<u64> = (0..5).map(|r| root.split(r).split(3).next_raw()).collect();
        let backward: Vec<u64> = (0..5)
            .rev()
            .map(|r| root.split(r).split(3).next_raw())
            .collect();
        let mut backward = backward;
        backward.reverse();
        assert_eq!(forward, backward);

        // drawing from the parent does not change its children
        let mut used = root.clone();
        used.next_raw();
        assert_eq!(used.split(2).next_raw(), root.split(2).next_raw());
        assert_ne!(root.split(1).next_raw(), root.split(2).next_raw());
        assert_ne!(
            root.split(1).split(2).next_raw(),
            root.split(2).split(1).next_raw()
        );
    }

    #[test]
    fn normal_passes_ks() {
        let mut rng = RngStream::new(11);
        let mut xs: Vec<f64> = (0..100_000).map(|_| rng.normal()).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = xs.len() as f64;
        let std = Normal::new(0.0, 1.0).unwrap();
        let d = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = std.cdf(x);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        // asymptotic Kolmogorov critical value at p = 0.001 is 1.949 / sqrt(n)
        assert!(d < 1.949 / n.sqrt(), "KS statistic {d}");
    }

    #[test]
    fn gamma_moments() {
        let mut rng = RngStream::new(3);
        let xs: Vec<f64> = (0..100_000).map(|_| rng.gamma(2.0, 3.0).unwrap()).collect();
        let (mean, var) = moments(&xs);
        let se_mean = (18.0f64 / 1e5).sqrt();
        assert!((mean - 6.0).abs() < 4.0 * se_mean, "mean {mean}");
        // variance of the sample variance for a gamma: (mu4 - sigma^4) / n
        // with mu4 = 3 k (k + 2) theta^4 = 3*2*4*81
        let se_var = ((3.0 * 2.0 * 4.0 * 81.0 - 18.0f64 * 18.0) / 1e5).sqrt();
        assert!((var - 18.0).abs() < 4.0 * se_var, "var {var}");
        assert!(rng.gamma(0.0, 1.0).is_err());
        assert!(rng.gamma(1.0, -1.0).is_err());
    }

    #[test]
    fn poisson_moments_both_regimes() {
        for &mu in &[0.3f64, 4.5, 9.99, 10.0, 37.0, 2500.0] {
            let mut rng = RngStream::new(mu.to_bits());
            let n = 100_000;
            let xs: Vec<f64> = (0..n).map(|_| rng.poisson(mu).unwrap() as f64).collect();
            let (mean, var) = moments(&xs);
            let se = (mu / n as f64).sqrt();
            assert!((mean - mu).abs() < 4.0 * se, "mu {mu}: mean {mean}");
            assert!((var / mu - 1.0).abs() < 0.03, "mu {mu}: var {var}");
        }
    }

    #[test]
    fn poisson_edge_cases() {
        let mut rng = RngStream::new(1);
        assert_eq!(rng.poisson(0.0).unwrap(), 0);
        assert!(rng.poisson(-1.0).is_err());
        assert!(rng.poisson(f64::NAN).is_err());
        assert!(rng.poisson(f64::INFINITY).is_err());
    }

    #[test]
    fn uniform_is_open() {
        let mut rng = RngStream::new(0);
        for _ in 0..10_000 {
            let u = rng.uniform();
            assert!(u > 0.0 && u < 1.0);
        }
    }
}
