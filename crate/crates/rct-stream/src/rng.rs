//! Deterministic, platform-independent randomness.
//!
//! Every stochastic component in this crate (bootstrap weights, synthetic
//! data) draws from splitmix64 so that a fixed seed reproduces results
//! bit-exactly everywhere. Cluster-seeded bootstrap weights additionally
//! require each weight to be a pure function of (seed, cluster id, replicate),
//! which the keyed construction below provides.

use crate::error::{Error, Result};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// splitmix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a 64-bit hash over raw bytes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// Sequential splitmix64 stream.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform draw in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller.
    pub fn next_normal(&mut self) -> f64 {
        let mut u1 = self.next_f64();
        if u1 == 0.0 {
            u1 = f64::MIN_POSITIVE;
        }
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in [0, bound) by rejection.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0);
        let zone = u64::MAX - (u64::MAX - bound + 1) % bound;
        loop {
            let v = self.next_u64();
            if v <= zone {
                return v % bound;
            }
        }
    }

    /// Poisson(1) by Knuth inversion: multiply uniforms until the product
    /// drops below e^-1.
    pub fn next_poisson1(&mut self) -> u64 {
        let limit = (-1.0f64).exp();
        let mut k: u64 = 0;
        let mut p = 1.0;
        loop {
            p *= self.next_f64();
            if p <= limit {
                return k;
            }
            k += 1;
        }
    }
}

/// How bootstrap weights are keyed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    /// Weights keyed by stream position; independent across records.
    Iid,
    /// Weights keyed by cluster id; identical for every record of a cluster.
    ClusterSeeded,
}

/// Deterministic Poisson(1) bootstrap-weight generator.
#[derive(Debug, Clone, Copy)]
pub struct WeightGenerator {
    pub global_seed: u64,
    pub mode: WeightMode,
}

impl WeightGenerator {
    pub fn new(global_seed: u64, mode: WeightMode) -> Self {
        WeightGenerator { global_seed, mode }
    }

    fn key(&self, record_index: u64, cluster_id: Option<&[u8]>) -> Result<u64> {
        match self.mode {
            WeightMode::Iid => Ok(fnv1a64(&record_index.to_le_bytes())),
            WeightMode::ClusterSeeded => cluster_id
                .map(fnv1a64)
                .ok_or(Error::MissingClusterId),
        }
    }

    /// Draws the B-vector of Poisson(1) weights for one record. Weight b is a
    /// pure function of (global_seed, key, b).
    pub fn draw_weights(
        &self,
        record_index: u64,
        cluster_id: Option<&[u8]>,
        b_count: usize,
    ) -> Result<Vec<u64>> {
        let key = self.key(record_index, cluster_id)?;
        Ok((0..b_count)
            .map(|b| self.draw_one(key, b))
            .collect())
    }

    fn draw_one(&self, key: u64, b: usize) -> u64 {
        let state = mix64(
            self.global_seed
                ^ mix64(key)
                ^ mix64((b as u64).wrapping_mul(GOLDEN_GAMMA)),
        );
        SplitMix64::new(state).next_poisson1()
    }
}
